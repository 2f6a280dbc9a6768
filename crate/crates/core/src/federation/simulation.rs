//! The outer loop: per cycle, reset to the initial global model, run `rounds`
//! communication rounds, then let every client annotate its budget.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate, local_update, FederationConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, argmax, ModelSpec, ParamVector};
use crate::partition::{class_histogram, initial_label_split, ClassHistogram, PartitionPlan};
use crate::rng::{stream, Purpose, StreamRng};
use crate::sampling::{acquire, Acquisition, AcquisitionRequest, ClientView};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: ParamVector,
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub histogram: ClassHistogram,
    /// Global parameters saved at the client's most recent participating round.
    pub saved_global: ParamVector,
    /// Annotation budget per cycle.
    pub budget: usize,
}

impl ClientState {
    pub fn partition_size(&self) -> usize {
        self.labelled.len() + self.unlabelled.len()
    }

    /// Moves `ids` from the unlabelled to the labelled pool and updates the histogram.
    pub fn annotate(&mut self, ids: &[usize], dataset: &Dataset) -> Result<()> {
        for &id in ids {
            let pos = self
                .unlabelled
                .binary_search(&id)
                .map_err(|_| Error::Protocol(format!("client {}: id {id} is not unlabelled", self.id)))?;
            self.unlabelled.remove(pos);
            let slot = self.labelled.binary_search(&id).unwrap_err();
            self.labelled.insert(slot, id);
            self.histogram.add(dataset.label(id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamVector,
    pub initial_params: ParamVector,
    pub round: usize,
    pub cycle: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub strategy: String,
    pub cycle: usize,
    pub round: usize,
    pub labelled_fraction: f64,
    pub test_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub seconds: f64,
}

pub trait RunObserver {
    fn on_round(&mut self, record: &MetricsRecord) -> Result<()>;

    fn on_acquisition(&mut self, _cycle: usize, _client: usize, _acquisition: &Acquisition) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for Vec<MetricsRecord> {
    fn on_round(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Uniform draw of `ceil(R K)` client ids, returned in ascending order.
pub fn select_clients(config: &FederationConfig, rng: &mut StreamRng) -> Vec<usize> {
    let mut chosen = rand::seq::index::sample(rng, config.clients, config.clients_per_round()).into_vec();
    chosen.sort_unstable();
    chosen
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub struct Simulation<'a> {
    train: &'a Dataset,
    test: &'a Dataset,
    config: FederationConfig,
    strategy_label: String,
    server: ServerState,
    clients: Vec<ClientState>,
    started: Instant,
}

impl<'a> Simulation<'a> {
    /// Builds client pools from a partition plan: an initial random labelled split of
    /// `initial_fraction` per client, and per-cycle budgets of `budget_fraction`.
    pub fn new(
        train: &'a Dataset,
        test: &'a Dataset,
        spec: &ModelSpec,
        config: FederationConfig,
        plan: &PartitionPlan,
        initial_fraction: f64,
    ) -> Result<Self> {
        config.validate()?;
        if plan.num_clients() != config.clients {
            return Err(Error::Config(format!(
                "partition has {} clients, config {}",
                plan.num_clients(),
                config.clients
            )));
        }
        if spec.input_dim() != train.dim() || spec.num_classes() != train.classes() {
            return Err(Error::Config(format!(
                "model {:?} does not fit data of width {} with {} classes",
                spec.layer_widths(),
                train.dim(),
                train.classes()
            )));
        }
        let initial = ParamVector::init(spec, &mut stream(config.seed, Purpose::ModelInit, &[]));
        let mut clients = Vec::with_capacity(config.clients);
        for (k, ids) in plan.client_indices.iter().enumerate() {
            let (labelled, unlabelled) = if ids.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                let split_seed = crate::rng::derive_seed(config.seed, Purpose::LabelSplit, &[k as u64]);
                initial_label_split(ids, initial_fraction, split_seed)?
            };
            let histogram = class_histogram(&labelled, train.classes(), |i| train.label(i));
            clients.push(ClientState {
                id: k,
                params: initial.clone(),
                budget: round_half_up(config.budget_fraction * ids.len() as f64),
                labelled,
                unlabelled,
                histogram,
                saved_global: initial.clone(),
            });
        }
        Ok(Self {
            train,
            test,
            strategy_label: config.strategy.to_string(),
            config,
            server: ServerState {
                params: initial.clone(),
                initial_params: initial,
                round: 0,
                cycle: 0,
            },
            clients,
            started: Instant::now(),
        })
    }

    /// Label written into the `strategy` column of emitted metrics.
    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.strategy_label = label.into();
        self
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn labelled_fraction(&self) -> f64 {
        let labelled: usize = self.clients.iter().map(|c| c.labelled.len()).sum();
        let total: usize = self.clients.iter().map(ClientState::partition_size).sum();
        labelled as f64 / total.max(1) as f64
    }

    /// Accuracy and per-class accuracy of `params` on the held-out set.
    pub fn evaluate(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        evaluate(params, self.test)
    }

    /// All cycles: train, acquire, ..., train. Emits one record per round.
    pub fn run(&mut self, observer: &mut dyn RunObserver) -> Result<()> {
        self.started = Instant::now();
        for cycle in 0..=self.config.cycles {
            self.run_active_cycle(cycle, observer)?;
            if cycle < self.config.cycles {
                self.acquire_all(cycle, observer)?;
            }
        }
        Ok(())
    }

    /// Resets to the initial global model and runs `rounds` communication rounds.
    pub fn run_active_cycle(&mut self, cycle: usize, observer: &mut dyn RunObserver) -> Result<()> {
        self.server.cycle = cycle;
        self.server.params = self.server.initial_params.clone();
        for client in &mut self.clients {
            client.params = self.server.initial_params.clone();
            client.saved_global = self.server.initial_params.clone();
        }
        let labelled_fraction = self.labelled_fraction();
        for round in 1..=self.config.rounds {
            self.server.round = round;
            self.communication_round(cycle, round)?;
            let (accuracy, per_class) = self.evaluate(&self.server.params)?;
            observer.on_round(&MetricsRecord {
                seed: self.config.seed,
                strategy: self.strategy_label.clone(),
                cycle,
                round,
                labelled_fraction,
                test_accuracy: accuracy,
                per_class_accuracy: per_class,
                seconds: if self.config.wall_clock {
                    self.started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            })?;
        }
        Ok(())
    }

    /// Training streams are keyed by round and client but not by cycle, so cycles
    /// differ only through their labelled pools.
    fn communication_round(&mut self, cycle: usize, round: usize) -> Result<()> {
        let seed = self.config.seed;
        let selected = select_clients(
            &self.config,
            &mut stream(seed, Purpose::ClientSelection, &[round as u64]),
        );
        let global = &self.server.params;
        let config = &self.config;
        let train = self.train;
        let clients = &self.clients;
        let updates: Vec<Result<Option<ParamVector>>> = selected
            .par_iter()
            .map(|&k| {
                let client = &clients[k];
                if client.labelled.is_empty() {
                    return Ok(None);
                }
                let mut rng = stream(seed, Purpose::LocalUpdate, &[round as u64, k as u64]);
                local_update(
                    train,
                    &client.labelled,
                    &client.unlabelled,
                    &client.histogram,
                    global,
                    config,
                    round,
                    &mut rng,
                )
                .map(Some)
                .map_err(|e| e.with_context(format!("cycle {cycle}, round {round}, client {k}")))
            })
            .collect();

        let mut participants = Vec::with_capacity(selected.len());
        for (&k, update) in selected.iter().zip(updates) {
            // Clients without labels download the model but contribute zero weight.
            self.clients[k].params = update?.unwrap_or_else(|| self.server.params.clone());
            if !self.clients[k].labelled.is_empty() {
                participants.push(k);
            }
        }
        let contributions: Vec<(&ParamVector, u64)> = participants
            .iter()
            .map(|&k| (&self.clients[k].params, self.clients[k].histogram.total()))
            .collect();
        // A round in which no selected client holds labels leaves the global model as is.
        if !contributions.is_empty() {
            self.server.params = aggregate(&contributions)
                .map_err(|e| e.with_context(format!("cycle {cycle}, round {round}")))?;
        }
        for &k in &selected {
            self.clients[k].saved_global = self.server.params.clone();
        }
        Ok(())
    }

    /// Every client scores its unlabelled pool and annotates its budget.
    pub fn acquire_all(&mut self, cycle: usize, observer: &mut dyn RunObserver) -> Result<()> {
        let acquisitions = self.score_all(cycle, true)?;
        for (k, acquisition) in acquisitions.into_iter().enumerate() {
            observer.on_acquisition(cycle, k, &acquisition)?;
            let selected = acquisition.selected;
            self.clients[k].annotate(&selected, self.train)?;
        }
        Ok(())
    }

    /// Scores every client's pool under the configured strategy without moving ids.
    /// With `with_budget = false` nothing is selected.
    pub fn score_all(&self, cycle: usize, with_budget: bool) -> Result<Vec<Acquisition>> {
        let seed = self.config.seed;
        self.clients
            .par_iter()
            .map(|client| {
                let request = AcquisitionRequest {
                    strategy: self.config.strategy,
                    scoring_model: self.config.scoring_model,
                    lambda: self.config.lambda,
                    budget: if with_budget {
                        client.budget.min(client.unlabelled.len())
                    } else {
                        0
                    },
                };
                let view = ClientView {
                    dataset: self.train,
                    client_params: &client.params,
                    global_params: &client.saved_global,
                    histogram: &client.histogram,
                    labelled: &client.labelled,
                    unlabelled: &client.unlabelled,
                };
                let mut rng = stream(seed, Purpose::Acquisition, &[cycle as u64, client.id as u64]);
                acquire(&request, &view, self.config.batch_size, &mut rng)
            })
            .collect()
    }
}

/// Accuracy and per-class accuracy (NaN-free: classes absent from the set report 0).
pub fn evaluate(params: &ParamVector, test: &Dataset) -> Result<(f64, Vec<f64>)> {
    let classes = test.classes();
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let ids: Vec<usize> = (0..test.len()).collect();
    for chunk in ids.chunks(1024) {
        let logits = nn::forward(params, &test.gather(chunk))?;
        for (row, &id) in logits.iter_rows().zip(chunk) {
            let y = test.label(id);
            seen[y] += 1;
            if argmax(row) == y {
                correct[y] += 1;
            }
        }
    }
    let total: usize = seen.iter().sum();
    let accuracy = correct.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let per_class = correct
        .iter()
        .zip(&seen)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok((accuracy, per_class))
}
