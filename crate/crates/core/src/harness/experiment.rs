//! Runs every (seed, strategy) pair of a config and writes the metrics files.
//!
//! Output layout under `out`:
//!
//! ```text
//! metrics.csv            seed,strategy,cycle,round,labelled_fraction,test_accuracy,seconds
//! per_class.csv          seed,strategy,cycle,round,class_0,...
//! summary.json           final accuracy per strategy and cycle, mean and stddev over seeds
//! partition_seed{S}.json client index lists
//! scores/                per-client acquisition scores (when dump_scores is set)
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::blobs::make_blobs;
use super::config::{DatasetKind, ExperimentConfig};
use super::mnist::load_mnist;
use super::report::{summarize, MetricsRow, StrategySummary};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::federation::{MetricsRecord, RunObserver, Simulation};
use crate::nn::ModelSpec;
use crate::partition::{dirichlet_partition, PartitionPlan};
use crate::sampling::Acquisition;

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<StrategySummary>,
}

/// Train and test sets for one run seed. Blob samples depend on the seed, MNIST does not.
pub fn load_dataset(config: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match config.dataset {
        DatasetKind::Blobs => make_blobs(&config.blobs, seed),
        DatasetKind::Mnist => load_mnist(&config.mnist_dir),
    }
}

pub fn model_spec(config: &ExperimentConfig, data: &Dataset) -> Result<ModelSpec> {
    ModelSpec::mlp(data.dim(), &config.hidden, data.classes())
}

struct FileObserver<'a> {
    metrics: &'a mut csv::Writer<File>,
    per_class: &'a mut csv::Writer<File>,
    records: &'a mut Vec<MetricsRecord>,
    scores_dir: Option<PathBuf>,
    seed: u64,
    strategy: String,
}

impl RunObserver for FileObserver<'_> {
    fn on_round(&mut self, record: &MetricsRecord) -> Result<()> {
        self.metrics.serialize(MetricsRow::from(record))?;
        let mut fields = vec![
            record.seed.to_string(),
            record.strategy.clone(),
            record.cycle.to_string(),
            record.round.to_string(),
        ];
        fields.extend(record.per_class_accuracy.iter().map(f64::to_string));
        self.per_class.write_record(&fields)?;
        self.metrics.flush()?;
        self.per_class.flush()?;
        self.records.push(record.clone());
        Ok(())
    }

    fn on_acquisition(&mut self, cycle: usize, client: usize, acquisition: &Acquisition) -> Result<()> {
        let Some(dir) = &self.scores_dir else {
            return Ok(());
        };
        let path = dir.join(format!(
            "seed{}_{}_cycle{cycle}_client{client}.csv",
            self.seed, self.strategy
        ));
        write_scores(&path, acquisition)
    }
}

/// `id,score,selected` for every scored unlabelled sample.
pub fn write_scores(path: &Path, acquisition: &Acquisition) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "score", "selected"])?;
    for (&id, &score) in acquisition.scores.ids.iter().zip(&acquisition.scores.scores) {
        let selected = acquisition.selected.binary_search(&id).is_ok() as u8;
        w.write_record([id.to_string(), score.to_string(), selected.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_partition(path: &Path, plan: &PartitionPlan) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(plan.to_json()?.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn build_partition(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<PartitionPlan> {
    dirichlet_partition(&train.index(), config.federation.clients, config.alpha, seed)
}

/// Runs seeds in order, and within each seed every strategy on the same data and partition.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    fs::create_dir_all(&config.out)?;
    let scores_dir = if config.dump_scores {
        let dir = config.out.join("scores");
        fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };
    let mut metrics = csv::Writer::from_path(config.out.join("metrics.csv"))?;
    let mut per_class = csv::Writer::from_path(config.out.join("per_class.csv"))?;
    let mut header_written = false;
    let mut records = Vec::new();

    for &seed in &config.seeds {
        let (train, test) = load_dataset(config, seed)?;
        if !header_written {
            let mut header: Vec<String> = ["seed", "strategy", "cycle", "round"].map(String::from).to_vec();
            header.extend((0..train.classes()).map(|c| format!("class_{c}")));
            per_class.write_record(&header)?;
            header_written = true;
        }
        let spec = model_spec(config, &train)?;
        let plan = build_partition(config, &train, seed)?;
        write_partition(&config.out.join(format!("partition_seed{seed}.json")), &plan)?;
        for &strategy in &config.strategies {
            log::info!("seed {seed}, strategy {strategy}");
            let fed = crate::federation::FederationConfig {
                seed,
                strategy,
                ..config.federation.clone()
            };
            let mut sim = Simulation::new(&train, &test, &spec, fed, &plan, config.initial_fraction)?;
            let mut observer = FileObserver {
                metrics: &mut metrics,
                per_class: &mut per_class,
                records: &mut records,
                scores_dir: scores_dir.clone(),
                seed,
                strategy: strategy.to_string(),
            };
            sim.run(&mut observer)?;
        }
    }
    metrics.flush()?;
    per_class.flush()?;

    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from).collect();
    let summary = summarize(&rows);
    let mut f = BufWriter::new(File::create(config.out.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(ExperimentOutput { records, summary })
}

/// Trains the first cycle for the first seed and strategy, then dumps every client's
/// acquisition scores and selection into `out/scores`.
pub fn score_experiment(config: &ExperimentConfig) -> Result<Vec<Acquisition>> {
    config.validate()?;
    let seed = config.seeds[0];
    let (train, test) = load_dataset(config, seed)?;
    let spec = model_spec(config, &train)?;
    let plan = build_partition(config, &train, seed)?;
    let fed = crate::federation::FederationConfig {
        seed,
        strategy: config.strategies[0],
        ..config.federation.clone()
    };
    let mut sim = Simulation::new(&train, &test, &spec, fed, &plan, config.initial_fraction)?;
    let mut sink = Vec::new();
    sim.run_active_cycle(0, &mut sink)?;
    let acquisitions = sim.score_all(0, true)?;
    let dir = config.out.join("scores");
    fs::create_dir_all(&dir)?;
    for (k, acquisition) in acquisitions.iter().enumerate() {
        write_scores(&dir.join(format!("client{k}.csv")), acquisition)?;
    }
    Ok(acquisitions)
}

/// Computes and writes only the partition plan for the first seed.
pub fn partition_experiment(config: &ExperimentConfig) -> Result<PartitionPlan> {
    config.validate()?;
    let seed = config.seeds[0];
    let (train, _) = load_dataset(config, seed)?;
    let plan = build_partition(config, &train, seed)?;
    fs::create_dir_all(&config.out)?;
    write_partition(&config.out.join(format!("partition_seed{seed}.json")), &plan)?;
    Ok(plan)
}
