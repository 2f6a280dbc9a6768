//! Acquisition scoring and selection over a client's unlabelled pool.
//!
//! The knowledge-specialized score compares the client model with the client's
//! saved copy of the global model after reweighting both softmaxes by the
//! client's labelled class counts raised to `lambda`. Baselines (entropy, margin,
//! k-center core-set, random) and the ablations (vanilla symmetric KL, reciprocal
//! counts) share the same selection path.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, clamp_prob, kl_divergence, softmax, Matrix, ParamVector};
use crate::partition::ClassHistogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Ksas,
    /// Symmetric KL without count weighting (`lambda = 0`).
    VanillaKl,
    /// Counts replaced by their reciprocals.
    ReversedKsas,
    Entropy,
    Margin,
    Coreset,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ksas,
        Strategy::VanillaKl,
        Strategy::ReversedKsas,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::Coreset,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ksas => "ksas",
            Strategy::VanillaKl => "vanilla_kl",
            Strategy::ReversedKsas => "reversed_ksas",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::Coreset => "coreset",
            Strategy::Random => "random",
        }
    }

    /// Whether smaller scores are more informative.
    pub fn ascending(self) -> bool {
        matches!(self, Strategy::Margin)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Which parameters produce uncertainty/diversity statistics for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoringModel {
    /// The client's locally updated parameters.
    #[default]
    Client,
    /// The client's saved copy of the global parameters.
    Global,
}

impl FromStr for ScoringModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "client" => Ok(ScoringModel::Client),
            "global" => Ok(ScoringModel::Global),
            other => Err(Error::Config(format!("unknown scoring model `{other}`"))),
        }
    }
}

impl fmt::Display for ScoringModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringModel::Client => "client",
            ScoringModel::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionRequest {
    pub strategy: Strategy,
    pub scoring_model: ScoringModel,
    pub lambda: f64,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPool {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoredPool {
    pub fn new(ids: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if ids.len() != scores.len() {
            return Err(Error::Input(format!("{} ids but {} scores", ids.len(), scores.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite acquisition score".into()));
        }
        Ok(Self { ids, scores })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Class counts with zeros replaced by one, as reals.
pub fn substituted_counts(counts: &ClassHistogram) -> Vec<f64> {
    counts
        .counts()
        .iter()
        .map(|&n| if n == 0 { 1.0 } else { n as f64 })
        .collect()
}

/// Softmax of `logits + lambda * ln(weights)`.
fn weighted_prob(logits: &[f64], weights: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return softmax(logits);
    }
    let adjusted: Vec<f64> = logits
        .iter()
        .zip(weights)
        .map(|(&g, &w)| g + lambda * w.ln())
        .collect();
    softmax(&adjusted)
}

/// Knowledge-specialized probability: `P_y ∝ n_y^lambda exp(g_y)`.
///
/// Zero counts are treated as one, so an empty histogram yields the plain softmax.
pub fn ks_prob(logits: &[f64], counts: &ClassHistogram, lambda: f64) -> Vec<f64> {
    weighted_prob(logits, &substituted_counts(counts), lambda)
}

/// `KL(p||q) + KL(q||p)` under the usual clamping.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    kl_divergence(p, q).expect("equal lengths") + kl_divergence(q, p).expect("equal lengths")
}

fn check_lengths(a: &[f64], b: &[f64], counts: &ClassHistogram) -> Result<()> {
    if a.len() != b.len() || a.len() != counts.classes() {
        return Err(Error::Input(format!(
            "logit widths {} / {} do not match histogram of {} classes",
            a.len(),
            b.len(),
            counts.classes()
        )));
    }
    Ok(())
}

/// Symmetric KL between the knowledge-specialized client and global distributions.
pub fn ksas_score(client_logits: &[f64], global_logits: &[f64], counts: &ClassHistogram, lambda: f64) -> Result<f64> {
    check_lengths(client_logits, global_logits, counts)?;
    let weights = substituted_counts(counts);
    Ok(symmetric_kl(
        &weighted_prob(client_logits, &weights, lambda),
        &weighted_prob(global_logits, &weights, lambda),
    ))
}

/// As [`ksas_score`] with every (substituted) count replaced by its reciprocal.
pub fn reversed_ksas_score(
    client_logits: &[f64],
    global_logits: &[f64],
    counts: &ClassHistogram,
    lambda: f64,
) -> Result<f64> {
    check_lengths(client_logits, global_logits, counts)?;
    let weights: Vec<f64> = substituted_counts(counts).iter().map(|n| 1.0 / n).collect();
    Ok(symmetric_kl(
        &weighted_prob(client_logits, &weights, lambda),
        &weighted_prob(global_logits, &weights, lambda),
    ))
}

/// `-sum p ln p` with clamping.
pub fn entropy_score(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            p * p.ln()
        })
        .sum::<f64>()
}

/// Gap between the two largest probabilities. Smaller is more uncertain.
pub fn margin_score(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Input("margin needs at least two classes".into()));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(first - second)
}

/// Ids of the `budget` best scores; descending unless `ascending`. Ties go to the lower id.
pub fn select_top(pool: &ScoredPool, budget: usize, ascending: bool) -> Result<Vec<usize>> {
    if budget > pool.len() {
        return Err(Error::Input(format!(
            "budget {budget} exceeds unlabelled pool of {}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if ascending {
            pool.scores[a].total_cmp(&pool.scores[b])
        } else {
            pool.scores[b].total_cmp(&pool.scores[a])
        };
        by_score.then(pool.ids[a].cmp(&pool.ids[b]))
    });
    Ok(order[..budget].iter().map(|&i| pool.ids[i]).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each unlabelled row to its nearest labelled row.
fn nearest_labelled(labelled: &Matrix, unlabelled: &Matrix) -> Vec<f64> {
    unlabelled
        .iter_rows()
        .map(|u| {
            labelled
                .iter_rows()
                .map(|l| squared_distance(u, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Greedy k-center selection.
///
/// Repeatedly takes the unlabelled point farthest from its nearest labelled or
/// already selected point. With no labelled points the first pick is the point
/// farthest from the feature mean. Ties go to the lower id.
pub fn coreset_select(labelled: &Matrix, unlabelled: &Matrix, unlabelled_ids: &[usize], budget: usize) -> Result<Vec<usize>> {
    if unlabelled.rows() != unlabelled_ids.len() {
        return Err(Error::Input("unlabelled features and ids disagree in length".into()));
    }
    if budget > unlabelled_ids.len() {
        return Err(Error::Input(format!(
            "budget {budget} exceeds unlabelled pool of {}",
            unlabelled_ids.len()
        )));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    let mut min_dist = if labelled.rows() > 0 {
        nearest_labelled(labelled, unlabelled)
    } else {
        let mut mean = vec![0.0; unlabelled.cols()];
        for row in unlabelled.iter_rows() {
            nn_axpy(&mut mean, 1.0 / unlabelled.rows() as f64, row);
        }
        unlabelled.iter_rows().map(|u| squared_distance(u, &mean)).collect()
    };
    let mut taken = vec![false; unlabelled_ids.len()];
    let mut picks = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for j in (0..min_dist.len()).filter(|&j| !taken[j]) {
            best = match best {
                None => Some(j),
                Some(b) if min_dist[j] > min_dist[b]
                    || (min_dist[j] == min_dist[b] && unlabelled_ids[j] < unlabelled_ids[b]) => Some(j),
                keep => keep,
            };
        }
        let pick = best.expect("budget <= pool");
        taken[pick] = true;
        picks.push(unlabelled_ids[pick]);
        let center = unlabelled.row(pick);
        for (j, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(squared_distance(unlabelled.row(j), center));
        }
        // The seed pick under an empty labelled set measured distance to the mean;
        // from here on only distances to chosen centers count.
        if labelled.rows() == 0 && picks.len() == 1 {
            for (j, d) in min_dist.iter_mut().enumerate() {
                *d = squared_distance(unlabelled.row(j), center);
            }
        }
    }
    Ok(picks)
}

fn nn_axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Everything a client exposes to its own acquisition step.
pub struct ClientView<'a> {
    pub dataset: &'a Dataset,
    pub client_params: &'a ParamVector,
    /// The client's saved copy of the global model.
    pub global_params: &'a ParamVector,
    pub histogram: &'a ClassHistogram,
    pub labelled: &'a [usize],
    pub unlabelled: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Acquisition {
    pub selected: Vec<usize>,
    pub scores: ScoredPool,
    /// Number of classes whose zero count was replaced by one for count weighting.
    pub substituted_classes: usize,
}

fn logits_in_chunks(params: &ParamVector, dataset: &Dataset, ids: &[usize], batch_size: usize) -> Result<Matrix> {
    let classes = params.spec().num_classes();
    let mut out = Vec::with_capacity(ids.len() * classes);
    for chunk in ids.chunks(batch_size.max(1)) {
        out.extend_from_slice(nn::forward(params, &dataset.gather(chunk))?.as_slice());
    }
    Matrix::from_vec(ids.len(), classes, out)
}

fn features_in_chunks(params: &ParamVector, dataset: &Dataset, ids: &[usize], batch_size: usize) -> Result<Matrix> {
    let mut out = Vec::new();
    let mut cols = 0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let f = nn::penultimate_features(params, &dataset.gather(chunk))?;
        cols = f.cols();
        out.extend_from_slice(f.as_slice());
    }
    if ids.is_empty() {
        cols = params.spec().layer_widths()[params.spec().num_layers() - 1];
    }
    Matrix::from_vec(ids.len(), cols, out)
}

/// Scores the whole unlabelled pool and selects `request.budget` ids.
///
/// Core-set scores are squared distances to the nearest labelled point before
/// selection starts; random scores are uniform draws.
pub fn acquire<R: Rng + ?Sized>(
    request: &AcquisitionRequest,
    view: &ClientView<'_>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Acquisition> {
    if !request.lambda.is_finite() || request.lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", request.lambda)));
    }
    let ids = view.unlabelled;
    let scorer = match request.scoring_model {
        ScoringModel::Client => view.client_params,
        ScoringModel::Global => view.global_params,
    };
    let substituted_classes = view.histogram.counts().iter().filter(|&&n| n == 0).count();

    let (scores, selected) = match request.strategy {
        Strategy::Random => {
            let scores: Vec<f64> = ids.iter().map(|_| rng.random::<f64>()).collect();
            let pool = ScoredPool::new(ids.to_vec(), scores)?;
            let selected = select_top(&pool, request.budget, false)?;
            (pool, selected)
        }
        Strategy::Coreset => {
            let labelled = features_in_chunks(scorer, view.dataset, view.labelled, batch_size)?;
            let unlabelled = features_in_chunks(scorer, view.dataset, ids, batch_size)?;
            let selected = coreset_select(&labelled, &unlabelled, ids, request.budget)?;
            let scores = if labelled.rows() > 0 {
                nearest_labelled(&labelled, &unlabelled)
            } else {
                vec![0.0; ids.len()]
            };
            (ScoredPool::new(ids.to_vec(), scores)?, selected)
        }
        strategy => {
            let client = logits_in_chunks(view.client_params, view.dataset, ids, batch_size)?;
            let scores: Vec<f64> = match strategy {
                Strategy::Ksas | Strategy::VanillaKl | Strategy::ReversedKsas => {
                    let global = logits_in_chunks(view.global_params, view.dataset, ids, batch_size)?;
                    let lambda = if strategy == Strategy::VanillaKl { 0.0 } else { request.lambda };
                    client
                        .iter_rows()
                        .zip(global.iter_rows())
                        .map(|(c, g)| match strategy {
                            Strategy::ReversedKsas => reversed_ksas_score(c, g, view.histogram, lambda),
                            _ => ksas_score(c, g, view.histogram, lambda),
                        })
                        .collect::<Result<_>>()?
                }
                Strategy::Entropy | Strategy::Margin => {
                    let logits = match request.scoring_model {
                        ScoringModel::Client => client,
                        ScoringModel::Global => logits_in_chunks(view.global_params, view.dataset, ids, batch_size)?,
                    };
                    logits
                        .iter_rows()
                        .map(|row| {
                            let p = softmax(row);
                            if strategy == Strategy::Entropy {
                                Ok(entropy_score(&p))
                            } else {
                                margin_score(&p)
                            }
                        })
                        .collect::<Result<_>>()?
                }
                _ => unreachable!("handled above"),
            };
            let pool = ScoredPool::new(ids.to_vec(), scores)?;
            let selected = select_top(&pool, request.budget, strategy.ascending())?;
            (pool, selected)
        }
    };
    if substituted_classes > 0 && matches!(request.strategy, Strategy::Ksas | Strategy::ReversedKsas) {
        log::debug!(
            "{}: substituted count 1 for {substituted_classes} zero-count classes",
            request.strategy
        );
    }
    Ok(Acquisition {
        selected,
        scores,
        substituted_classes,
    })
}
