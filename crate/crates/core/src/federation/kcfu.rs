//! Local update with knowledge-compensatory distillation.
//!
//! The client loss is the balanced cross-entropy on a labelled mini-batch. From
//! the second round of a cycle on, a mixed unlabelled mini-batch adds a
//! distillation term pulling the client softmax towards the broadcast global
//! model, weighted per sample by the inverse labelled frequency of the global
//! model's pseudo-label. The global model only provides constants.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{FederationConfig, GammaWeighting, TargetLogits};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, argmax, clamp_prob, log_softmax, softmax, Batch, GradientVector, Matrix, ParamVector};
use crate::partition::ClassHistogram;

/// `N_k / n_{k,y'}`, or `N_k` when the pseudo-label class has no labelled samples.
pub fn gamma_weight(pseudo_label: usize, histogram: &ClassHistogram) -> f64 {
    let total = histogram.total() as f64;
    match histogram.counts()[pseudo_label] {
        0 => total,
        n => total / n as f64,
    }
}

/// Global-model argmax per row (lowest class index on ties).
pub fn pseudo_labels(global_logits: &Matrix) -> Vec<usize> {
    global_logits.iter_rows().map(argmax).collect()
}

/// Unlabelled batch paired with a permutation of itself.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub inputs: Matrix,
    pub beta: Vec<f64>,
    /// `(first, second)` row indices into the unmixed batch.
    pub pairs: Vec<(usize, usize)>,
    pub gamma: Vec<f64>,
}

/// Builds `beta x1 + (1 - beta) x2` with `x2` drawn from a seeded permutation of the
/// batch and one `beta ~ Beta(a, b)` per sample. `beta_shape = None` disables mixing
/// (every `beta` is one).
pub fn mix_batch<R: Rng + ?Sized>(
    inputs: &Matrix,
    gamma: &[f64],
    beta_shape: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<MixedBatch> {
    let n = inputs.rows();
    let (pairs, beta): (Vec<(usize, usize)>, Vec<f64>) = match beta_shape {
        None => ((0..n).map(|i| (i, i)).collect(), vec![1.0; n]),
        Some((a, b)) => {
            let dist = Beta::new(a, b).map_err(|e| Error::Config(format!("Beta({a}, {b}): {e}")))?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let beta = (0..n).map(|_| dist.sample(rng)).collect();
            ((0..n).zip(perm).collect(), beta)
        }
    };
    let mut mixed = Matrix::zeros(n, inputs.cols());
    let mut mixed_gamma = Vec::with_capacity(n);
    for (j, (&(i1, i2), &bj)) in pairs.iter().zip(&beta).enumerate() {
        let (x1, x2) = (inputs.row(i1), inputs.row(i2));
        for ((m, a), b) in mixed.row_mut(j).iter_mut().zip(x1).zip(x2) {
            *m = bj * a + (1.0 - bj) * b;
        }
        mixed_gamma.push(bj * gamma[i1] + (1.0 - bj) * gamma[i2]);
    }
    Ok(MixedBatch {
        inputs: mixed,
        beta,
        pairs,
        gamma: mixed_gamma,
    })
}

/// Options controlling the compensation loss.
#[derive(Debug, Clone, Copy)]
pub struct CompensationOptions {
    pub gamma: GammaWeighting,
    pub beta_shape: Option<(f64, f64)>,
    pub target: TargetLogits,
}

impl CompensationOptions {
    pub fn from_config(config: &FederationConfig) -> Self {
        Self {
            gamma: config.update_rule.gamma(),
            beta_shape: config.update_rule.mixup().then_some(config.beta_shape),
            target: config.target_logits,
        }
    }
}

/// Γ-weighted `KL(softmax(z) || softmax(g(x; client)))` on a mixed unlabelled batch.
///
/// Returns the batch-mean loss and its gradient w.r.t. the client parameters only.
/// The student side uses log-softmax directly so the gradient is exact; the target's
/// own `p ln p` term uses the clamped logarithm.
pub fn compensation_loss<R: Rng + ?Sized>(
    unlabelled: &Matrix,
    global: &ParamVector,
    client: &ParamVector,
    histogram: &ClassHistogram,
    options: CompensationOptions,
    rng: &mut R,
) -> Result<(f64, GradientVector)> {
    if unlabelled.rows() == 0 {
        return Ok((0.0, GradientVector::zeros(client.len())));
    }
    let classes = client.spec().num_classes();
    if histogram.classes() != classes {
        return Err(Error::Input(format!(
            "histogram has {} classes, model {classes}",
            histogram.classes()
        )));
    }
    let global_logits = nn::forward(global, unlabelled)?;
    let gamma: Vec<f64> = match options.gamma {
        GammaWeighting::Fixed => vec![1.0 / classes as f64; unlabelled.rows()],
        GammaWeighting::InverseFrequency => {
            if histogram.total() == 0 {
                return Err(Error::Input("compensation weights need a non-empty labelled pool".into()));
            }
            pseudo_labels(&global_logits)
                .into_iter()
                .map(|y| gamma_weight(y, histogram))
                .collect()
        }
    };
    let mixed = mix_batch(unlabelled, &gamma, options.beta_shape, rng)?;
    let targets = match options.target {
        TargetLogits::MixedInput => nn::forward(global, &mixed.inputs)?,
        TargetLogits::MixedLogits => {
            let mut z = Matrix::zeros(mixed.inputs.rows(), classes);
            for (j, (&(i1, i2), &b)) in mixed.pairs.iter().zip(&mixed.beta).enumerate() {
                for ((zc, a), c) in z.row_mut(j).iter_mut().zip(global_logits.row(i1)).zip(global_logits.row(i2)) {
                    *zc = b * a + (1.0 - b) * c;
                }
            }
            z
        }
    };

    let trace = nn::forward_trace(client, &mixed.inputs)?;
    let student = trace.logits();
    let n = mixed.inputs.rows() as f64;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(student.rows(), classes);
    for j in 0..student.rows() {
        let p = softmax(targets.row(j));
        let log_q = log_softmax(student.row(j));
        let w = mixed.gamma[j];
        let kl: f64 = p
            .iter()
            .zip(&log_q)
            .map(|(&pc, &lq)| pc * (clamp_prob(pc).ln() - lq))
            .sum();
        loss += w * kl;
        let mass: f64 = p.iter().sum();
        for ((d, &pc), &lq) in dlogits.row_mut(j).iter_mut().zip(&p).zip(&log_q) {
            *d = w * (lq.exp() * mass - pc) / n;
        }
    }
    Ok((loss / n, nn::backward(client, &trace, &dlogits)))
}

/// Picks `size` unlabelled ids: without replacement when the pool is large enough,
/// otherwise with replacement.
fn draw_unlabelled<R: Rng + ?Sized>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= size {
        rand::seq::index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Runs `local_epochs` passes over the client's labelled pool starting from the
/// broadcast global parameters and returns the updated client parameters.
///
/// `round` is 1-based within the current cycle; round 1 steps on the client loss
/// alone.
#[allow(clippy::too_many_arguments)]
pub fn local_update<R: Rng + ?Sized>(
    dataset: &Dataset,
    labelled: &[usize],
    unlabelled: &[usize],
    histogram: &ClassHistogram,
    global: &ParamVector,
    config: &FederationConfig,
    round: usize,
    rng: &mut R,
) -> Result<ParamVector> {
    if labelled.is_empty() {
        return Err(Error::Input("local update needs at least one labelled sample".into()));
    }
    let uniform;
    let counts = if config.balanced_loss {
        histogram.counts()
    } else {
        uniform = vec![1u64; histogram.classes()];
        &uniform
    };
    // With nu = 1 the compensation term has zero weight; skipping it keeps the rng
    // stream identical to plain balanced training.
    let compensate = config.update_rule.compensation() && round > 1 && config.nu < 1.0;
    let options = CompensationOptions::from_config(config);

    let mut params = global.clone();
    let mut order = labelled.to_vec();
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Batch = dataset.labelled_batch(chunk);
            let (_, mut grad) = nn::balanced_ce(&params, &batch, counts)?;
            if compensate {
                let ids = draw_unlabelled(unlabelled, config.batch_size, rng);
                let (_, comp) = compensation_loss(&dataset.gather(&ids), global, &params, histogram, options, rng)?;
                grad.combine(config.nu, &comp, 1.0 - config.nu);
            }
            nn::sgd_step_in_place(&mut params, &grad, config.learning_rate)?;
        }
    }
    Ok(params)
}
