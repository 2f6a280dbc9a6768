//! Federated active learning: client selection, local updates with
//! knowledge-compensatory distillation, labelled-size-weighted aggregation and
//! the outer active-sampling loop.

mod aggregate;
mod kcfu;
mod simulation;

use std::fmt;
use std::str::FromStr;

pub use aggregate::{aggregate, aggregation_weights};
pub use kcfu::{compensation_loss, gamma_weight, CompensationOptions, local_update, mix_batch, pseudo_labels, MixedBatch};
pub use simulation::{evaluate, select_clients, ClientState, MetricsRecord, RunObserver, ServerState, Simulation};

use crate::error::{Error, Result};
use crate::sampling::{ScoringModel, Strategy};

/// How the per-sample distillation weight is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaWeighting {
    /// `N_k / n_{k,y'}` from the client's labelled histogram.
    #[default]
    InverseFrequency,
    /// Constant `1 / C` for every sample.
    Fixed,
}

/// Which global-model logits serve as the distillation target for a mixed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetLogits {
    /// `g(x_mixed; global)`.
    #[default]
    MixedInput,
    /// `beta g(x1; global) + (1 - beta) g(x2; global)`.
    MixedLogits,
}

/// Federated update rule presets used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// Balanced loss plus mixed, inverse-frequency-weighted compensation.
    #[default]
    Kcfu,
    /// Compensation on unmixed unlabelled samples.
    KcfuNoMix,
    /// Compensation with a constant `1/C` weight.
    FixedGamma,
    /// Balanced loss only.
    ClientOnly,
}

impl UpdateRule {
    pub const ALL: [UpdateRule; 4] = [
        UpdateRule::Kcfu,
        UpdateRule::KcfuNoMix,
        UpdateRule::FixedGamma,
        UpdateRule::ClientOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::Kcfu => "kcfu",
            UpdateRule::KcfuNoMix => "kcfu_no_mix",
            UpdateRule::FixedGamma => "fixed_gamma",
            UpdateRule::ClientOnly => "client_only",
        }
    }

    pub fn compensation(self) -> bool {
        self != UpdateRule::ClientOnly
    }

    pub fn mixup(self) -> bool {
        matches!(self, UpdateRule::Kcfu | UpdateRule::FixedGamma)
    }

    pub fn gamma(self) -> GammaWeighting {
        if self == UpdateRule::FixedGamma {
            GammaWeighting::Fixed
        } else {
            GammaWeighting::InverseFrequency
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UpdateRule::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown update rule `{s}`")))
    }
}

impl FromStr for TargetLogits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mixed_input" => Ok(TargetLogits::MixedInput),
            "mixed_logits" => Ok(TargetLogits::MixedLogits),
            other => Err(Error::Config(format!("unknown target logits mode `{other}`"))),
        }
    }
}

impl fmt::Display for TargetLogits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetLogits::MixedInput => "mixed_input",
            TargetLogits::MixedLogits => "mixed_logits",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub clients: usize,
    /// Fraction of clients selected per round.
    pub participation: f64,
    pub rounds: usize,
    /// Number of acquisition steps; training runs `cycles + 1` times.
    pub cycles: usize,
    /// Per-cycle annotation budget as a fraction of each client's partition.
    pub budget_fraction: f64,
    pub lambda: f64,
    /// Weight of the balanced client loss against the compensation loss.
    pub nu: f64,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub beta_shape: (f64, f64),
    pub seed: u64,
    pub strategy: Strategy,
    pub scoring_model: ScoringModel,
    pub update_rule: UpdateRule,
    pub target_logits: TargetLogits,
    /// When false, the client loss uses uniform counts (plain cross-entropy).
    pub balanced_loss: bool,
    /// Write elapsed wall-clock seconds into metrics; off keeps outputs reproducible.
    pub wall_clock: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            participation: 0.8,
            rounds: 50,
            cycles: 5,
            budget_fraction: 0.05,
            lambda: 1.0,
            nu: 0.5,
            learning_rate: 0.1,
            local_epochs: 40,
            batch_size: 128,
            beta_shape: (2.0, 2.0),
            seed: 0,
            strategy: Strategy::Ksas,
            scoring_model: ScoringModel::Client,
            update_rule: UpdateRule::Kcfu,
            target_logits: TargetLogits::MixedInput,
            balanced_loss: true,
            wall_clock: false,
        }
    }
}

impl FederationConfig {
    /// `ceil(R * K)`, guarded against representation error in `R`.
    pub fn clients_per_round(&self) -> usize {
        ((self.participation * self.clients as f64) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return fail("need at least one client".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation must be in (0, 1], got {}", self.participation));
        }
        if self.clients_per_round() > self.clients {
            return fail("more clients per round than clients".into());
        }
        if self.rounds == 0 {
            return fail("need at least one communication round".into());
        }
        if !(0.0..1.0).contains(&self.budget_fraction) {
            return fail(format!("budget fraction must be in [0, 1), got {}", self.budget_fraction));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.nu) {
            return fail(format!("nu must be in [0, 1], got {}", self.nu));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        let (a, b) = self.beta_shape;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return fail(format!("Beta shapes must be > 0, got ({a}, {b})"));
        }
        Ok(())
    }
}
