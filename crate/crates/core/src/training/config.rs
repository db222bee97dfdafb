use serde::{Deserialize, Serialize};

use crate::encoders::{ModelConfig, TextPool};
use crate::error::{Error, Result};
use crate::losses::{FgVariant, DEFAULT_BETA, DEFAULT_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    MilnceOnly,
    FgFull,
    FgNoAttn,
    FgNoInv,
}

impl LossVariant {
    /// Ablation order, weakest expected first.
    pub const ALL: [LossVariant; 4] = [
        LossVariant::MilnceOnly,
        LossVariant::FgNoAttn,
        LossVariant::FgNoInv,
        LossVariant::FgFull,
    ];

    pub fn fine(self) -> Option<FgVariant> {
        match self {
            LossVariant::MilnceOnly => None,
            LossVariant::FgFull => Some(FgVariant::Full),
            LossVariant::FgNoAttn => Some(FgVariant::NoAttn),
            LossVariant::FgNoInv => Some(FgVariant::NoInv),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::MilnceOnly => "milnce_only",
            LossVariant::FgFull => "fg_full",
            LossVariant::FgNoAttn => "fg_no_attn",
            LossVariant::FgNoInv => "fg_no_inv",
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}` (expected milnce_only|fg_full|fg_no_attn|fg_no_inv)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy|paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub variant: LossVariant,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Epochs (strictly increasing) at which the LR is multiplied by
    /// `decay_factor`; empty disables decay.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Positive text views per sample.
    pub views: usize,
    pub temperature: f64,
    pub mean_over_batch: bool,
    /// Lets a batch contain samples that mention the same concept.
    pub allow_overlap: bool,
    /// Optimizer steps per epoch; 0 means `train_size / batch_size`.
    pub steps_per_epoch: usize,
    /// Probe accuracy is computed every this many epochs and at the last one.
    pub probe_every: usize,
    pub adam: AdamHyper,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> TrainConfig {
        match preset {
            Preset::Toy => TrainConfig::default(),
            Preset::Paper => {
                let mut c = TrainConfig {
                    batch_size: 256,
                    epochs: 300,
                    beta: DEFAULT_BETA,
                    warmup_steps: 5000,
                    decay_epochs: vec![100, 200],
                    ..TrainConfig::default()
                };
                c.model.d_e = 512;
                c
            }
        }
    }

    /// Decay epochs at one and two thirds of `epochs`.
    pub fn thirds(epochs: usize) -> Vec<usize> {
        let (a, b) = (epochs / 3, 2 * epochs / 3);
        if a == 0 || a >= b {
            Vec::new()
        } else {
            vec![a, b]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return Err(Error::NoNegatives(self.batch_size));
        }
        if self.views == 0 {
            return bad("views must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("beta and gamma must be non-negative, got {} and {}", self.beta, self.gamma));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay_epochs must be strictly increasing, got {:?}", self.decay_epochs));
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last > self.epochs {
                return bad(format!("decay epoch {last} exceeds epochs = {}", self.epochs));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.probe_every == 0 {
            return bad("probe_every must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam hyper-parameters {a:?}"));
        }
        self.model.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            epochs: 60,
            variant: LossVariant::FgFull,
            beta: TOY_BETA,
            gamma: DEFAULT_GAMMA,
            lr: 1e-3,
            warmup_steps: 200,
            decay_epochs: TrainConfig::thirds(60),
            decay_factor: 0.1,
            views: 1,
            temperature: 1.0,
            mean_over_batch: false,
            allow_overlap: false,
            steps_per_epoch: 0,
            probe_every: 10,
            adam: AdamHyper::default(),
            model: ModelConfig {
                text_pool: TextPool::Max,
                ..ModelConfig::default()
            },
        }
    }
}

/// Fine-loss weight of the toy preset.
pub const TOY_BETA: f64 = DEFAULT_BETA;
