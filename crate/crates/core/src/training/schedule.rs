use serde::{Deserialize, Serialize};

use super::config::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LrSchedule {
            base: cfg.lr,
            warmup_steps: cfg.warmup_steps,
            decay_epochs: cfg.decay_epochs.clone(),
            factor: cfg.decay_factor,
        }
    }
}

/// `base * min(1, step / warmup) * factor^(decay epochs <= epoch)`.
/// `epoch` is 0-based, so a decay at epoch `e` applies from the `e`-th
/// completed epoch onwards.
pub fn lr_at(step: usize, epoch: usize, s: &LrSchedule) -> f64 {
    let ramp = if step < s.warmup_steps {
        step as f64 / s.warmup_steps as f64
    } else {
        1.0
    };
    let passed = s.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    s.base * ramp * s.factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn long_schedule() -> LrSchedule {
        LrSchedule {
            base: 1e-3,
            warmup_steps: 5000,
            decay_epochs: vec![100, 200],
            factor: 0.1,
        }
    }

    #[test]
    fn warmup_and_decays() {
        let s = long_schedule();
        assert_eq!(lr_at(0, 0, &s), 0.0);
        assert!((lr_at(2500, 0, &s) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(5000, 50, &s), 1e-3);
        assert!((lr_at(90_000, 150, &s) - 1e-4).abs() < 1e-18);
        assert!((lr_at(200_000, 250, &s) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let s = LrSchedule {
            warmup_steps: 0,
            ..long_schedule()
        };
        assert_eq!(lr_at(0, 0, &s), 1e-3);
    }
}
