use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::AdamHyper;

/// Moments aligned index-for-index with the parameters they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        AdamState {
            hyper,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to the i-th parameter.
/// Nothing is modified when an error is returned.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (((name, p), g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }

    let AdamHyper { beta1, beta2, eps } = state.hyper;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> ModelParams {
        ModelParams::from_entries(vec![("w".into(), Tensor::scalar(x))]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &[Tensor::scalar(0.1)], &mut s, 1e-3).unwrap();
        let expected = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-18);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = one(0.7);
        let mut s = AdamState::new(&p, AdamHyper::default());
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_moves_by_lr_each_step() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, AdamHyper::default());
        let mut prev = 0.0;
        for _ in 0..2 {
            adam_step(&mut p, &[Tensor::scalar(-2.5)], &mut s, 1e-3).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!((now - prev - 1e-3).abs() < 1e-10);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = one(0.0);
        let mut s = AdamState::new(&p, AdamHyper::default());
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 1e-3).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 0.0).is_err());
    }
}
