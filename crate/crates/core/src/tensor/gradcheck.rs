//! Central finite-difference verification of `Graph::backward`.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Relative-error floor for coordinates where both gradients vanish.
const REL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    ThreePoint,
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`
    FivePoint,
    /// `(45 d1 - 9 d2 + d3) / 60h` with `dk = f(x+kh) - f(x-kh)`
    SevenPoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate at which `max_rel_err` occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares `backward` against the three-point central difference of `f` at
/// `point`. `f` builds a scalar from the leaf it is handed.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with(f, point, eps, Stencil::ThreePoint)
}

pub fn finite_diff_check_with<F>(f: F, point: &Tensor, eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let y0 = g.scalar(y);
    if !y0.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf requires grad").into_data();

    let eval = |shifted: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(shifted.clone());
        let y = f(&mut g, x)?;
        let v = g.scalar(y);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradcheck objective".into()))
        }
    };

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let x0 = point.data()[i];
        let mut at = |delta: f64| -> Result<f64> {
            probe.data_mut()[i] = x0 + delta;
            eval(&probe)
        };
        let d = match stencil {
            Stencil::ThreePoint => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::FivePoint => {
                let near = at(eps)? - at(-eps)?;
                let far = at(2.0 * eps)? - at(-2.0 * eps)?;
                (8.0 * near - far) / (12.0 * eps)
            }
            Stencil::SevenPoint => {
                let d1 = at(eps)? - at(-eps)?;
                let d2 = at(2.0 * eps)? - at(-2.0 * eps)?;
                let d3 = at(3.0 * eps)? - at(-3.0 * eps)?;
                (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * eps)
            }
        };
        probe.data_mut()[i] = x0;
        numeric.push(d);
    }

    let mut max_rel_err = 0.0;
    let mut max_abs_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_FLOOR);
        max_abs_err = max_abs_err.max(abs);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let r = finite_diff_check(|g, x| g.mul(x, x), &Tensor::scalar(1.0), 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn constant_passes_through_floor() {
        let r = finite_diff_check(
            |g, x| {
                let z = g.scale(x, 0.0);
                let s = g.sum_all(z)?;
                Ok(g.offset(s, 3.0))
            },
            &Tensor::vector(vec![0.3, -1.2]),
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn unused_coordinate_is_exactly_zero() {
        let f = |g: &mut Graph, x: Var| {
            let first = g.index_select(x, 0, &[0])?;
            let e = g.exp(first);
            g.sum_all(e)
        };
        let point = Tensor::vector(vec![0.3, 1.7]);
        for stencil in [Stencil::ThreePoint, Stencil::FivePoint, Stencil::SevenPoint] {
            let r = finite_diff_check_with(f, &point, 1e-4, stencil).unwrap();
            assert_eq!(r.numeric[1], 0.0);
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff_check(
            |g, x| {
                let l = g.log(x);
                g.sum_all(l)
            },
            &Tensor::vector(vec![-1.0]),
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(finite_diff_check(|g, x| g.sum_all(x), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
