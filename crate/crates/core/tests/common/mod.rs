//! Scalar brute-force references shared by the integration tests. Nothing
//! here touches the autodiff graph: every loss is a plain loop over
//! anchors, pairs and sub-parts.

#![allow(dead_code)]

use fgnce::encoders::BoundParams;
use fgnce::losses::{self, BatchPairing, FgVariant, FineLayout, LossOptions};
use fgnce::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

/// A loss instance with the standard pairing: text view `u` belongs to
/// sample `u / p`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub b: usize,
    pub p: usize,
    pub g: usize,
    pub t: usize,
    pub d_k: usize,
    /// `[B x d_e]`
    pub video: Rows,
    /// `[B*P x d_e]`
    pub text: Rows,
    /// `[B*G x d_e]`
    pub fine_video: Rows,
    /// `[B*P*T x d_e]`
    pub fine_text: Rows,
    pub wk: Rows,
    pub bk: Vec<f64>,
    pub wq: Rows,
    pub bq: Vec<f64>,
}

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn tensor(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng, b: usize, p: usize, g: usize, t: usize, d_e: usize, d_k: usize) -> Instance {
        Instance {
            b,
            p,
            g,
            t,
            d_k,
            video: rand_rows(rng, b, d_e, 1.0),
            text: rand_rows(rng, b * p, d_e, 1.0),
            fine_video: rand_rows(rng, b * g, d_e, 1.0),
            fine_text: rand_rows(rng, b * p * t, d_e, 1.0),
            wk: rand_rows(rng, d_e, d_k, 1.0),
            bk: rand_rows(rng, 1, d_k, 1.0).remove(0),
            wq: rand_rows(rng, d_e, d_k, 1.0),
            bq: rand_rows(rng, 1, d_k, 1.0).remove(0),
        }
    }

    fn owner(&self, u: usize) -> usize {
        u / self.p
    }

    /// `-Σ_t log(pos / (pos + neg))` over raw coarse dot products.
    pub fn oracle_milnce(&self) -> f64 {
        let mut total = 0.0;
        for v in 0..self.b {
            let (mut pos, mut neg) = (0.0, 0.0);
            for u in 0..self.b * self.p {
                let e = dot(&self.video[v], &self.text[u]).exp();
                if self.owner(u) == v {
                    pos += e;
                } else {
                    neg += e;
                }
            }
            total -= (pos / (pos + neg)).ln();
        }
        total
    }

    /// `a[i][j]` of the pair (video `v`, text view `u`): softmax over cells.
    pub fn oracle_attention(&self, v: usize, u: usize) -> Rows {
        let project = |x: &[f64], w: &Rows, bias: &[f64]| -> Vec<f64> {
            (0..self.d_k).map(|c| bias[c] + x.iter().enumerate().map(|(r, xr)| xr * w[r][c]).sum::<f64>()).collect()
        };
        let keys: Rows = (0..self.g).map(|i| project(&self.fine_video[v * self.g + i], &self.wk, &self.bk)).collect();
        let mut a = vec![vec![0.0; self.t]; self.g];
        for j in 0..self.t {
            let q = project(&self.fine_text[u * self.t + j], &self.wq, &self.bq);
            let logits: Vec<f64> = keys.iter().map(|k| dot(k, &q) / (self.d_k as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for i in 0..self.g {
                a[i][j] = (logits[i] - m).exp() / z;
            }
        }
        a
    }

    pub fn oracle_fg(&self, variant: FgVariant) -> f64 {
        let mut total = 0.0;
        for v in 0..self.b {
            let (mut pos, mut neg) = (0.0, 0.0);
            for u in 0..self.b * self.p {
                let positive = self.owner(u) == v;
                let a = match variant {
                    FgVariant::NoAttn => None,
                    _ => Some(self.oracle_attention(v, u)),
                };
                for i in 0..self.g {
                    for j in 0..self.t {
                        let s = dot(&self.fine_video[v * self.g + i], &self.fine_text[u * self.t + j]);
                        let x = match (variant, &a) {
                            (FgVariant::NoAttn, _) => s * s,
                            (FgVariant::NoInv, Some(a)) => a[i][j] * s,
                            (FgVariant::Full, Some(a)) if positive => a[i][j] * s,
                            (FgVariant::Full, Some(a)) => s / (1.0 + a[i][j]),
                            _ => unreachable!(),
                        };
                        if positive {
                            pos += x.exp();
                        } else {
                            neg += x.exp();
                        }
                    }
                }
            }
            total -= (pos / (pos + neg)).ln();
        }
        total
    }

    fn bind(&self, g: &mut Graph) -> BoundParams {
        let entries = vec![
            ("attn.key.w".to_string(), g.constant(tensor(&self.wk))),
            ("attn.key.b".to_string(), g.constant(tensor(&vec![self.bk.clone()]))),
            ("attn.query.w".to_string(), g.constant(tensor(&self.wq))),
            ("attn.query.b".to_string(), g.constant(tensor(&vec![self.bq.clone()]))),
        ];
        BoundParams::from_vars(entries)
    }

    pub fn pairing(&self) -> BatchPairing {
        BatchPairing::standard(self.b, self.p).unwrap()
    }

    pub fn lib_milnce(&self) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(tensor(&self.video));
        let t = g.constant(tensor(&self.text));
        let loss = losses::milnce_loss(&mut g, v, t, &self.pairing(), LossOptions::default()).unwrap();
        g.scalar(loss)
    }

    pub fn lib_fg(&self, variant: FgVariant) -> f64 {
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let fv = g.constant(tensor(&self.fine_video));
        let ft = g.constant(tensor(&self.fine_text));
        let layout = FineLayout {
            cells: self.g,
            tokens: self.t,
        };
        let loss = losses::fg_loss(&mut g, fv, ft, layout, &self.pairing(), &params, variant, LossOptions::default()).unwrap();
        g.scalar(loss)
    }

    /// Library attention of one pair as `[G x T]` rows.
    pub fn lib_attention(&self, v: usize, u: usize) -> Rows {
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let hv = g.constant(tensor(&self.fine_video[v * self.g..(v + 1) * self.g].to_vec()));
        let lu = g.constant(tensor(&self.fine_text[u * self.t..(u + 1) * self.t].to_vec()));
        let a = losses::compute_attention(&mut g, hv, lu, &params).unwrap();
        let a = g.value(a.weights);
        (0..self.g).map(|i| a.row(i).to_vec()).collect()
    }
}

pub const FG_VARIANTS: [FgVariant; 3] = [FgVariant::Full, FgVariant::NoAttn, FgVariant::NoInv];

/// Relative difference with a unit floor on the scale.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
