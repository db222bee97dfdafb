//! Retrieval, alignment and probe metrics plus the two pooling diagnostics.

use serde::{Deserialize, Serialize};

use crate::encoders::{self, BoundParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{self, BatchPairing, FgVariant, FineLayout, LossOptions};
use crate::synthdata::SynthSample;
use crate::tensor::{Graph, ReduceMode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `(K, recall@K)` in the order requested.
    pub recalls: Vec<(usize, f64)>,
    pub median_rank: f64,
}

impl RetrievalReport {
    pub fn r_at(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// 1-based rank of the true gallery item for every query.
///
/// Query `q` matches gallery item `q`; ties are broken toward the smaller
/// gallery index.
pub fn retrieval_ranks(queries: &Tensor, gallery: &Tensor, sim: Similarity) -> Result<Vec<usize>> {
    if queries.rank() != 2 || gallery.rank() != 2 || queries.cols() != gallery.cols() || gallery.rows() < queries.rows() {
        return Err(Error::ShapeMismatch {
            op: "retrieval",
            lhs: queries.shape().to_vec(),
            rhs: gallery.shape().to_vec(),
        });
    }
    let score = |q: &[f64], v: &[f64]| match sim {
        Similarity::Dot => dot(q, v),
        Similarity::Cosine => dot(q, v) / (norm(q) * norm(v)).max(f64::MIN_POSITIVE),
    };
    Ok((0..queries.rows())
        .map(|q| {
            let query = queries.row(q);
            let target = score(query, gallery.row(q));
            1 + (0..gallery.rows())
                .filter(|&g| {
                    let s = score(query, gallery.row(g));
                    s > target || (s == target && g < q)
                })
                .count()
        })
        .collect())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn report_from_ranks(ranks: &[usize], gallery: usize, ks: &[usize]) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::Undefined("retrieval over zero queries".into()));
    }
    let mut recalls = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || gallery < k {
            return Err(Error::Config(format!("R@{k} needs at least {k} gallery items, have {gallery}")));
        }
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        recalls.push((k, hits as f64 / ranks.len() as f64));
    }
    let mut r: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    Ok(RetrievalReport {
        recalls,
        median_rank: median(&mut r),
    })
}

/// Text-to-video retrieval by unnormalised dot product.
pub fn retrieval_metrics(text: &Tensor, video: &Tensor, ks: &[usize]) -> Result<RetrievalReport> {
    retrieval_metrics_with(text, video, ks, Similarity::Dot)
}

pub fn retrieval_metrics_with(text: &Tensor, video: &Tensor, ks: &[usize], sim: Similarity) -> Result<RetrievalReport> {
    let ranks = retrieval_ranks(text, video, sim)?;
    report_from_ranks(&ranks, video.rows(), ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `None` when no token has a corresponding cell.
    pub precision: Option<f64>,
    pub hits: usize,
    pub evaluated: usize,
    /// `1 / G`
    pub chance: f64,
}

/// Fraction of correlated tokens whose attention argmax (first on ties)
/// lands on a corresponding cell. `attention` is `[G x T]`.
pub fn alignment_precision(attention: &Tensor, correspondence: &[Vec<bool>]) -> Result<AlignmentReport> {
    let (g, t) = (attention.rows(), attention.cols());
    if attention.rank() != 2 || correspondence.len() != g || correspondence.iter().any(|r| r.len() != t) {
        return Err(Error::ShapeMismatch {
            op: "alignment_precision",
            lhs: attention.shape().to_vec(),
            rhs: vec![correspondence.len(), correspondence.first().map_or(0, Vec::len)],
        });
    }
    let (mut hits, mut evaluated) = (0, 0);
    for j in 0..t {
        if !(0..g).any(|i| correspondence[i][j]) {
            continue;
        }
        evaluated += 1;
        let mut best = 0;
        for i in 1..g {
            if attention.at2(i, j) > attention.at2(best, j) {
                best = i;
            }
        }
        if correspondence[best][j] {
            hits += 1;
        }
    }
    Ok(AlignmentReport {
        precision: (evaluated > 0).then(|| hits as f64 / evaluated as f64),
        hits,
        evaluated,
        chance: 1.0 / g as f64,
    })
}

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 0.1;

/// Multinomial logistic regression on standardised frozen features, fixed
/// at [`PROBE_STEPS`] full-batch gradient steps of size [`PROBE_LR`] from a
/// zero start. Returns held-out accuracy.
pub fn linear_probe(train_x: &Tensor, train_y: &[usize], test_x: &Tensor, test_y: &[usize]) -> Result<f64> {
    let (n, d) = (train_x.rows(), train_x.cols());
    if train_y.len() != n || test_y.len() != test_x.rows() || test_x.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            lhs: train_x.shape().to_vec(),
            rhs: test_x.shape().to_vec(),
        });
    }
    let mut distinct: Vec<usize> = train_y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("linear probe needs at least two classes in the training split".into()));
    }
    if test_y.is_empty() {
        return Err(Error::Undefined("linear probe over an empty test split".into()));
    }
    let classes = train_y.iter().chain(test_y).max().expect("non-empty") + 1;

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(train_x.row(i)) {
            *m += x / n as f64;
        }
    }
    for i in 0..n {
        for (k, x) in train_x.row(i).iter().enumerate() {
            sd[k] += (x - mean[k]).powi(2) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardise = |x: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| x.row(i).iter().enumerate().map(|(k, v)| (v - mean[k]) / sd[k]).collect())
            .collect()
    };
    let xs = standardise(train_x);

    // weights[c][k], bias[c]
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(train_y) {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                probs[c] = b[c] + dot(&w[c], x);
                max = max.max(probs[c]);
            }
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            for c in 0..classes {
                let err = probs[c] / z - f64::from(u8::from(c == y));
                gb[c] += err;
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += err * xi;
                }
            }
        }
        for c in 0..classes {
            b[c] -= PROBE_LR * gb[c] / n as f64;
            for (wi, gi) in w[c].iter_mut().zip(&gw[c]) {
                *wi -= PROBE_LR * gi / n as f64;
            }
        }
    }

    let correct = standardise(test_x)
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let scores: Vec<f64> = (0..classes).map(|c| b[c] + dot(&w[c], x)).collect();
            let mut best = 0;
            for c in 1..classes {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientAttribution {
    /// `||dL/dh_i||` for every cell of the anchor video.
    pub cell_norms: Vec<f64>,
    /// Largest L-infinity distance between any two per-cell gradients.
    pub uniformity: f64,
}

pub fn gradient_uniformity(grad: &Tensor) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..grad.rows() {
        for b in a + 1..grad.rows() {
            let d = grad.row(a).iter().zip(grad.row(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    worst
}

/// Per-cell gradients of a contrastive loss with respect to the video
/// feature map of `samples[anchor]`, with the other samples as negatives.
/// `fine` selects the fine-grained objective instead of the coarse one.
pub fn coarse_gradient_attribution(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[&SynthSample],
    anchor: usize,
    fine: Option<FgVariant>,
) -> Result<GradientAttribution> {
    let b = samples.len();
    let pairing = BatchPairing::standard(b, 1)?;
    if anchor >= b {
        return Err(Error::Config(format!("anchor {anchor} outside batch of {b}")));
    }
    let cells = samples[0].cells();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let raw = stack_cells(samples)?;
    let raw = g.constant(raw);
    let h = encoders::encode_video(&mut g, raw, b, &bound)?;
    // Differentiate with respect to the feature map itself.
    let h_leaf = g.leaf(g.value(h.values).clone());
    let h = encoders::FeatureMap { values: h_leaf, ..h };
    let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let l = encoders::encode_text(&mut g, &seqs, &bound, cfg.contextual)?;
    let loss = match fine {
        None => {
            let v = encoders::pool_avg_project(&mut g, &h, &bound, cfg.normalize)?;
            let t = encoders::pool_text(&mut g, &l, cfg.text_pool, &bound, cfg.normalize)?;
            losses::milnce_loss(&mut g, v, t, &pairing, LossOptions::default())?
        }
        Some(variant) => {
            let hf = encoders::project_fine(&mut g, h.values, encoders::Modality::Video, &bound, cfg.normalize)?;
            let lf = encoders::project_fine(&mut g, l.values, encoders::Modality::Text, &bound, cfg.normalize)?;
            let layout = FineLayout {
                cells,
                tokens: l.tokens,
            };
            losses::fg_loss(&mut g, hf, lf, layout, &pairing, &bound, variant, LossOptions::default())?
        }
    };
    g.backward(loss)?;
    let grad = g.grad(h_leaf).expect("leaf grad");
    let grad = grad.row_block(anchor * cells, cells);
    Ok(GradientAttribution {
        cell_norms: (0..cells).map(|i| norm(grad.row(i))).collect(),
        uniformity: gradient_uniformity(&grad),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxPoolAttribution {
    /// Per-dimension max over tokens: the positive vertex of the tight
    /// bounding box of the token vectors.
    pub pooled: Vec<f64>,
    /// Winning token per dimension (first on ties).
    pub sources: Vec<usize>,
    /// Fraction of dimensions whose winner is an uncorrelated token.
    pub noise_fraction: f64,
}

/// Attributes every max-pooled dimension of `reps[T x d]` to its source token.
pub fn maxpool_attribution(reps: &Tensor, token_correlated: &[bool]) -> Result<MaxPoolAttribution> {
    if reps.rank() != 2 || reps.rows() != token_correlated.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool_attribution",
            lhs: reps.shape().to_vec(),
            rhs: vec![token_correlated.len()],
        });
    }
    let mut g = Graph::new();
    let x = g.constant(reps.clone());
    let (pooled, sources) = g.reduce(x, 0, ReduceMode::Max)?;
    let sources = sources.expect("max reduce reports sources");
    let noisy = sources.iter().filter(|&&s| !token_correlated[s]).count();
    Ok(MaxPoolAttribution {
        pooled: g.value(pooled).data().to_vec(),
        noise_fraction: noisy as f64 / sources.len() as f64,
        sources,
    })
}

/// `[n*G x d_raw]` stack of the samples' raw cells.
pub fn stack_cells(samples: &[&SynthSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Config("empty sample set".into()))?;
    let (g, d) = (first.raw_cells.rows(), first.raw_cells.cols());
    let mut data = Vec::with_capacity(samples.len() * g * d);
    for s in samples {
        if s.raw_cells.shape() != [g, d] {
            return Err(Error::ShapeMismatch {
                op: "stack_cells",
                lhs: vec![g, d],
                rhs: s.raw_cells.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.raw_cells.data());
    }
    Tensor::new(&[samples.len() * g, d], data)
}

/// Frozen embeddings of a sample set.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub video: Tensor,
    pub text: Tensor,
    /// Cross-modal attention of each sample's own (video, text) pair.
    pub attention: Vec<Tensor>,
}

/// Encodes `samples` in chunks; attention only when `with_attention`.
pub fn embed_samples(
    params: &ModelParams,
    cfg: &ModelConfig,
    samples: &[SynthSample],
    with_attention: bool,
) -> Result<Embeddings> {
    const CHUNK: usize = 256;
    let mut video = Vec::new();
    let mut text = Vec::new();
    let mut attention = Vec::new();
    let d_e = cfg.d_e;
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let raw = g.constant(stack_cells(&refs)?);
        let h = encoders::encode_video(&mut g, raw, chunk.len(), &bound)?;
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|s| s.tokens.clone()).collect();
        let l = encoders::encode_text(&mut g, &seqs, &bound, cfg.contextual)?;
        let v = encoders::pool_avg_project(&mut g, &h, &bound, cfg.normalize)?;
        let t = encoders::pool_text(&mut g, &l, cfg.text_pool, &bound, cfg.normalize)?;
        video.extend_from_slice(g.value(v).data());
        text.extend_from_slice(g.value(t).data());
        if with_attention {
            let hf = encoders::project_fine(&mut g, h.values, encoders::Modality::Video, &bound, cfg.normalize)?;
            let lf = encoders::project_fine(&mut g, l.values, encoders::Modality::Text, &bound, cfg.normalize)?;
            for (k, _) in chunk.iter().enumerate() {
                attention.push(pair_attention(&mut g, &bound, hf, lf, k, &h, &l)?);
            }
        }
    }
    Ok(Embeddings {
        video: Tensor::new(&[samples.len(), d_e], video)?,
        text: Tensor::new(&[samples.len(), d_e], text)?,
        attention,
    })
}

fn pair_attention(
    g: &mut Graph,
    bound: &BoundParams,
    hf: crate::tensor::Var,
    lf: crate::tensor::Var,
    k: usize,
    h: &encoders::FeatureMap,
    l: &encoders::TokenReps,
) -> Result<Tensor> {
    let cells: Vec<usize> = (k * h.cells..(k + 1) * h.cells).collect();
    let toks: Vec<usize> = (k * l.tokens..(k + 1) * l.tokens).collect();
    let hk = g.index_select(hf, 0, &cells)?;
    let lk = g.index_select(lf, 0, &toks)?;
    let a = losses::compute_attention(g, hk, lk, bound)?;
    Ok(g.value(a.weights).clone())
}

/// Mean alignment precision over samples where it is defined.
pub fn mean_alignment(attention: &[Tensor], samples: &[SynthSample]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for (a, s) in attention.iter().zip(samples) {
        if let Some(p) = alignment_precision(a, &s.correspondence)?.precision {
            sum += p;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_retrieval() {
        let q = Tensor::eye(10);
        let r = retrieval_metrics(&q, &q, &[1, 5, 10]).unwrap();
        assert_eq!(r.r_at(1), Some(1.0));
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn reversed_retrieval() {
        // Query q scores gallery g at -(q == g): the match is strictly lowest.
        let q = Tensor::eye(10);
        let mut gal = Tensor::full(&[10, 10], 0.0);
        for i in 0..10 {
            gal.data_mut()[i * 10 + i] = -1.0;
        }
        let r = retrieval_metrics(&q, &gal, &[1, 5, 10]).unwrap();
        assert_eq!(r.r_at(1), Some(0.0));
        assert_eq!(r.r_at(10), Some(1.0));
        assert_eq!(r.median_rank, 10.0);
    }

    #[test]
    fn hand_ranked_retrieval() {
        // Ranks 1, 2 and 5 over a 5-item gallery of scalars.
        let q = t(&[&[1.0], &[-1.0], &[1.0]]);
        let gal = t(&[&[9.0], &[5.0], &[1.0], &[6.0], &[7.0]]);
        assert_eq!(retrieval_ranks(&q, &gal, Similarity::Dot).unwrap(), vec![1, 2, 5]);
        let r = retrieval_metrics(&q, &gal, &[1, 5]).unwrap();
        assert!((r.r_at(1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.r_at(5), Some(1.0));
        assert_eq!(r.median_rank, 2.0);
        assert!(retrieval_metrics(&q, &gal, &[10]).is_err());
    }

    #[test]
    fn ties_break_toward_smaller_index() {
        let q = t(&[&[1.0], &[1.0]]);
        let gal = t(&[&[2.0], &[2.0]]);
        assert_eq!(retrieval_ranks(&q, &gal, Similarity::Dot).unwrap(), vec![1, 2]);
    }

    #[test]
    fn even_median_averages() {
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn alignment_examples() {
        let m = vec![vec![true, false], vec![false, false], vec![false, true]];
        let a = t(&[&[0.8, 0.1], &[0.1, 0.1], &[0.1, 0.8]]);
        assert_eq!(alignment_precision(&a, &m).unwrap().precision, Some(1.0));

        let uniform = Tensor::full(&[3, 1], 1.0 / 3.0);
        let first = vec![vec![true], vec![false], vec![false]];
        assert_eq!(alignment_precision(&uniform, &first).unwrap().precision, Some(1.0));
        let later = vec![vec![false], vec![true], vec![false]];
        assert_eq!(alignment_precision(&uniform, &later).unwrap().precision, Some(0.0));

        let filler = vec![vec![false, false]; 3];
        let r = alignment_precision(&a, &filler).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.evaluated, 0);
        assert!((r.chance - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn probe_separable_and_uninformative() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let onehot = |ls: &[usize]| {
            Tensor::from_rows(&ls.iter().map(|&l| (0..3).map(|c| f64::from(u8::from(c == l))).collect()).collect::<Vec<_>>()).unwrap()
        };
        let x = onehot(&labels);
        assert_eq!(linear_probe(&x, &labels, &x, &labels).unwrap(), 1.0);

        let skewed: Vec<usize> = (0..60).map(|i| usize::from(i % 4 == 0)).collect();
        let c = Tensor::full(&[60, 3], 0.5);
        let acc = linear_probe(&c, &skewed, &c, &skewed).unwrap();
        assert!((acc - 0.75).abs() < 1e-12, "{acc}");

        assert!(linear_probe(&c, &[0; 60], &c, &[0; 60]).is_err());
    }

    #[test]
    fn maxpool_attribution_examples() {
        let reps = t(&[&[5.0, 6.0, 7.0], &[1.0, 2.0, 3.0]]);
        let r = maxpool_attribution(&reps, &[true, false]).unwrap();
        assert_eq!(r.noise_fraction, 0.0);
        assert_eq!(r.pooled, vec![5.0, 6.0, 7.0]);

        let reps = t(&[&[5.0, 0.0, 7.0, 1.0], &[1.0, 2.0, 3.0, 4.0]]);
        let r = maxpool_attribution(&reps, &[true, false]).unwrap();
        assert_eq!(r.noise_fraction, 0.5);
        assert_eq!(r.sources, vec![0, 1, 0, 1]);
        assert_eq!(r.pooled, vec![5.0, 2.0, 7.0, 4.0]);
    }

    #[test]
    fn uniformity_of_identical_rows_is_zero() {
        let g = t(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(gradient_uniformity(&g), 0.0);
        let g = t(&[&[1.0, 2.0], &[1.5, 2.0]]);
        assert_eq!(gradient_uniformity(&g), 0.5);
        assert_eq!(gradient_uniformity(&t(&[&[3.0]])), 0.0);
    }
}
