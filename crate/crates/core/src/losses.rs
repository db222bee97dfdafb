//! Contrastive objectives.
//!
//! Both the coarse and the fine-grained loss reduce to the same shape: every
//! (video, text view) pair of the batch gets one log-score `w[v, u]`, and for
//! each anchor sample `t` the loss adds
//! `logsumexp(w over P_t ∪ N_t) - logsumexp(w over P_t)`, i.e.
//! `-log(pos / (pos + neg))`. For the coarse loss `w` is the raw dot product;
//! for the fine loss it is the log of the sub-pair exponential sum of the pair.

use serde::{Deserialize, Serialize};

use crate::encoders::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ReduceMode, Tensor, Var};

/// Positive and negative (video, text view) pairs for each anchor sample.
///
/// Text view `u` belongs to sample `u / views`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPairing {
    batch_size: usize,
    views: usize,
    positives: Vec<Vec<(usize, usize)>>,
    negatives: Vec<Vec<(usize, usize)>>,
}

impl BatchPairing {
    /// Anchor `t` is video `t`: its positives are its own `views` texts and
    /// its negatives are every text view of the other samples.
    pub fn standard(batch_size: usize, views: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::NoNegatives(batch_size));
        }
        if views == 0 {
            return Err(Error::InvalidPairing("need at least one text view per sample".into()));
        }
        let positives = (0..batch_size)
            .map(|t| (0..views).map(|p| (t, t * views + p)).collect())
            .collect();
        let negatives = (0..batch_size)
            .map(|t| {
                (0..batch_size * views)
                    .filter(|u| u / views != t)
                    .map(|u| (t, u))
                    .collect()
            })
            .collect();
        Ok(BatchPairing {
            batch_size,
            views,
            positives,
            negatives,
        })
    }

    pub fn new(
        batch_size: usize,
        views: usize,
        positives: Vec<Vec<(usize, usize)>>,
        negatives: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::NoNegatives(batch_size));
        }
        if views == 0 {
            return Err(Error::InvalidPairing("need at least one text view per sample".into()));
        }
        if positives.len() != batch_size || negatives.len() != batch_size {
            return Err(Error::InvalidPairing(format!(
                "expected {batch_size} anchors, got {} positive and {} negative sets",
                positives.len(),
                negatives.len()
            )));
        }
        let texts = batch_size * views;
        for t in 0..batch_size {
            if positives[t].is_empty() {
                return Err(Error::InvalidPairing(format!("sample {t} has no positive pair")));
            }
            for &(v, u) in &positives[t] {
                if v != t || u >= texts || u / views != t {
                    return Err(Error::InvalidPairing(format!(
                        "positive ({v}, {u}) of sample {t} must pair its own video and text"
                    )));
                }
            }
            for &(v, u) in &negatives[t] {
                if v >= batch_size || u >= texts || u / views == v {
                    return Err(Error::InvalidPairing(format!(
                        "negative ({v}, {u}) of sample {t} does not cross samples"
                    )));
                }
            }
            let mut all: Vec<_> = positives[t].iter().chain(&negatives[t]).collect();
            all.sort();
            if all.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidPairing(format!("sample {t} lists a pair twice")));
            }
        }
        Ok(BatchPairing {
            batch_size,
            views,
            positives,
            negatives,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn texts(&self) -> usize {
        self.batch_size * self.views
    }

    pub fn positives(&self, t: usize) -> &[(usize, usize)] {
        &self.positives[t]
    }

    pub fn negatives(&self, t: usize) -> &[(usize, usize)] {
        &self.negatives[t]
    }

    pub fn positive_count(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgVariant {
    /// Positives `a * s`, negatives `s / (1 + a)`.
    Full,
    /// Every exponent is `s^2`; no attention.
    NoAttn,
    /// Positives and negatives both `a * s`.
    NoInv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Similarities are divided by this before exponentiation.
    pub temperature: f64,
    /// Average over anchors instead of summing.
    pub mean_over_batch: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            temperature: 1.0,
            mean_over_batch: false,
        }
    }
}

/// `-Σ_t log(Σ_P e^w / (Σ_P e^w + Σ_N e^w))` for pair log-scores `w[B x B*P]`.
pub fn nce_from_pair_logits(g: &mut Graph, w: Var, pairing: &BatchPairing, mean: bool) -> Result<Var> {
    let (b, texts) = (pairing.batch_size(), pairing.texts());
    if g.shape(w) != [b, texts] {
        return Err(Error::ShapeMismatch {
            op: "nce",
            lhs: g.shape(w).to_vec(),
            rhs: vec![b, texts],
        });
    }
    let n = b * texts;
    let flat = g.reshape(w, &[1, n])?;
    let pos_sets: Vec<Vec<(usize, usize)>> = (0..b).map(|t| pairing.positives(t).to_vec()).collect();
    let all_sets: Vec<Vec<(usize, usize)>> = (0..b)
        .map(|t| pairing.positives(t).iter().chain(pairing.negatives(t)).copied().collect())
        .collect();
    let lse_all = masked_logsumexp(g, flat, &all_sets, texts)?;
    let lse_pos = masked_logsumexp(g, flat, &pos_sets, texts)?;
    let diff = g.sub(lse_all, lse_pos)?;
    let total = g.sum_all(diff)?;
    Ok(if mean { g.scale(total, 1.0 / b as f64) } else { total })
}

/// Row `t` of the result is `logsumexp` of the entries of `flat[1 x N]`
/// selected by `sets[t]`, shifted by the row max for stability.
fn masked_logsumexp(g: &mut Graph, flat: Var, sets: &[Vec<(usize, usize)>], texts: usize) -> Result<Var> {
    let values = g.value(flat).data().to_vec();
    let n = values.len();
    let rows = sets.len();
    let mut mask = vec![0.0; rows * n];
    // Unselected entries are shifted by their own value so exp() stays at 1
    // before masking.
    let mut shift = Vec::with_capacity(rows * n);
    let mut maxes = Vec::with_capacity(rows);
    for (t, set) in sets.iter().enumerate() {
        let mut m = f64::NEG_INFINITY;
        for &(v, u) in set {
            let k = v * texts + u;
            mask[t * n + k] = 1.0;
            m = m.max(values[k]);
        }
        maxes.push(m);
        for k in 0..n {
            shift.push(if mask[t * n + k] == 1.0 { m } else { values[k] });
        }
    }
    let shift = g.constant(Tensor::new(&[rows, n], shift)?);
    let mask = g.constant(Tensor::new(&[rows, n], mask)?);
    let maxes = g.constant(Tensor::new(&[rows, 1], maxes)?);
    let centered = g.sub(flat, shift)?;
    let e = g.exp(centered);
    let e = g.mul(e, mask)?;
    let (s, _) = g.reduce(e, 1, ReduceMode::Sum)?;
    let l = g.log(s);
    g.add(l, maxes)
}

/// Coarse MIL-NCE over raw dot products of `video[B x d_e]` and
/// `text[B*P x d_e]`.
pub fn milnce_loss(g: &mut Graph, video: Var, text: Var, pairing: &BatchPairing, opts: LossOptions) -> Result<Var> {
    let (sv, st) = (g.shape(video).to_vec(), g.shape(text).to_vec());
    if sv.len() != 2 || st.len() != 2 || sv[1] != st[1] || sv[0] != pairing.batch_size() || st[0] != pairing.texts() {
        return Err(Error::ShapeMismatch {
            op: "milnce_loss",
            lhs: sv,
            rhs: st,
        });
    }
    let tt = g.transpose(text)?;
    let mut sims = g.matmul(video, tt)?;
    if opts.temperature != 1.0 {
        sims = g.scale(sims, 1.0 / opts.temperature);
    }
    nce_from_pair_logits(g, sims, pairing, opts.mean_over_batch)
}

/// Cross-modal attention weights: `a[i, j] = softmax_i(k_i · q_j / sqrt(d_k))`
/// with keys from video sub-parts and queries from text sub-parts.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMatrix {
    /// `[G x T]` for one pair, or `[B*G x B*P*T]` for a batch grid.
    pub weights: Var,
    pub d_k: usize,
}

/// Attention for every (video, text view) pair of a batch at once. Returns a
/// `[videos*G x texts*T]` grid whose `(v, u)` block is the `G x T` attention
/// of that pair; each block column sums to one.
pub fn attention_grid(
    g: &mut Graph,
    fine_video: Var,
    fine_text: Var,
    videos: usize,
    cells: usize,
    p: &BoundParams,
) -> Result<AttentionMatrix> {
    let wk = p.var("attn.key.w")?;
    let d_k = g.shape(wk)[1];
    if d_k == 0 {
        return Err(Error::Config("attention width d_k must be positive".into()));
    }
    let keys = crate::encoders::linear(g, fine_video, wk, p.var("attn.key.b")?)?;
    let queries = crate::encoders::linear(g, fine_text, p.var("attn.query.w")?, p.var("attn.query.b")?)?;
    let qt = g.transpose(queries)?;
    let logits = g.matmul(keys, qt)?;
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let cols = g.shape(logits)[1];
    let cube = g.reshape(logits, &[videos, cells, cols])?;
    let a = g.softmax(cube, 1)?;
    let weights = g.reshape(a, &[videos * cells, cols])?;
    Ok(AttentionMatrix { weights, d_k })
}

/// Attention of a single pair: `h_fine[G x d_e]`, `l_fine[T x d_e]`.
pub fn compute_attention(g: &mut Graph, h_fine: Var, l_fine: Var, p: &BoundParams) -> Result<AttentionMatrix> {
    let cells = g.shape(h_fine)[0];
    attention_grid(g, h_fine, l_fine, 1, cells, p)
}

/// Sub-part layout of the stacked fine embeddings passed to [`fg_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FineLayout {
    pub cells: usize,
    pub tokens: usize,
}

/// Fine-grained loss over stacked fine embeddings `fine_video[B*G x d_e]`
/// and `fine_text[B*P*T x d_e]`. Every pair, positive or negative, gets its
/// attention from its own sub-parts.
pub fn fg_loss(
    g: &mut Graph,
    fine_video: Var,
    fine_text: Var,
    layout: FineLayout,
    pairing: &BatchPairing,
    p: &BoundParams,
    variant: FgVariant,
    opts: LossOptions,
) -> Result<Var> {
    let FineLayout { cells, tokens } = layout;
    let (b, texts) = (pairing.batch_size(), pairing.texts());
    if cells == 0 || tokens == 0 {
        return Err(Error::InvalidShape {
            shape: vec![cells, tokens],
            reason: "empty sub-part set".into(),
        });
    }
    let (sv, st) = (g.shape(fine_video).to_vec(), g.shape(fine_text).to_vec());
    if sv.len() != 2 || st.len() != 2 || sv[0] != b * cells || st[0] != texts * tokens || sv[1] != st[1] {
        return Err(Error::ShapeMismatch {
            op: "fg_loss",
            lhs: sv,
            rhs: st,
        });
    }
    let (rows, cols) = (b * cells, texts * tokens);
    let views = pairing.views();

    let tt = g.transpose(fine_text)?;
    let mut sims = g.matmul(fine_video, tt)?;
    if opts.temperature != 1.0 {
        sims = g.scale(sims, 1.0 / opts.temperature);
    }

    let exponent = match variant {
        FgVariant::NoAttn => g.mul(sims, sims)?,
        FgVariant::NoInv => {
            let a = attention_grid(g, fine_video, fine_text, b, cells, p)?.weights;
            g.mul(a, sims)?
        }
        FgVariant::Full => {
            let a = attention_grid(g, fine_video, fine_text, b, cells, p)?.weights;
            let mut pos = vec![0.0; rows * cols];
            for r in 0..rows {
                let v = r / cells;
                for c in 0..cols {
                    if c / tokens / views == v {
                        pos[r * cols + c] = 1.0;
                    }
                }
            }
            let neg: Vec<f64> = pos.iter().map(|x| 1.0 - x).collect();
            let pos = g.constant(Tensor::new(&[rows, cols], pos)?);
            let neg = g.constant(Tensor::new(&[rows, cols], neg)?);
            let scaled = g.mul(a, sims)?;
            let one_plus = g.offset(a, 1.0);
            let damped = g.div(sims, one_plus)?;
            let pos_part = g.mul(scaled, pos)?;
            let neg_part = g.mul(damped, neg)?;
            g.add(pos_part, neg_part)?
        }
    };

    // Per-pair block maxima, held constant, keep every exp() in range.
    let e = g.value(exponent).data();
    let mut block_max = vec![f64::NEG_INFINITY; b * texts];
    for r in 0..rows {
        for c in 0..cols {
            let k = (r / cells) * texts + c / tokens;
            block_max[k] = block_max[k].max(e[r * cols + c]);
        }
    }
    let mut shift = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            shift.push(block_max[(r / cells) * texts + c / tokens]);
        }
    }
    let shift = g.constant(Tensor::new(&[rows, cols], shift)?);
    let centered = g.sub(exponent, shift)?;
    let x = g.exp(centered);
    let cube = g.reshape(x, &[b, cells, cols])?;
    let (over_cells, _) = g.reduce(cube, 1, ReduceMode::Sum)?;
    let per_token = g.reshape(over_cells, &[b * texts, tokens])?;
    let (block_sum, _) = g.reduce(per_token, 1, ReduceMode::Sum)?;
    let block_sum = g.reshape(block_sum, &[b, texts])?;
    let logs = g.log(block_sum);
    let block_max = g.constant(Tensor::new(&[b, texts], block_max)?);
    let w = g.add(logs, block_max)?;
    nce_from_pair_logits(g, w, pairing, opts.mean_over_batch)
}

/// Sum of squares of the given tensors (no square root, no halving).
pub fn l2_reg(g: &mut Graph, params: &[Var]) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for &p in params {
        let sq = g.mul(p, p)?;
        let s = g.sum_all(sq)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Plain-value form of [`l2_reg`] over a whole parameter set.
pub fn l2_reg_value(params: &crate::encoders::ModelParams) -> f64 {
    params.iter().map(|(_, t)| t.sum_squares()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cg: f64,
    pub fg: f64,
    pub reg: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Default fine-loss and regulariser weights.
pub const DEFAULT_BETA: f64 = 0.001;
pub const DEFAULT_GAMMA: f64 = 1e-7;

/// `total = cg + beta * fg + gamma * reg`
pub fn combined_loss(cg: f64, fg: f64, reg: f64, beta: f64, gamma: f64) -> Result<LossBreakdown> {
    for (name, v) in [("L_cg", cg), ("L_fg", fg), ("L_reg", reg), ("beta", beta), ("gamma", gamma)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        cg,
        fg,
        reg,
        total: cg + beta * fg + gamma * reg,
        beta,
        gamma,
    })
}
