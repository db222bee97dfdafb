//! Self-verification suites shared by the CLI and the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{self, ModelConfig, ModelParams, TextPool};
use crate::error::{Error, Result};
use crate::eval::{self, GradientAttribution, MaxPoolAttribution};
use crate::losses::{self, BatchPairing, FgVariant, FineLayout, LossOptions};
use crate::synthdata::SynthSample;
use crate::tensor::{finite_diff_check_with, GradCheckReport, Graph, Stencil, Tensor, Var};
use crate::training::LossVariant;

/// Shape of the random loss instance checked by [`gradcheck_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InstanceShape {
    pub batch: usize,
    pub cells: usize,
    pub tokens: usize,
    pub views: usize,
    pub d_e: usize,
    pub d_k: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            batch: 3,
            cells: 4,
            tokens: 3,
            views: 2,
            d_e: 8,
            d_k: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckCase {
    pub variant: LossVariant,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

pub const GRADCHECK_TOL: f64 = 1e-6;
/// Step of the seven-point stencil; its truncation error is `O(eps^6)`.
pub const GRADCHECK_EPS: f64 = 1e-2;

/// One named slice of the flat vector under test.
struct Segment {
    name: &'static str,
    shape: Vec<usize>,
    offset: usize,
}

fn segments(s: InstanceShape, variant: LossVariant) -> Vec<Segment> {
    let texts = s.batch * s.views;
    let mut shapes: Vec<(&'static str, Vec<usize>)> = vec![("video", vec![s.batch, s.d_e]), ("text", vec![texts, s.d_e])];
    if variant.fine().is_some() {
        shapes.push(("fine_video", vec![s.batch * s.cells, s.d_e]));
        shapes.push(("fine_text", vec![texts * s.tokens, s.d_e]));
    }
    if uses_attention(variant) {
        shapes.push(("attn.key.w", vec![s.d_e, s.d_k]));
        shapes.push(("attn.query.w", vec![s.d_e, s.d_k]));
        shapes.push(("attn.query.b", vec![1, s.d_k]));
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let seg = Segment {
                name,
                offset,
                shape: shape.clone(),
            };
            offset += shape.iter().product::<usize>();
            seg
        })
        .collect()
}

fn uses_attention(variant: LossVariant) -> bool {
    matches!(variant, LossVariant::FgFull | LossVariant::FgNoInv)
}

/// `L_cg` for `milnce_only`, `L_cg + L_fg` otherwise, as a function of the
/// flat vector `x` laid out by [`segments`].
fn instance_loss(g: &mut Graph, x: Var, s: InstanceShape, variant: LossVariant) -> Result<Var> {
    let segs = segments(s, variant);
    let mut parts = Vec::with_capacity(segs.len());
    for seg in &segs {
        let n: usize = seg.shape.iter().product();
        let idx: Vec<usize> = (seg.offset..seg.offset + n).collect();
        let flat = g.index_select(x, 0, &idx)?;
        parts.push((seg.name, g.reshape(flat, &seg.shape)?));
    }
    let pairing = BatchPairing::standard(s.batch, s.views)?;
    let opts = LossOptions::default();
    let cg = losses::milnce_loss(g, parts[0].1, parts[1].1, &pairing, opts)?;
    let Some(fine) = variant.fine() else {
        return Ok(cg);
    };
    // The key bias shifts every logit of a softmax column equally, so its
    // gradient is identically zero; it is held fixed at zero here and
    // checked separately by `key_bias_gradient`.
    let mut attn = parts[4..].to_vec();
    if uses_attention(variant) {
        let zero = g.constant(Tensor::zeros(&[1, s.d_k]));
        attn.push(("attn.key.b", zero));
    } else {
        for (name, shape) in [("attn.key.w", [s.d_e, s.d_k]), ("attn.query.w", [s.d_e, s.d_k]), ("attn.key.b", [1, s.d_k]), ("attn.query.b", [1, s.d_k])] {
            attn.push((name, g.constant(Tensor::zeros(&shape))));
        }
    }
    let bound = ParamsView(attn).bind();
    let layout = FineLayout {
        cells: s.cells,
        tokens: s.tokens,
    };
    let fg = losses::fg_loss(g, parts[2].1, parts[3].1, layout, &pairing, &bound, fine, opts)?;
    g.add(cg, fg)
}

struct ParamsView(Vec<(&'static str, Var)>);

impl ParamsView {
    fn bind(&self) -> encoders::BoundParams {
        encoders::BoundParams::from_vars(self.0.iter().map(|(n, v)| (n.to_string(), *v)).collect())
    }
}

/// Random point for [`instance_loss`], entries uniform in `[-1, 1]`.
pub fn random_point(s: InstanceShape, variant: LossVariant, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = segments(s, variant).iter().map(|seg| seg.shape.iter().product::<usize>()).sum();
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Finite-difference check of every loss variant, with the attention
/// parameters among the checked coordinates for the fine variants.
pub fn gradcheck_suite(seed: u64, shape: InstanceShape) -> Result<Vec<GradcheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LossVariant::ALL
        .into_iter()
        .map(|variant| {
            let point = random_point(shape, variant, &mut rng);
            let r = gradcheck_variant(variant, shape, &point)?;
            Ok(GradcheckCase {
                variant,
                coordinates: point.numel(),
                max_rel_err: r.max_rel_err,
                max_abs_err: r.max_abs_err,
            })
        })
        .collect()
}

pub fn gradcheck_variant(variant: LossVariant, shape: InstanceShape, point: &Tensor) -> Result<GradCheckReport> {
    gradcheck_variant_with(variant, shape, point, GRADCHECK_EPS, Stencil::SevenPoint)
}

pub fn gradcheck_variant_with(
    variant: LossVariant,
    shape: InstanceShape,
    point: &Tensor,
    eps: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    finite_diff_check_with(|g, x| instance_loss(g, x, shape, variant), point, eps, stencil)
}

/// Largest `|dL/d attn.key.b|` of the full and no-inverse fine losses at a
/// random instance; zero up to rounding.
pub fn key_bias_gradient(seed: u64, s: InstanceShape) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for variant in [FgVariant::Full, FgVariant::NoInv] {
        let mut g = Graph::new();
        let texts = s.batch * s.views;
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
        };
        let fv = g.constant(rand(&[s.batch * s.cells, s.d_e]));
        let ft = g.constant(rand(&[texts * s.tokens, s.d_e]));
        let params = vec![
            ("attn.key.w".to_string(), g.constant(rand(&[s.d_e, s.d_k]))),
            ("attn.key.b".to_string(), g.leaf(rand(&[1, s.d_k]))),
            ("attn.query.w".to_string(), g.constant(rand(&[s.d_e, s.d_k]))),
            ("attn.query.b".to_string(), g.constant(rand(&[1, s.d_k]))),
        ];
        let kb = params[1].1;
        let bound = encoders::BoundParams::from_vars(params);
        let pairing = BatchPairing::standard(s.batch, s.views)?;
        let layout = FineLayout {
            cells: s.cells,
            tokens: s.tokens,
        };
        let loss = losses::fg_loss(&mut g, fv, ft, layout, &pairing, &bound, variant, LossOptions::default())?;
        g.backward(loss)?;
        let grad = g.grad(kb).expect("leaf");
        worst = grad.data().iter().fold(worst, |m, x| m.max(x.abs()));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseReport {
    pub samples: usize,
    /// Largest coarse-loss uniformity statistic over the anchors.
    pub coarse_uniformity_max: f64,
    /// Smallest fine-loss uniformity statistic over the anchors.
    pub fine_uniformity_min: f64,
    pub coarse: Vec<GradientAttribution>,
    pub fine: Vec<GradientAttribution>,
    /// Max-pool attribution of each sample's raw token representations.
    pub maxpool: Vec<MaxPoolAttribution>,
    pub maxpool_noise_mean: f64,
    /// Fraction of uncorrelated tokens, the noise share a uniform source
    /// choice would give.
    pub filler_fraction_mean: f64,
}

/// Gradient-uniformity and max-pool attribution over `samples`, each used
/// once as the anchor of a batch made of itself and its successors.
pub fn diagnose(params: &ModelParams, cfg: &ModelConfig, samples: &[SynthSample], batch: usize) -> Result<DiagnoseReport> {
    if samples.len() < batch.max(2) {
        return Err(Error::Config(format!("diagnose needs at least {} samples", batch.max(2))));
    }
    let n = samples.len();
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    let mut maxpool = Vec::new();
    for a in 0..n {
        let group: Vec<&SynthSample> = (0..batch.max(2)).map(|k| &samples[(a + k) % n]).collect();
        coarse.push(eval::coarse_gradient_attribution(params, cfg, &group, 0, None)?);
        fine.push(eval::coarse_gradient_attribution(params, cfg, &group, 0, Some(FgVariant::Full))?);

        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let l = encoders::encode_text(&mut g, std::slice::from_ref(&samples[a].tokens), &bound, cfg.contextual)?;
        maxpool.push(eval::maxpool_attribution(g.value(l.values), &samples[a].token_correlated)?);
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / n as f64;
    let filler = mean(&mut samples.iter().map(|s| {
        s.token_correlated.iter().filter(|&&c| !c).count() as f64 / s.token_correlated.len() as f64
    }));
    Ok(DiagnoseReport {
        samples: n,
        coarse_uniformity_max: coarse.iter().map(|c| c.uniformity).fold(0.0, f64::max),
        fine_uniformity_min: fine.iter().map(|c| c.uniformity).fold(f64::INFINITY, f64::min),
        maxpool_noise_mean: mean(&mut maxpool.iter().map(|m| m.noise_fraction)),
        filler_fraction_mean: filler,
        coarse,
        fine,
        maxpool,
    })
}

/// Model dims used when `diagnose` runs without a checkpoint.
pub fn untrained_model(d_raw: usize, vocab: usize, seed: u64) -> Result<(ModelConfig, ModelParams)> {
    let cfg = ModelConfig {
        d_raw,
        vocab,
        text_pool: TextPool::Max,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_shape() {
        for seed in 0..10 {
            for case in gradcheck_suite(seed, InstanceShape::default()).unwrap() {
                assert!(case.max_rel_err < GRADCHECK_TOL, "seed {seed}: {case:?}");
            }
        }
    }

    #[test]
    fn key_bias_gradient_vanishes() {
        for seed in 0..5 {
            assert!(key_bias_gradient(seed, InstanceShape::default()).unwrap() < 1e-12);
        }
    }
}

