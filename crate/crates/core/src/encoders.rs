//! Toy per-sub-part encoders and the pooling/projection heads.
//!
//! Rows are sub-parts: a video is `G` grid cells, a text is `T` tokens. All
//! encoders operate row-wise on stacked batches, so a batch of `B` videos is
//! a `[B*G x d]` matrix and per-sample structure is recovered with reshapes.
//! Linear maps use the row convention `x * W + b`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ReduceMode, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPool {
    Max,
    Attn,
}

impl std::str::FromStr for TextPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(TextPool::Max),
            "attn" => Ok(TextPool::Attn),
            other => Err(Error::Config(format!("unknown text pool mode `{other}` (expected max|attn)"))),
        }
    }
}

impl std::fmt::Display for TextPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TextPool::Max => "max",
            TextPool::Attn => "attn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
}

/// Architecture of the toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw cell width; equals the dataset's latent dimension.
    pub d_raw: usize,
    pub vocab: usize,
    pub d_tok: usize,
    /// Video feature-map width (also the video MLP hidden width).
    pub d_h: usize,
    /// Token representation width (also the text MLP hidden width).
    pub d_l: usize,
    /// Joint embedding width.
    pub d_e: usize,
    /// Attention key/query width.
    pub d_k: usize,
    pub text_pool: TextPool,
    /// Adds one self-attention layer over tokens.
    pub contextual: bool,
    /// Unit-normalises coarse and fine embeddings.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_raw: 16,
            vocab: 128,
            d_tok: 16,
            d_h: 32,
            d_l: 32,
            d_e: 16,
            d_k: 8,
            text_pool: TextPool::Max,
            contextual: false,
            normalize: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_raw", self.d_raw),
            ("vocab", self.vocab),
            ("d_tok", self.d_tok),
            ("d_h", self.d_h),
            ("d_l", self.d_l),
            ("d_e", self.d_e),
            ("d_k", self.d_k),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut v = vec![
            ("video.w1", vec![self.d_raw, self.d_h]),
            ("video.b1", vec![1, self.d_h]),
            ("video.w2", vec![self.d_h, self.d_h]),
            ("video.b2", vec![1, self.d_h]),
            ("text.embed", vec![self.vocab, self.d_tok]),
            ("text.w1", vec![self.d_tok, self.d_l]),
            ("text.b1", vec![1, self.d_l]),
            ("text.w2", vec![self.d_l, self.d_l]),
            ("text.b2", vec![1, self.d_l]),
        ];
        if self.contextual {
            v.push(("text.ctx.wq", vec![self.d_l, self.d_l]));
            v.push(("text.ctx.wk", vec![self.d_l, self.d_l]));
            v.push(("text.ctx.wv", vec![self.d_l, self.d_l]));
        }
        v.push(("coarse.video.w", vec![self.d_h, self.d_e]));
        v.push(("coarse.video.b", vec![1, self.d_e]));
        if self.text_pool == TextPool::Attn {
            v.push(("coarse.text.query", vec![self.d_l, 1]));
        }
        v.extend([
            ("coarse.text.w", vec![self.d_l, self.d_e]),
            ("coarse.text.b", vec![1, self.d_e]),
            ("fine.video.w", vec![self.d_h, self.d_e]),
            ("fine.video.b", vec![1, self.d_e]),
            ("fine.text.w", vec![self.d_l, self.d_e]),
            ("fine.text.b", vec![1, self.d_e]),
            ("attn.key.w", vec![self.d_e, self.d_k]),
            ("attn.key.b", vec![1, self.d_k]),
            ("attn.query.w", vec![self.d_e, self.d_k]),
            ("attn.query.b", vec![1, self.d_k]),
        ]);
        v
    }
}

/// True for parameters that only the fine-grained objective reads.
pub fn is_fine_param(name: &str) -> bool {
    name.starts_with("fine.") || name.starts_with("attn.")
}

/// Every trainable tensor of the model, each named exactly once.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let entries = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(&shape);
                let is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
                if !is_bias {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    for x in t.data_mut() {
                        *x = rng.random_range(-bound..bound);
                    }
                }
                (name.to_string(), t)
            })
            .collect();
        Ok(ModelParams { entries })
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(ModelParams { entries })
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.entries.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(&self.entries) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{n}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone()))).collect(),
        }
    }

    /// Records every parameter as a constant; nothing upstream gets a gradient.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.entries.iter().map(|(n, t)| (n.clone(), g.constant(t.clone()))).collect(),
        }
    }
}

/// Parameters recorded on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Binds graph nodes built elsewhere under parameter names.
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Video feature map `h`: `samples * cells` rows of width `d_h`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub values: Var,
    pub samples: usize,
    pub cells: usize,
}

/// Token representations `l`: `sequences * tokens` rows of width `d_l`.
#[derive(Clone, Copy, Debug)]
pub struct TokenReps {
    pub values: Var,
    pub sequences: usize,
    pub tokens: usize,
}

/// `x * W + b`
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

fn mlp(g: &mut Graph, x: Var, p: &BoundParams, prefix: &str) -> Result<Var> {
    let hidden = linear(g, x, p.var(&format!("{prefix}.w1"))?, p.var(&format!("{prefix}.b1"))?)?;
    let hidden = g.tanh(hidden);
    linear(g, hidden, p.var(&format!("{prefix}.w2"))?, p.var(&format!("{prefix}.b2"))?)
}

/// Per-cell two-layer MLP over stacked raw cells `[samples*cells x d_raw]`.
pub fn encode_video(g: &mut Graph, raw_cells: Var, samples: usize, p: &BoundParams) -> Result<FeatureMap> {
    let shape = g.shape(raw_cells).to_vec();
    let w1 = g.shape(p.var("video.w1")?).to_vec();
    if shape.len() != 2 || shape[1] != w1[0] || samples == 0 || shape[0] % samples != 0 {
        return Err(Error::ShapeMismatch {
            op: "encode_video",
            lhs: shape,
            rhs: w1,
        });
    }
    let values = mlp(g, raw_cells, p, "video")?;
    Ok(FeatureMap {
        values,
        samples,
        cells: shape[0] / samples,
    })
}

/// Embedding lookup followed by a per-token MLP. All sequences must share a
/// length.
pub fn encode_text(g: &mut Graph, sequences: &[Vec<usize>], p: &BoundParams, contextual: bool) -> Result<TokenReps> {
    let table = p.var("text.embed")?;
    let vocab = g.shape(table)[0];
    let tokens = sequences.first().map_or(0, Vec::len);
    if tokens == 0 || sequences.iter().any(|s| s.len() != tokens) {
        return Err(Error::InvalidShape {
            shape: vec![sequences.len(), tokens],
            reason: "token sequences must be non-empty and equal length".into(),
        });
    }
    let ids: Vec<usize> = sequences.concat();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let emb = g.index_select(table, 0, &ids)?;
    let mut values = mlp(g, emb, p, "text")?;
    if contextual {
        values = self_attend(g, values, sequences.len(), tokens, p)?;
    }
    Ok(TokenReps {
        values,
        sequences: sequences.len(),
        tokens,
    })
}

/// Residual single-head self-attention within each sequence.
fn self_attend(g: &mut Graph, l: Var, sequences: usize, tokens: usize, p: &BoundParams) -> Result<Var> {
    let d = g.shape(l)[1];
    let (wq, wk, wv) = (p.var("text.ctx.wq")?, p.var("text.ctx.wk")?, p.var("text.ctx.wv")?);
    let mut outs = Vec::with_capacity(sequences);
    for s in 0..sequences {
        let rows: Vec<usize> = (s * tokens..(s + 1) * tokens).collect();
        let x = g.index_select(l, 0, &rows)?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(logits, 1)?;
        let mixed = g.matmul(attn, v)?;
        outs.push(g.add(x, mixed)?);
    }
    g.concat(&outs, 0)
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let (ss, _) = g.reduce(sq, 1, ReduceMode::Sum)?;
    let log = g.log(ss);
    let half = g.scale(log, 0.5);
    let norm = g.exp(half);
    g.div(x, norm)
}

/// Coarse video embedding `W * mean_i(h_i) + b`, one row per sample.
pub fn pool_avg_project(g: &mut Graph, h: &FeatureMap, p: &BoundParams, normalize: bool) -> Result<Var> {
    let d = g.shape(h.values)[1];
    let cube = g.reshape(h.values, &[h.samples, h.cells, d])?;
    let (mean, _) = g.reduce(cube, 1, ReduceMode::Mean)?;
    let mean = g.reshape(mean, &[h.samples, d])?;
    let out = linear(g, mean, p.var("coarse.video.w")?, p.var("coarse.video.b")?)?;
    if normalize {
        l2_normalize_rows(g, out)
    } else {
        Ok(out)
    }
}

/// Pooled-but-unprojected text vector, one row per sequence.
pub fn pool_tokens(g: &mut Graph, l: &TokenReps, mode: TextPool, p: &BoundParams) -> Result<Var> {
    let d = g.shape(l.values)[1];
    match mode {
        TextPool::Max => {
            let cube = g.reshape(l.values, &[l.sequences, l.tokens, d])?;
            let (max, _) = g.reduce(cube, 1, ReduceMode::Max)?;
            g.reshape(max, &[l.sequences, d])
        }
        TextPool::Attn => {
            let query = p.var("coarse.text.query")?;
            let scores = g.matmul(l.values, query)?;
            let scores = g.reshape(scores, &[l.sequences, l.tokens])?;
            let weights = g.softmax(scores, 1)?;
            let weights = g.reshape(weights, &[l.sequences * l.tokens, 1])?;
            let weighted = g.mul(l.values, weights)?;
            let cube = g.reshape(weighted, &[l.sequences, l.tokens, d])?;
            let (sum, _) = g.reduce(cube, 1, ReduceMode::Sum)?;
            g.reshape(sum, &[l.sequences, d])
        }
    }
}

/// Coarse text embedding: pooled tokens through the text projection.
pub fn pool_text(g: &mut Graph, l: &TokenReps, mode: TextPool, p: &BoundParams, normalize: bool) -> Result<Var> {
    let pooled = pool_tokens(g, l, mode, p)?;
    let out = linear(g, pooled, p.var("coarse.text.w")?, p.var("coarse.text.b")?)?;
    if normalize {
        l2_normalize_rows(g, out)
    } else {
        Ok(out)
    }
}

/// Row-wise projection of sub-part representations into the joint space.
pub fn project_fine(g: &mut Graph, rows: Var, modality: Modality, p: &BoundParams, normalize: bool) -> Result<Var> {
    let (w, b) = match modality {
        Modality::Video => (p.var("fine.video.w")?, p.var("fine.video.b")?),
        Modality::Text => (p.var("fine.text.w")?, p.var("fine.text.b")?),
    };
    let out = linear(g, rows, w, b)?;
    if normalize {
        l2_normalize_rows(g, out)
    } else {
        Ok(out)
    }
}
