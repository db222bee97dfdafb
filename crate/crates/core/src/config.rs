//! Run configuration: flat `key = value` text under `[data]`, `[model]`
//! and `[train]` headers. `#` starts a comment. Omitted keys take the
//! preset's defaults; unknown keys and repeated keys are errors.
//!
//! ```text
//! [data]
//! concept_seed = 0
//! rho = 0.5
//!
//! [train]
//! variant = fg_full
//! decay_epochs = 20, 40     # or `none`
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{make_concept_bank, ConceptBank, GenParams, SplitSizes};
use crate::training::{Preset, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub concept_seed: u64,
    pub concepts_foreground: usize,
    pub concepts_background: usize,
    pub d_lat: usize,
    pub gen: GenParams,
    pub splits: SplitSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            concept_seed: 0,
            concepts_foreground: 64,
            concepts_background: 64,
            d_lat: 16,
            gen: GenParams::default(),
            splits: SplitSizes {
                train: 2000,
                val: 200,
                test: 200,
            },
        }
    }
}

impl DataConfig {
    pub fn bank(&self) -> Result<ConceptBank> {
        make_concept_bank(self.concept_seed, self.concepts_foreground, self.concepts_background, self.d_lat)
    }

    pub fn vocab(&self) -> usize {
        self.concepts_foreground + self.concepts_background
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        let mut c = RunConfig {
            preset,
            data: DataConfig::default(),
            train: TrainConfig::preset(preset),
        };
        c.sync_model_dims();
        c
    }

    /// Model input widths follow the data.
    fn sync_model_dims(&mut self) {
        self.train.model.d_raw = self.data.d_lat;
        self.train.model.vocab = self.data.vocab();
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.splits.train == 0 || self.data.splits.val == 0 || self.data.splits.test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        self.data.gen.validate(&self.data.bank()?)?;
        self.train.validate()
    }

    pub fn parse(text: &str, preset: Preset) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(preset);
        let mut section: Option<String> = None;
        let mut seen: Vec<String> = Vec::new();
        let mut decay_set = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::ConfigParse {
                    line,
                    msg: format!("unterminated section header `{content}`"),
                })?;
                let name = name.trim();
                if !["data", "model", "train"].contains(&name) {
                    return Err(Error::ConfigParse {
                        line,
                        msg: format!("unknown section `[{name}]` (expected data, model or train)"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                msg: format!("expected `key = value`, found `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section.as_deref().ok_or_else(|| Error::ConfigParse {
                line,
                msg: format!("key `{key}` appears before any section header"),
            })?;
            let full = format!("{sec}.{key}");
            if seen.contains(&full) {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("`{key}` is set twice in [{sec}]"),
                });
            }
            seen.push(full);
            if sec == "train" && key == "decay_epochs" {
                decay_set = true;
            }
            cfg.set(sec, key, value).map_err(|e| match e {
                Error::UnknownKey(k) => Error::UnknownKey(format!("{k} (line {line})")),
                other => Error::ConfigParse {
                    line,
                    msg: other.to_string(),
                },
            })?;
        }
        if !decay_set && preset == Preset::Toy {
            cfg.train.decay_epochs = TrainConfig::thirds(cfg.train.epochs);
        }
        cfg.sync_model_dims();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match (section, key) {
            ("data", "concept_seed") => d.concept_seed = num(v)?,
            ("data", "concepts_foreground") => d.concepts_foreground = num(v)?,
            ("data", "concepts_background") => d.concepts_background = num(v)?,
            ("data", "d_lat") => d.d_lat = num(v)?,
            ("data", "cells") => d.gen.cells = num(v)?,
            ("data", "tokens") => d.gen.tokens = num(v)?,
            ("data", "foreground") => d.gen.foreground = num(v)?,
            ("data", "correlated") => d.gen.correlated = num(v)?,
            ("data", "sigma") => d.gen.sigma = num(v)?,
            ("data", "rho") => d.gen.rho = num(v)?,
            ("data", "seed") => d.gen.seed = num(v)?,
            ("data", "train") => d.splits.train = num(v)?,
            ("data", "val") => d.splits.val = num(v)?,
            ("data", "test") => d.splits.test = num(v)?,
            ("model", "d_tok") => t.model.d_tok = num(v)?,
            ("model", "d_h") => t.model.d_h = num(v)?,
            ("model", "d_l") => t.model.d_l = num(v)?,
            ("model", "d_e") => t.model.d_e = num(v)?,
            ("model", "d_k") => t.model.d_k = num(v)?,
            ("model", "text_pool") => t.model.text_pool = v.parse()?,
            ("model", "contextual") => t.model.contextual = boolean(v)?,
            ("model", "normalize") => t.model.normalize = boolean(v)?,
            ("train", "seed") => t.seed = num(v)?,
            ("train", "batch_size") => t.batch_size = num(v)?,
            ("train", "epochs") => t.epochs = num(v)?,
            ("train", "variant") => t.variant = v.parse()?,
            ("train", "beta") => t.beta = num(v)?,
            ("train", "gamma") => t.gamma = num(v)?,
            ("train", "lr") => t.lr = num(v)?,
            ("train", "warmup_steps") => t.warmup_steps = num(v)?,
            ("train", "decay_epochs") => t.decay_epochs = list(v)?,
            ("train", "decay_factor") => t.decay_factor = num(v)?,
            ("train", "views") => t.views = num(v)?,
            ("train", "temperature") => t.temperature = num(v)?,
            ("train", "mean_over_batch") => t.mean_over_batch = boolean(v)?,
            ("train", "allow_overlap") => t.allow_overlap = boolean(v)?,
            ("train", "steps_per_epoch") => t.steps_per_epoch = num(v)?,
            ("train", "probe_every") => t.probe_every = num(v)?,
            ("train", "adam_beta1") => t.adam.beta1 = num(v)?,
            ("train", "adam_beta2") => t.adam.beta2 = num(v)?,
            ("train", "adam_eps") => t.adam.eps = num(v)?,
            _ => return Err(Error::UnknownKey(format!("[{section}] {key}"))),
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse `{v}` as a number")))
}

fn boolean(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("expected true or false, found `{v}`"))),
    }
}

fn list(v: &str) -> Result<Vec<usize>> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

pub fn load_config(path: &Path, preset: Preset) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text, preset)
}
