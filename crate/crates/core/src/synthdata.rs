//! Seeded paired "video grid" / "token sequence" samples with ground-truth
//! sub-part correspondences.
//!
//! A sample places `m` foreground concepts on distinct grid cells, fills the
//! remaining foreground cells with repeats of them, and gives about `rho * G`
//! cells to random background concepts. The text mentions the first `k`
//! foreground concepts; about `rho * T` tokens are filler drawn from the
//! background vocabulary. Token ids are concept ids, so the vocabulary has
//! `C_f + C_b` entries.
//!
//! # Split file layout (`FGNCE-DS v1`)
//!
//! All integers little-endian.
//!
//! ```text
//! "FGNCE-DS v1\n"
//! u32 n, u32 G, u32 T, u32 d_raw
//! n times:
//!   f64[G * d_raw]        raw cells, row-major
//!   u32[T]                token ids
//!   u8[ceil(G*T / 8)]     M, row-major bits, least significant bit first
//!   u8[ceil(G / 8)]       cell foreground mask bits
//!   u8[ceil(T / 8)]       token correlated mask bits
//!   u32                   primary concept
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "FGNCE-DS v1";
pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const META_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    pub foreground: usize,
    pub background: usize,
    pub d_lat: usize,
    pub seed: u64,
    /// `[(C_f + C_b) x d_lat]`, unit-norm rows; foreground ids come first.
    pub latents: Tensor,
}

impl ConceptBank {
    pub fn vocab(&self) -> usize {
        self.foreground + self.background
    }

    pub fn latent(&self, concept: usize) -> &[f64] {
        self.latents.row(concept)
    }
}

/// I.i.d. standard-normal vectors scaled to unit norm.
pub fn make_concept_bank(seed: u64, foreground: usize, background: usize, d_lat: usize) -> Result<ConceptBank> {
    if foreground == 0 || background == 0 || d_lat == 0 {
        return Err(Error::Config(format!(
            "concept bank sizes must be positive (C_f={foreground}, C_b={background}, d_lat={d_lat})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = foreground + background;
    let mut data = Vec::with_capacity(n * d_lat);
    for _ in 0..n {
        let mut v: Vec<f64> = (0..d_lat).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        data.extend(v);
    }
    Ok(ConceptBank {
        foreground,
        background,
        d_lat,
        seed,
        latents: Tensor::new(&[n, d_lat], data)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    /// Grid cells per video (`G`).
    pub cells: usize,
    /// Tokens per text (`T`).
    pub tokens: usize,
    /// Foreground concepts per sample (`m`).
    pub foreground: usize,
    /// Foreground concepts mentioned by the text (`k`).
    pub correlated: usize,
    /// Noise-to-signal norm ratio of raw cells.
    pub sigma: f64,
    /// Expected fraction of background cells and of filler tokens.
    pub rho: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            cells: 16,
            tokens: 8,
            foreground: 4,
            correlated: 2,
            sigma: 0.3,
            rho: 0.5,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self, bank: &ConceptBank) -> Result<()> {
        let GenParams {
            cells: g,
            tokens: t,
            foreground: m,
            correlated: k,
            ..
        } = *self;
        if k < 1 || k > m {
            return Err(Error::Config(format!("need 1 <= k <= m, got k={k}, m={m}")));
        }
        if m > g {
            return Err(Error::Config(format!("need m <= G, got m={m}, G={g}")));
        }
        if k > t {
            return Err(Error::Config(format!("need k <= T, got k={k}, T={t}")));
        }
        if m > bank.foreground {
            return Err(Error::Config(format!("m={m} exceeds foreground vocabulary {}", bank.foreground)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[G x d_raw]`
    pub raw_cells: Tensor,
    pub tokens: Vec<usize>,
    /// `correspondence[i][j]`: cell `i` and token `j` carry the same
    /// foreground concept.
    pub correspondence: Vec<Vec<bool>>,
    pub primary_concept: usize,
    pub cell_foreground: Vec<bool>,
    pub token_correlated: Vec<bool>,
}

impl SynthSample {
    pub fn cells(&self) -> usize {
        self.raw_cells.rows()
    }

    /// Foreground concepts mentioned by the text, sorted.
    pub fn mentioned_concepts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .tokens
            .iter()
            .zip(&self.token_correlated)
            .filter(|(_, &corr)| corr)
            .map(|(&id, _)| id)
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Fraction of (cell, token) sub-pairs that involve a background cell or
    /// a filler token.
    pub fn noise_pair_fraction(&self) -> f64 {
        let fg = self.cell_foreground.iter().filter(|&&x| x).count();
        let corr = self.token_correlated.iter().filter(|&&x| x).count();
        1.0 - (fg * corr) as f64 / (self.cell_foreground.len() * self.tokens.len()) as f64
    }
}

/// `floor(x) + Bernoulli(frac(x))`, so the expectation is exactly `x`.
fn stochastic_round(x: f64, rng: &mut ChaCha8Rng) -> usize {
    let base = x.floor();
    let extra = rng.random::<f64>() < x - base;
    base as usize + usize::from(extra)
}

pub fn sample_pair(bank: &ConceptBank, gen: &GenParams, rng: &mut ChaCha8Rng) -> Result<SynthSample> {
    gen.validate(bank)?;
    let (g, t, m, k) = (gen.cells, gen.tokens, gen.foreground, gen.correlated);
    let concepts: Vec<usize> = rand::seq::index::sample(rng, bank.foreground, m).into_vec();
    let background_cells = stochastic_round(gen.rho * g as f64, rng).min(g - m);
    let filler_tokens = stochastic_round(gen.rho * t as f64, rng).min(t - k);

    let mut slots: Vec<usize> = (0..g).collect();
    slots.shuffle(rng);
    let mut cell_concept = vec![0usize; g];
    let mut cell_foreground = vec![false; g];
    for (rank, &cell) in slots.iter().enumerate() {
        if rank < m {
            cell_concept[cell] = concepts[rank];
            cell_foreground[cell] = true;
        } else if rank < g - background_cells {
            cell_concept[cell] = *concepts.choose(rng).expect("m >= 1");
            cell_foreground[cell] = true;
        } else {
            cell_concept[cell] = bank.foreground + rng.random_range(0..bank.background);
        }
    }

    let mentioned = &concepts[..k];
    let mut token_slots: Vec<(usize, bool)> = Vec::with_capacity(t);
    for j in 0..t - filler_tokens {
        let id = if j < k { mentioned[j] } else { *mentioned.choose(rng).expect("k >= 1") };
        token_slots.push((id, true));
    }
    for _ in 0..filler_tokens {
        token_slots.push((bank.foreground + rng.random_range(0..bank.background), false));
    }
    token_slots.shuffle(rng);
    let tokens: Vec<usize> = token_slots.iter().map(|s| s.0).collect();
    let token_correlated: Vec<bool> = token_slots.iter().map(|s| s.1).collect();

    let noise_sd = gen.sigma / (bank.d_lat as f64).sqrt();
    let mut raw = Vec::with_capacity(g * bank.d_lat);
    for &c in &cell_concept {
        for &x in bank.latent(c) {
            let n: f64 = rng.sample(StandardNormal);
            raw.push(x + noise_sd * n);
        }
    }

    let correspondence = (0..g)
        .map(|i| {
            (0..t)
                .map(|j| cell_foreground[i] && token_correlated[j] && cell_concept[i] == tokens[j])
                .collect()
        })
        .collect();

    Ok(SynthSample {
        raw_cells: Tensor::new(&[g, bank.d_lat], raw)?,
        tokens,
        correspondence,
        primary_concept: concepts[0],
        cell_foreground,
        token_correlated,
    })
}

/// Independent RNG stream for sample `index` of a dataset.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub gen: GenParams,
    pub concept_seed: u64,
    pub concepts_foreground: usize,
    pub concepts_background: usize,
    pub d_lat: usize,
    pub splits: SplitSizes,
}

impl DatasetMeta {
    pub fn vocab(&self) -> usize {
        self.concepts_foreground + self.concepts_background
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<SynthSample>,
    pub val: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

/// Sample `i` (over the concatenated train, val, test order) is drawn from
/// stream `i` of the generator seed, so generation order does not matter.
pub fn make_dataset(bank: &ConceptBank, gen: &GenParams, splits: SplitSizes) -> Result<Dataset> {
    gen.validate(bank)?;
    if splits.train == 0 || splits.val == 0 || splits.test == 0 {
        return Err(Error::Config(format!("split sizes must be positive, got {splits:?}")));
    }
    let mut all = (0..splits.total())
        .map(|i| sample_pair(bank, gen, &mut sample_rng(gen.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(splits.train + splits.val);
    let val = all.split_off(splits.train);
    Ok(Dataset {
        meta: DatasetMeta {
            gen: gen.clone(),
            concept_seed: bank.seed,
            concepts_foreground: bank.foreground,
            concepts_background: bank.background,
            d_lat: bank.d_lat,
            splits,
        },
        train: all,
        val,
        test,
    })
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        if b {
            byte |= 1 << n;
        }
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect()
}

/// Serialises one split in the `FGNCE-DS v1` layout.
pub fn encode_split(samples: &[SynthSample], cells: usize, tokens: usize, d_raw: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC.as_bytes());
    out.push(b'\n');
    for v in [samples.len(), cells, tokens, d_raw] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Config(format!("count {v} exceeds u32")))?.to_le_bytes());
    }
    for s in samples {
        if s.raw_cells.shape() != [cells, d_raw] || s.tokens.len() != tokens {
            return Err(Error::InvalidShape {
                shape: s.raw_cells.shape().to_vec(),
                reason: format!("sample does not match split layout G={cells}, T={tokens}, d_raw={d_raw}"),
            });
        }
        for x in s.raw_cells.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &id in &s.tokens {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        pack_bits(s.correspondence.iter().flatten().copied(), &mut out);
        pack_bits(s.cell_foreground.iter().copied(), &mut out);
        pack_bits(s.token_correlated.iter().copied(), &mut out);
        out.extend_from_slice(&(s.primary_concept as u32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_split(bytes: &[u8], path: &Path) -> Result<Vec<SynthSample>> {
    let header = format!("{DATASET_MAGIC}\n");
    if !bytes.starts_with(header.as_bytes()) {
        return Err(Error::format(path, format!("missing `{DATASET_MAGIC}` header")));
    }
    let mut r = Reader {
        bytes,
        pos: header.len(),
        path,
    };
    let (n, g, t, d) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if g == 0 || t == 0 || d == 0 {
        return Err(Error::format(path, "zero dimension in header"));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = (0..g * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tokens = (0..t).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let m_bits = unpack_bits(r.take((g * t).div_ceil(8))?, g * t);
        let cell_foreground = unpack_bits(r.take(g.div_ceil(8))?, g);
        let token_correlated = unpack_bits(r.take(t.div_ceil(8))?, t);
        let primary_concept = r.u32()?;
        samples.push(SynthSample {
            raw_cells: Tensor::new(&[g, d], raw)?,
            tokens,
            correspondence: m_bits.chunks(t).map(<[bool]>::to_vec).collect(),
            primary_concept,
            cell_foreground,
            token_correlated,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(samples)
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[SynthSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn split_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.fgds"))
    }

    /// Writes `dataset.json` plus one `FGNCE-DS v1` file per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (g, t, d) = (self.meta.gen.cells, self.meta.gen.tokens, self.meta.d_lat);
        for name in SPLIT_NAMES {
            let bytes = encode_split(self.split(name).expect("known split"), g, t, d)?;
            let path = Self::split_path(dir, name);
            write_atomic(&path, &bytes)?;
        }
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serialises");
        write_atomic(&dir.join(META_FILE), format!("{meta}\n").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let mut splits = Vec::new();
        for name in SPLIT_NAMES {
            let path = Self::split_path(dir, name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let samples = decode_split(&bytes, &path)?;
            if let Some(s) = samples.first() {
                if s.raw_cells.shape() != [meta.gen.cells, meta.d_lat] || s.tokens.len() != meta.gen.tokens {
                    return Err(Error::format(&path, "split layout disagrees with dataset.json"));
                }
            }
            if samples.iter().flat_map(|s| &s.tokens).any(|&id| id >= meta.vocab()) {
                return Err(Error::format(&path, "token id outside the vocabulary"));
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        let sizes = SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        };
        if sizes != meta.splits {
            return Err(Error::format(dir, format!("split sizes {sizes:?} disagree with dataset.json {:?}", meta.splits)));
        }
        Ok(Dataset { meta, train, val, test })
    }

    /// SHA-256 over the metadata and the three split files, in order.
    pub fn digest(dir: &Path) -> Result<String> {
        let mut h = Sha256::new();
        for path in std::iter::once(dir.join(META_FILE)).chain(SPLIT_NAMES.iter().map(|n| Self::split_path(dir, n))) {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
