//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! "FGNCE-CKPT v1\n"
//! u32 len, len bytes       TrainConfig as JSON
//! u64 epoch, u64 step      completed epochs and optimizer steps
//! tensor list              model parameters
//! f64 beta1, beta2, eps
//! u64 t
//! tensor list              first moments
//! tensor list              second moments
//! [u8; 32] seed, u64 stream, u128 word position   batch RNG
//! ```
//!
//! A tensor list is `u32 count`, then per tensor `u32 name_len`, name bytes,
//! `u32 rank`, `rank` x `u32` dims and the f64 data row-major.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::synthdata::write_atomic;
use crate::tensor::Tensor;

use super::adam::AdamState;
use super::config::{AdamHyper, TrainConfig};

pub const CHECKPOINT_MAGIC: &str = "FGNCE-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
}

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Config(format!("{x} does not fit the u32 checkpoint field")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn put_tensors<'a>(out: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    put_u32(out, tensors.len())?;
    for (name, t) in tensors {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        put_tensors(&mut out, self.params.iter().collect::<Vec<_>>().into_iter())?;

        let h = self.adam.hyper;
        for x in [h.beta1, h.beta2, h.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
        put_tensors(&mut out, names.iter().copied().zip(&self.adam.m).collect::<Vec<_>>().into_iter())?;
        put_tensors(&mut out, names.iter().copied().zip(&self.adam.v).collect::<Vec<_>>().into_iter())?;

        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(CHECKPOINT_MAGIC.len() + 1)?;
        if magic != format!("{CHECKPOINT_MAGIC}\n").as_bytes() {
            return Err(Error::format(path, "not a FGNCE-CKPT v1 checkpoint"));
        }
        let n = r.u32()?;
        let config: TrainConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| Error::format(path, &format!("config: {e}")))?;
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let params = ModelParams::from_entries(r.tensors()?)?;
        params.check_against(&config.model).map_err(|e| Error::format(path, &e.to_string()))?;

        let hyper = AdamHyper {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let t = r.u64()?;
        let mut moments = Vec::new();
        for _ in 0..2 {
            let list = r.tensors()?;
            let ok = list.len() == params.len()
                && list.iter().zip(params.iter()).all(|((n, m), (pn, p))| n == pn && m.shape() == p.shape());
            if !ok {
                return Err(Error::format(path, "optimizer moments do not match the parameters"));
            }
            moments.push(list.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        }
        let v = moments.pop().expect("two lists");
        let m = moments.pop().expect("two lists");

        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            params,
            adam: AdamState { hyper, t, m, v },
            rng,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?;
            let rank = self.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32()?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format(self.path, "tensor too large"))?;
            let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(self.path, &format!("tensor `{name}`: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
