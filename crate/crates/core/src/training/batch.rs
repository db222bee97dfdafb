use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::BatchPairing;
use crate::synthdata::SynthSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset index of each batch sample.
    pub indices: Vec<usize>,
    /// `B * P` token sequences; view `u` belongs to sample `u / P`.
    pub views: Vec<Vec<usize>>,
    /// `[B*G x d_raw]`
    pub raw_cells: Tensor,
    pub pairing: BatchPairing,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Draws `b` samples and `p` token-order shuffles of each sample's text.
///
/// Unless `allow_overlap`, samples are scanned in random order and accepted
/// greedily while their mentioned concepts stay pairwise disjoint; if fewer
/// than `b` qualify, the rest of the batch is filled in the same scan order.
pub fn sample_batch(
    samples: &[SynthSample],
    rng: &mut ChaCha8Rng,
    b: usize,
    p: usize,
    allow_overlap: bool,
) -> Result<Batch> {
    if b < 2 {
        return Err(Error::NoNegatives(b));
    }
    if samples.len() < b {
        return Err(Error::Config(format!("batch size {b} exceeds dataset size {}", samples.len())));
    }
    let pairing = BatchPairing::standard(b, p)?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let indices = if allow_overlap {
        order[..b].to_vec()
    } else {
        let mut used = Vec::new();
        let mut chosen = Vec::with_capacity(b);
        let mut skipped = Vec::new();
        for &i in &order {
            if chosen.len() == b {
                break;
            }
            let concepts = samples[i].mentioned_concepts();
            if concepts.iter().any(|c| used.contains(c)) {
                skipped.push(i);
            } else {
                used.extend(concepts);
                chosen.push(i);
            }
        }
        let missing = b - chosen.len();
        chosen.extend(skipped.into_iter().take(missing));
        chosen
    };

    let mut views = Vec::with_capacity(b * p);
    for &i in &indices {
        for _ in 0..p {
            let mut seq = samples[i].tokens.clone();
            seq.shuffle(rng);
            views.push(seq);
        }
    }

    let first = &samples[indices[0]].raw_cells;
    let mut data = Vec::with_capacity(b * first.numel());
    for &i in &indices {
        let raw = &samples[i].raw_cells;
        if raw.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "sample_batch",
                lhs: first.shape().to_vec(),
                rhs: raw.shape().to_vec(),
            });
        }
        data.extend_from_slice(raw.data());
    }
    let raw_cells = Tensor::new(&[b * first.rows(), first.cols()], data)?;

    Ok(Batch {
        indices,
        views,
        raw_cells,
        pairing,
    })
}
