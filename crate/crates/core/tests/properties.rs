mod common;

use std::path::Path;

use common::{rand_rows, tensor, Instance};
use fgnce::encoders::ModelParams;
use fgnce::eval::{alignment_precision, retrieval_metrics};
use fgnce::losses::{combined_loss, l2_reg_value, BatchPairing};
use fgnce::synthdata::{decode_split, encode_split, make_concept_bank, make_dataset, GenParams, SplitSizes};
use fgnce::training::{lr_at, sample_batch, Checkpoint, LrSchedule, TrainConfig, Trainer};
use fgnce::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(seed: u64, r: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    rand_rows(&mut ChaCha8Rng::seed_from_u64(seed), r, c, scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn row_and_column_broadcasts_match_elementwise(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let a = matrix(seed, r, c, 2.0);
        let row = matrix(seed ^ 1, 1, c, 2.0);
        let col = matrix(seed ^ 2, r, 1, 2.0);
        let mut g = Graph::new();
        let (va, vr, vc) = (g.constant(tensor(&a)), g.constant(tensor(&row)), g.constant(tensor(&col)));
        let sum = g.add(va, vr).unwrap();
        let prod = g.mul(va, vc).unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(g.value(sum).at2(i, j), a[i][j] + row[0][j]);
                prop_assert_eq!(g.value(prod).at2(i, j), a[i][j] * col[i][0]);
            }
        }
    }

    #[test]
    fn broadcast_gradients_sum_over_repeated_axes(seed in any::<u64>(), r in 1usize..6, c in 1usize..6) {
        let mut g = Graph::new();
        let a = g.leaf(tensor(&matrix(seed, r, c, 1.0)));
        let row = g.leaf(tensor(&matrix(seed ^ 3, 1, c, 1.0)));
        let s = g.add(a, row).unwrap();
        let total = g.sum_all(s).unwrap();
        g.backward(total).unwrap();
        prop_assert!(g.grad(row).unwrap().data().iter().all(|&x| x == r as f64));
    }

    #[test]
    fn softmax_columns_are_distributions(seed in any::<u64>(), r in 1usize..8, c in 1usize..5, scale in 1e-3f64..700.0) {
        let mut g = Graph::new();
        let x = g.constant(tensor(&matrix(seed, r, c, scale)));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for j in 0..c {
            let col: f64 = (0..r).map(|i| v.at2(i, j)).sum();
            prop_assert!((col - 1.0).abs() <= 1e-12);
            prop_assert!((0..r).all(|i| (0.0..=1.0).contains(&v.at2(i, j))));
        }
    }

    #[test]
    fn recall_is_monotone_and_median_rank_scale_free(seed in any::<u64>(), n in 2usize..30, d in 1usize..6, c in 0.01f64..100.0) {
        let q = tensor(&matrix(seed, n, d, 1.0));
        let v = tensor(&matrix(seed ^ 5, n, d, 1.0));
        let ks: Vec<usize> = (1..=n).collect();
        let r = retrieval_metrics(&q, &v, &ks).unwrap();
        for w in r.recalls.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert_eq!(r.r_at(n), Some(1.0));
        prop_assert!(r.median_rank >= 1.0 && r.median_rank <= n as f64);
        let scaled = Tensor::new(q.shape(), q.data().iter().map(|x| x * c).collect()).unwrap();
        let r2 = retrieval_metrics(&scaled, &v, &ks).unwrap();
        prop_assert_eq!(r.median_rank, r2.median_rank);
    }

    #[test]
    fn combined_total_is_the_weighted_sum(cg in -1e3f64..1e3, fg in -1e3f64..1e3, reg in 0f64..1e6, beta in 0f64..1.0, gamma in 0f64..1e-3) {
        let b = combined_loss(cg, fg, reg, beta, gamma).unwrap();
        prop_assert!((b.total - (b.cg + b.beta * b.fg + b.gamma * b.reg)).abs() <= 1e-12 * b.total.abs().max(1.0));
    }

    #[test]
    fn lr_warms_up_then_only_decays(warmup in 0usize..500, steps in 1usize..2000, d1 in 1usize..20, d2 in 20usize..40) {
        let s = LrSchedule { base: 1e-3, warmup_steps: warmup, decay_epochs: vec![d1, d2], factor: 0.1 };
        for step in 0..steps.min(warmup) {
            prop_assert!(lr_at(step, 0, &s) <= lr_at(step + 1, 0, &s));
        }
        for epoch in 0..50 {
            prop_assert!(lr_at(warmup + steps, epoch + 1, &s) <= lr_at(warmup + steps, epoch, &s));
            prop_assert!(lr_at(warmup + steps, epoch, &s) <= s.base);
        }
    }

    #[test]
    fn milnce_is_invariant_to_sample_order(seed in any::<u64>(), b in 2usize..6, p in 1usize..3, rot in 0usize..6) {
        let inst = Instance::random(&mut ChaCha8Rng::seed_from_u64(seed), b, p, 1, 1, 4, 1);
        let mut shifted = inst.clone();
        let k = rot % b;
        shifted.video.rotate_left(k);
        shifted.text.rotate_left(k * p);
        prop_assert!((inst.lib_milnce() - shifted.lib_milnce()).abs() <= 1e-9 * inst.lib_milnce().abs().max(1.0));
    }

    #[test]
    fn standard_pairing_counts(b in 2usize..10, p in 1usize..4) {
        let pairing = BatchPairing::standard(b, p).unwrap();
        prop_assert_eq!(pairing.positive_count(), b * p);
        prop_assert_eq!(pairing.negative_count(), b * (b - 1) * p);
        for t in 0..b {
            prop_assert!(pairing.positives(t).iter().all(|&(v, u)| v == t && u / p == t));
            prop_assert!(pairing.negatives(t).iter().all(|&(v, u)| v == t && u / p != t));
        }
    }

    #[test]
    fn l2_reg_is_quadratic(seed in any::<u64>()) {
        let cfg = fgnce::encoders::ModelConfig { d_raw: 4, vocab: 8, ..Default::default() };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut doubled = p.clone();
        doubled.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|x| *x *= 2.0));
        prop_assert!((l2_reg_value(&doubled) - 4.0 * l2_reg_value(&p)).abs() <= 1e-12 * l2_reg_value(&doubled));
    }

    #[test]
    fn alignment_precision_is_a_fraction(seed in any::<u64>(), g in 1usize..8, t in 1usize..6) {
        let a = tensor(&matrix(seed, g, t, 1.0));
        let corr: Vec<Vec<bool>> = matrix(seed ^ 7, g, t, 1.0).iter().map(|r| r.iter().map(|&x| x > 0.3).collect()).collect();
        let rep = alignment_precision(&a, &corr).unwrap();
        prop_assert!(rep.hits <= rep.evaluated && rep.evaluated <= t);
        if let Some(p) = rep.precision {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn sampled_batches_are_valid(seed in any::<u64>(), b in 2usize..12, p in 1usize..4, overlap in any::<bool>()) {
        let bank = make_concept_bank(1, 16, 8, 4).unwrap();
        let gen = GenParams { cells: 4, tokens: 4, ..GenParams::default() };
        let data = make_dataset(&bank, &gen, SplitSizes { train: 20, val: 1, test: 1 }).unwrap();
        let batch = sample_batch(&data.train, &mut ChaCha8Rng::seed_from_u64(seed), b, p, overlap).unwrap();
        let mut idx = batch.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), b);
        prop_assert_eq!(batch.views.len(), b * p);
        for (k, view) in batch.views.iter().enumerate() {
            let mut mine = view.clone();
            let mut orig = data.train[batch.indices[k / p]].tokens.clone();
            mine.sort_unstable();
            orig.sort_unstable();
            prop_assert_eq!(mine, orig);
        }
    }

    #[test]
    fn checkpoints_round_trip_bytes(seed in any::<u64>()) {
        let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
        cfg.model.d_raw = 4;
        cfg.model.vocab = 10;
        let bytes = Trainer::new(cfg).unwrap().checkpoint().encode().unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes.clone());
        prop_assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    #[test]
    fn dataset_splits_round_trip(seed in any::<u64>(), rho in 0f64..0.95, sigma in 0f64..1.0) {
        let bank = make_concept_bank(2, 12, 6, 5).unwrap();
        let gen = GenParams { cells: 5, tokens: 4, rho, sigma, seed, ..GenParams::default() };
        let data = make_dataset(&bank, &gen, SplitSizes { train: 6, val: 1, test: 2 }).unwrap();
        let bytes = encode_split(&data.train, 5, 4, 5).unwrap();
        prop_assert_eq!(decode_split(&bytes, Path::new("mem")).unwrap(), data.train);
    }
}
