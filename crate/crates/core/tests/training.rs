use std::path::Path;

use fgnce::config::RunConfig;
use fgnce::synthdata::{make_dataset, Dataset, SplitSizes};
use fgnce::training::{metrics_csv, train, Checkpoint, LossVariant, Preset, TrainConfig, Trainer};
use fgnce::Error;

fn dataset(train: usize, test: usize, sigma: f64, rho: f64) -> Dataset {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.data.gen.sigma = sigma;
    cfg.data.gen.rho = rho;
    let splits = SplitSizes { train, val: 4, test };
    make_dataset(&cfg.data.bank().unwrap(), &cfg.data.gen, splits).unwrap()
}

fn config(variant: LossVariant, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed: 5,
        batch_size: 8,
        epochs,
        warmup_steps: 5,
        decay_epochs: TrainConfig::thirds(epochs),
        steps_per_epoch: 3,
        variant,
        ..TrainConfig::preset(Preset::Toy)
    }
}

#[test]
fn zero_epochs_leaves_the_initialisation() {
    let data = dataset(32, 16, 0.3, 0.5);
    let cfg = config(LossVariant::FgFull, 0);
    let out = train(&cfg, &data).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.checkpoint.params, *Trainer::new(cfg).unwrap().params());
    assert_eq!((out.checkpoint.epoch, out.checkpoint.step), (0, 0));
}

#[test]
fn same_seed_same_bytes_different_seed_different_run() {
    let data = dataset(48, 16, 0.3, 0.5);
    for variant in LossVariant::ALL {
        let cfg = config(variant, 2);
        let (a, b) = (train(&cfg, &data).unwrap(), train(&cfg, &data).unwrap());
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history), "{variant}");
        assert_eq!(a.checkpoint.encode().unwrap(), b.checkpoint.encode().unwrap(), "{variant}");
        let other = train(&TrainConfig { seed: 6, ..cfg }, &data).unwrap();
        assert_ne!(other.checkpoint.params, a.checkpoint.params, "{variant}");
    }
}

#[test]
fn resume_from_any_epoch_is_bit_exact() {
    let data = dataset(48, 16, 0.3, 0.5);
    let cfg = config(LossVariant::FgFull, 4);
    let full = train(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for stop in 0..=4 {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut history = Vec::new();
        for _ in 0..stop {
            history.push(t.run_epoch(&data).unwrap());
        }
        let path = dir.path().join(format!("stop{stop}.ckpt"));
        t.checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
        history.extend(resumed.run(&data).unwrap());
        assert_eq!(metrics_csv(&history), metrics_csv(&full.history), "stop at {stop}");
        assert_eq!(resumed.checkpoint().encode().unwrap(), full.checkpoint.encode().unwrap(), "stop at {stop}");
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = Trainer::new(config(LossVariant::FgNoInv, 1)).unwrap().checkpoint().encode().unwrap();
    let p = Path::new("x.ckpt");
    assert!(Checkpoint::decode(&bytes[..bytes.len() / 2], p).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::decode(&extra, p).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&wrong_magic, p), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn metrics_csv_has_a_row_per_epoch() {
    let data = dataset(32, 16, 0.3, 0.5);
    let mut cfg = config(LossVariant::FgNoAttn, 3);
    cfg.probe_every = 2;
    let out = train(&cfg, &data).unwrap();
    let csv = metrics_csv(&out.history);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));
    // The probe runs every second epoch and at the end.
    let probe: Vec<bool> = out.history.iter().map(|m| m.probe_acc.is_some()).collect();
    assert_eq!(probe, [false, true, true]);
}

fn short_run(sigma: f64, rho: f64) -> (f64, f64, f64, f64) {
    let data = dataset(256, 64, sigma, rho);
    let cfg = TrainConfig {
        seed: 1,
        epochs: 30,
        lr: 1e-2,
        decay_epochs: Vec::new(),
        warmup_steps: 20,
        variant: LossVariant::MilnceOnly,
        ..TrainConfig::preset(Preset::Toy)
    };
    let out = train(&cfg, &data).unwrap();
    let (first, last) = (&out.history[0], out.history.last().unwrap());
    (first.loss.cg, last.loss.cg, last.retrieval.r_at(10).unwrap(), last.retrieval.median_rank)
}

#[test]
fn noise_free_pairs_are_learnable() {
    // With sigma = rho = 0 every cell is an exact concept latent and every
    // token is a mentioned concept. Chance is R@10 = 10/64, MedR = 32.5.
    let (before, after, r10, med) = short_run(0.0, 0.0);
    assert!(after < 0.5 * before, "loss {before} -> {after}");
    assert!(r10 >= 0.4 && med <= 12.0, "R@10 {r10}, MedR {med}");
    let (_, _, noisy_r10, noisy_med) = short_run(0.3, 0.5);
    assert!(noisy_r10 < r10 && noisy_med > med, "noise should hurt: R@10 {noisy_r10}, MedR {noisy_med}");
}

#[test]
fn fine_objective_decreases_on_easy_data() {
    let data = dataset(256, 64, 0.0, 0.0);
    let cfg = TrainConfig {
        seed: 2,
        epochs: 30,
        decay_epochs: TrainConfig::thirds(30),
        variant: LossVariant::FgFull,
        ..TrainConfig::preset(Preset::Toy)
    };
    let out = train(&cfg, &data).unwrap();
    let (first, last) = (out.history[0].loss.total, out.history.last().unwrap().loss.total);
    assert!(last < first, "total loss {first} -> {last}");
}
