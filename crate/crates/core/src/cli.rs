//! `fgnce` command line. Exit codes: 0 success, 1 runtime or data error,
//! 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::ablation::{self, AblationRun};
use crate::checks::{self, InstanceShape, GRADCHECK_TOL};
use crate::config::{load_config, RunConfig};
use crate::error::{Error, Result};
use crate::synthdata::{make_dataset, write_atomic, Dataset};
use crate::training::{evaluate, metrics_csv, Checkpoint, LossVariant, Preset, Trainer, METRICS_HEADER};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "fgnce", version, about = "Fine-grained attention-scaled contrastive learning on synthetic video/text pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file; omitted keys take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy", value_parser = parse_preset)]
    preset: Preset,
    /// Overrides the train seed (the data seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoint, metrics CSV and manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated into OUT/dataset when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<LossVariant>,
        /// Serial execution (the only mode; recorded in the manifest).
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint; its config is used as stored.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the dataset recorded in the run manifest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run manifest; defaults to the one next to the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all four loss variants over several seeds and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        deterministic: bool,
    },
    /// Finite-difference check of every loss variant.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient-uniformity and max-pool attribution reports.
    Diagnose {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Untrained parameters (seeded by --seed) when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<LossVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub deterministic: bool,
    pub config: RunConfig,
    pub dataset: DatasetRef,
    pub wall_clock_secs: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(path, format!("{text}\n").as_bytes())
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path, common.preset)?,
        None => RunConfig::preset(common.preset),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let data = make_dataset(&cfg.data.bank()?, &cfg.data.gen, cfg.data.splits)?;
    data.save(out)?;
    Ok(data)
}

/// Loads `dataset`, or generates it under `out/dataset` from `cfg`.
fn obtain_dataset(cfg: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<(Dataset, DatasetRef)> {
    let path = match dataset {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out.join("dataset");
            generate(cfg, &p)?;
            p
        }
    };
    let data = Dataset::load(&path)?;
    let digest = Dataset::digest(&path)?;
    Ok((data, DatasetRef { path, digest }))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, out } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.gen.seed = seed;
            }
            create_dir(&out)?;
            generate(&cfg, &out)?;
            println!("dataset written to {} (sha256 {})", out.display(), Dataset::digest(&out)?);
            Ok(())
        }
        Command::Train {
            common,
            dataset,
            out,
            variant,
            deterministic,
            resume,
        } => {
            let started = Instant::now();
            create_dir(&out)?;
            let mut cfg = resolve_config(&common)?;
            let (data, data_ref) = obtain_dataset(&cfg, dataset.as_deref(), &out)?;
            adopt_meta(&mut cfg, &data);
            let (mut trainer, mut csv) = match &resume {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    let csv = previous_rows(&out.join(METRICS_FILE), ck.epoch)?;
                    (Trainer::from_checkpoint(ck)?, csv)
                }
                None => {
                    if let Some(v) = variant {
                        cfg.train.variant = v;
                    }
                    (Trainer::new(cfg.train.clone())?, format!("{METRICS_HEADER}\n"))
                }
            };
            cfg.train = trainer.config().clone();
            let model = &cfg.train.model;
            if (model.d_raw, model.vocab) != (data.meta.d_lat, data.meta.vocab()) {
                return Err(Error::Config(format!(
                    "model expects d_raw={} vocab={}, dataset has d_lat={} vocab={}",
                    model.d_raw,
                    model.vocab,
                    data.meta.d_lat,
                    data.meta.vocab()
                )));
            }
            let csv_path = out.join(METRICS_FILE);
            while trainer.epoch() < trainer.config().epochs {
                let m = trainer.run_epoch(&data)?;
                csv.push_str(&m.csv_row());
                csv.push('\n');
                write_atomic(&csv_path, csv.as_bytes())?;
                println!(
                    "epoch {:>4}  loss {:.6}  R@1 {:.3}  align {}  lr {:.3e}",
                    m.epoch,
                    m.loss.total,
                    m.retrieval.r_at(1).unwrap_or(f64::NAN),
                    m.align_prec.map_or("undefined".into(), |a| format!("{a:.3}")),
                    m.lr
                );
            }
            write_atomic(&csv_path, csv.as_bytes())?;
            let ck_path = out.join(CHECKPOINT_FILE);
            trainer.checkpoint().save(&ck_path)?;
            let manifest = RunManifest {
                tool: "fgnce".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: "train".into(),
                deterministic,
                config: cfg,
                dataset: data_ref,
                wall_clock_secs: started.elapsed().as_secs_f64(),
                outputs: vec![ck_path, csv_path],
            };
            let manifest_path = out.join(MANIFEST_FILE);
            manifest.save(&manifest_path)?;
            println!("run manifest written to {}", manifest_path.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            manifest,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let manifest_path = manifest.or_else(|| {
                let p = checkpoint.with_file_name(MANIFEST_FILE);
                p.exists().then_some(p)
            });
            let manifest = manifest_path.as_deref().map(RunManifest::load).transpose()?;
            let data_path = match (&dataset, &manifest) {
                (Some(p), _) => p.clone(),
                (None, Some(m)) => m.dataset.path.clone(),
                (None, None) => return Err(Error::Config("eval needs --dataset or a run manifest".into())),
            };
            if let Some(m) = &manifest {
                let found = Dataset::digest(&data_path)?;
                if found != m.dataset.digest {
                    return Err(Error::DigestMismatch {
                        path: data_path,
                        expected: m.dataset.digest.clone(),
                        found,
                    });
                }
            }
            let data = Dataset::load(&data_path)?;
            let report = evaluate(&ck.params, &ck.config, &data.train, &data.test, true)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            println!("{json}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_atomic(&dir.join("eval.json"), format!("{json}\n").as_bytes())?;
            }
            Ok(())
        }
        Command::Ablate {
            common,
            dataset,
            out,
            seeds,
            deterministic: _,
        } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            create_dir(&out)?;
            let mut cfg = resolve_config(&common)?;
            let (data, data_ref) = obtain_dataset(&cfg, dataset.as_deref(), &out)?;
            adopt_meta(&mut cfg, &data);
            let first = common.seed.unwrap_or(0);
            let seed_list: Vec<u64> = (first..first + seeds).collect();
            let runs_dir = out.join("runs");
            create_dir(&runs_dir)?;
            let mut failure = None;
            let runs = ablation::run_ablation(&data, &cfg.train, &LossVariant::ALL, &seed_list, |run: &AblationRun| {
                println!("{}", run.csv_row());
                let path = runs_dir.join(format!("{}_seed{}.csv", run.variant, run.seed));
                if let Err(e) = write_atomic(&path, metrics_csv(&run.history).as_bytes()) {
                    failure.get_or_insert(e);
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            write_atomic(&out.join("ablation.csv"), ablation::ablation_csv(&runs).as_bytes())?;
            let summary = ablation::summarize(&runs, &LossVariant::ALL);
            write_atomic(&out.join("ablation_summary.csv"), ablation::summary_csv(&summary).as_bytes())?;
            print!("{}", ablation::summary_table(&summary));
            for metric in ["probe_acc", "r_at_1"] {
                println!(
                    "ordering fg_full > fg_no_inv >= fg_no_attn > milnce_only on mean {metric}: {}; fg_full best in {}/{} seeds",
                    if ablation::ordering_holds(&summary, metric) { "holds" } else { "does not hold" },
                    ablation::full_best_seeds(&runs, metric),
                    seed_list.len()
                );
            }
            let manifest = RunManifest {
                tool: "fgnce".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: "ablate".into(),
                deterministic: true,
                config: cfg,
                dataset: data_ref,
                wall_clock_secs: 0.0,
                outputs: vec![out.join("ablation.csv"), out.join("ablation_summary.csv")],
            };
            manifest.save(&out.join(MANIFEST_FILE))
        }
        Command::Gradcheck { seed } => {
            let cases = checks::gradcheck_suite(seed, InstanceShape::default())?;
            let mut worst = 0.0f64;
            for c in &cases {
                println!(
                    "{:<12} coords {:>4}  max rel err {:.3e}  max abs err {:.3e}",
                    c.variant.name(),
                    c.coordinates,
                    c.max_rel_err,
                    c.max_abs_err
                );
                worst = worst.max(c.max_rel_err);
            }
            let bias = checks::key_bias_gradient(seed, InstanceShape::default())?;
            println!("attention key-bias gradient max |g| {bias:.3e}");
            if worst < GRADCHECK_TOL && bias < 1e-12 {
                println!("max rel err < 1e-6");
                Ok(())
            } else {
                Err(Error::Config(format!("gradient check failed: max rel err {worst:.3e}")))
            }
        }
        Command::Diagnose {
            dataset,
            checkpoint,
            samples,
            batch,
            seed,
            out,
        } => {
            let data = match &dataset {
                Some(p) => Dataset::load(p)?,
                None => {
                    let cfg = RunConfig::preset(Preset::Toy);
                    make_dataset(&cfg.data.bank()?, &cfg.data.gen, cfg.data.splits)?
                }
            };
            let (model, params) = match &checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    (ck.config.model, ck.params)
                }
                None => checks::untrained_model(data.meta.d_lat, data.meta.vocab(), seed)?,
            };
            let n = samples.min(data.test.len());
            let report = checks::diagnose(&params, &model, &data.test[..n], batch)?;
            println!("samples                         {}", report.samples);
            println!("coarse-loss uniformity (max)    {:.3e}", report.coarse_uniformity_max);
            println!("fine-loss uniformity (min)      {:.3e}", report.fine_uniformity_min);
            println!("max-pool noise-source fraction  {:.4}", report.maxpool_noise_mean);
            println!("filler-token fraction           {:.4}", report.filler_fraction_mean);
            if let Some(dir) = out {
                create_dir(&dir)?;
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
                write_atomic(&dir.join("diagnose.json"), format!("{json}\n").as_bytes())?;
            }
            Ok(())
        }
    }
}

/// Makes the recorded data config and the model's input widths describe the
/// dataset actually used, which may differ from the config file.
fn adopt_meta(cfg: &mut RunConfig, data: &Dataset) {
    let m = &data.meta;
    cfg.data.concept_seed = m.concept_seed;
    cfg.data.concepts_foreground = m.concepts_foreground;
    cfg.data.concepts_background = m.concepts_background;
    cfg.data.d_lat = m.d_lat;
    cfg.data.gen = m.gen.clone();
    cfg.data.splits = m.splits;
    cfg.train.model.d_raw = m.d_lat;
    cfg.train.model.vocab = m.vocab();
}

/// Rows of an existing metrics CSV up to and including `epoch`.
fn previous_rows(path: &Path, epoch: usize) -> Result<String> {
    let mut csv = format!("{METRICS_HEADER}\n");
    if !path.exists() {
        return Ok(csv);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for line in text.lines().skip(1) {
        let e: usize = line
            .split(',')
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad metrics row `{line}`")))?;
        if e <= epoch {
            csv.push_str(line);
            csv.push('\n');
        }
    }
    Ok(csv)
}
