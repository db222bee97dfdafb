use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::ModelParams;
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalReport};
use crate::losses::{combined_loss, LossBreakdown};
use crate::synthdata::{Dataset, SynthSample};
use crate::tensor::{Graph, Tensor};

use super::adam::{adam_step, AdamState};
use super::batch::sample_batch;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::objective::build_objective;
use super::schedule::{lr_at, LrSchedule};

/// RNG stream for parameter initialisation.
const INIT_STREAM: u64 = 0;
/// RNG stream for batch sampling and text-view shuffles.
const BATCH_STREAM: u64 = 1;

pub const METRICS_HEADER: &str =
    "epoch,loss_cg,loss_fg,loss_reg,loss_total,r_at_1,r_at_5,r_at_10,med_r,align_prec,probe_acc,lr";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub retrieval: RetrievalReport,
    pub align_prec: Option<f64>,
    pub probe_acc: Option<f64>,
    /// LR of the epoch's last step.
    pub lr: f64,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let r = &self.retrieval;
        let at = |k| opt(r.r_at(k));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss.cg,
            self.loss.fg,
            self.loss.reg,
            self.loss.total,
            at(1),
            at(5),
            at(10),
            r.median_rank,
            opt(self.align_prec),
            opt(self.probe_acc),
            self.lr
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Final (or intermediate) model state plus the per-epoch history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    schedule: LrSchedule,
    params: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    /// Initialisation depends only on `seed` and the model shape, so every
    /// loss variant starts from identical parameters.
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, &mut seeded(cfg.seed, INIT_STREAM))?;
        let adam = AdamState::new(&params, cfg.adam);
        Ok(Trainer {
            schedule: LrSchedule::from_config(&cfg),
            rng: seeded(cfg.seed, BATCH_STREAM),
            cfg,
            params,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Trainer> {
        ck.config.validate()?;
        ck.params.check_against(&ck.config.model)?;
        Ok(Trainer {
            schedule: LrSchedule::from_config(&ck.config),
            cfg: ck.config,
            params: ck.params,
            adam: ck.adam,
            rng: ck.rng,
            epoch: ck.epoch,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let m = &self.cfg.model;
        if data.meta.gen.foreground == 0 || m.d_raw != data.meta.d_lat || m.vocab != data.meta.vocab() {
            return Err(Error::Config(format!(
                "model expects d_raw = {} and vocab = {}, dataset has d_lat = {} and vocab = {}",
                m.d_raw,
                m.vocab,
                data.meta.d_lat,
                data.meta.vocab()
            )));
        }
        if data.train.len() < self.cfg.batch_size {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {} training samples",
                self.cfg.batch_size,
                data.train.len()
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        if self.cfg.steps_per_epoch > 0 {
            self.cfg.steps_per_epoch
        } else {
            (data.train.len() / self.cfg.batch_size).max(1)
        }
    }

    /// One optimizer step; returns the loss components and the LR used.
    pub fn train_step(&mut self, data: &Dataset) -> Result<(LossBreakdown, f64)> {
        let cfg = &self.cfg;
        let batch = sample_batch(&data.train, &mut self.rng, cfg.batch_size, cfg.views, cfg.allow_overlap)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let obj = build_objective(&mut g, &bound, cfg, &batch)?;
        let diverged = |what: String| Error::Diverged {
            epoch: self.epoch,
            step: self.step,
            what,
        };
        let fg = obj.fg.map_or(0.0, |v| g.scalar(v));
        let breakdown = combined_loss(g.scalar(obj.cg), fg, g.scalar(obj.reg), cfg.beta, cfg.gamma)
            .map_err(|e| diverged(e.to_string()))?;
        if !g.scalar(obj.total).is_finite() {
            return Err(diverged("total loss".into()));
        }
        g.backward(obj.total)?;
        let grads: Vec<Tensor> = bound.iter().map(|(_, v)| g.grad(v).expect("parameters require grad")).collect();
        let lr = lr_at(self.step + 1, self.epoch, &self.schedule);
        adam_step(&mut self.params, &grads, &mut self.adam, lr).map_err(|e| match e {
            Error::NonFinite(what) => diverged(what),
            other => other,
        })?;
        self.step += 1;
        Ok((breakdown, lr))
    }

    /// Trains one epoch and evaluates on `data.test`.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        self.check_dataset(data)?;
        let steps = self.steps_per_epoch(data);
        let mut sum = [0.0; 4];
        let mut lr = 0.0;
        for _ in 0..steps {
            let (b, step_lr) = self.train_step(data)?;
            for (acc, x) in sum.iter_mut().zip([b.cg, b.fg, b.reg, b.total]) {
                *acc += x;
            }
            lr = step_lr;
        }
        self.epoch += 1;
        let n = steps as f64;
        let loss = LossBreakdown {
            cg: sum[0] / n,
            fg: sum[1] / n,
            reg: sum[2] / n,
            total: sum[3] / n,
            beta: self.cfg.beta,
            gamma: self.cfg.gamma,
        };
        let with_probe = self.epoch % self.cfg.probe_every == 0 || self.epoch == self.cfg.epochs;
        let report = evaluate(&self.params, &self.cfg, &data.train, &data.test, with_probe)?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss,
            retrieval: report.retrieval,
            align_prec: report.align_prec,
            probe_acc: report.probe_acc,
            lr,
        })
    }

    /// Runs epochs until `cfg.epochs` have completed.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<EpochMetrics>> {
        self.check_dataset(data)?;
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            history.push(self.run_epoch(data)?);
        }
        Ok(history)
    }
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let history = trainer.run(data)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub retrieval: RetrievalReport,
    pub align_prec: Option<f64>,
    pub probe_acc: Option<f64>,
}

/// Retrieval and alignment on `eval_set`; the probe is fit on `probe_train`.
pub fn evaluate(
    params: &ModelParams,
    cfg: &TrainConfig,
    probe_train: &[SynthSample],
    eval_set: &[SynthSample],
    with_probe: bool,
) -> Result<EvalReport> {
    let e = eval::embed_samples(params, &cfg.model, eval_set, true)?;
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= eval_set.len()).collect();
    let retrieval = eval::retrieval_metrics(&e.text, &e.video, &ks)?;
    let align_prec = eval::mean_alignment(&e.attention, eval_set)?;
    let probe_acc = if with_probe {
        let tr = eval::embed_samples(params, &cfg.model, probe_train, false)?;
        let ytr: Vec<usize> = probe_train.iter().map(|s| s.primary_concept).collect();
        let yte: Vec<usize> = eval_set.iter().map(|s| s.primary_concept).collect();
        Some(eval::linear_probe(&tr.video, &ytr, &e.video, &yte)?)
    } else {
        None
    };
    Ok(EvalReport {
        retrieval,
        align_prec,
        probe_acc,
    })
}
