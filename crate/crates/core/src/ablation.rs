//! Controlled comparison of the four loss variants: same dataset, same
//! seeds, same initialisation, only the objective differs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthdata::Dataset;
use crate::training::{train, EpochMetrics, LossVariant, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub variant: LossVariant,
    pub seed: u64,
    pub probe_acc: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub med_r: f64,
    pub align_prec: f64,
    pub loss_total: f64,
    #[serde(skip)]
    pub history: Vec<EpochMetrics>,
}

pub const ABLATION_HEADER: &str = "variant,seed,probe_acc,r_at_1,r_at_5,r_at_10,med_r,align_prec,loss_total";

impl AblationRun {
    fn from_history(variant: LossVariant, seed: u64, history: Vec<EpochMetrics>) -> Result<AblationRun> {
        let last = history
            .last()
            .ok_or_else(|| Error::Config("ablation needs at least one epoch".into()))?;
        let r = &last.retrieval;
        Ok(AblationRun {
            variant,
            seed,
            probe_acc: last.probe_acc.unwrap_or(f64::NAN),
            r_at_1: r.r_at(1).unwrap_or(f64::NAN),
            r_at_5: r.r_at(5).unwrap_or(f64::NAN),
            r_at_10: r.r_at(10).unwrap_or(f64::NAN),
            med_r: r.median_rank,
            align_prec: last.align_prec.unwrap_or(f64::NAN),
            loss_total: last.loss.total,
            history,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.seed,
            self.probe_acc,
            self.r_at_1,
            self.r_at_5,
            self.r_at_10,
            self.med_r,
            self.align_prec,
            self.loss_total
        )
    }
}

/// Trains every variant for every seed. `on_run` sees each run as it ends.
pub fn run_ablation(
    data: &Dataset,
    base: &TrainConfig,
    variants: &[LossVariant],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &variant in variants {
            let cfg = TrainConfig {
                seed,
                variant,
                ..base.clone()
            };
            let outcome = train(&cfg, data)?;
            let run = AblationRun::from_history(variant, seed, outcome.history)?;
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in runs {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_spread(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantSummary {
    pub variant: LossVariant,
    pub runs: usize,
    /// `(metric, mean, spread)`
    pub metrics: Vec<(&'static str, f64, f64)>,
}

impl VariantSummary {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == metric).map(|m| m.1)
    }
}

pub const SUMMARY_METRICS: [&str; 6] = ["probe_acc", "r_at_1", "r_at_5", "r_at_10", "med_r", "align_prec"];

fn metric(run: &AblationRun, name: &str) -> f64 {
    match name {
        "probe_acc" => run.probe_acc,
        "r_at_1" => run.r_at_1,
        "r_at_5" => run.r_at_5,
        "r_at_10" => run.r_at_10,
        "med_r" => run.med_r,
        "align_prec" => run.align_prec,
        _ => f64::NAN,
    }
}

pub fn summarize(runs: &[AblationRun], variants: &[LossVariant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let metrics = SUMMARY_METRICS
                .iter()
                .map(|&name| {
                    let xs: Vec<f64> = mine.iter().map(|r| metric(r, name)).collect();
                    let (m, s) = mean_spread(&xs);
                    (name, m, s)
                })
                .collect();
            VariantSummary {
                variant,
                runs: mine.len(),
                metrics,
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[VariantSummary]) -> String {
    let mut s = String::from("variant,runs");
    for name in SUMMARY_METRICS {
        s.push_str(&format!(",{name}_mean,{name}_spread"));
    }
    s.push('\n');
    for v in summary {
        s.push_str(&format!("{},{}", v.variant, v.runs));
        for (_, m, sd) in &v.metrics {
            s.push_str(&format!(",{m},{sd}"));
        }
        s.push('\n');
    }
    s
}

/// Human-readable `mean ± spread` table.
pub fn summary_table(summary: &[VariantSummary]) -> String {
    let mut s = format!("{:<12} {:>4}", "variant", "runs");
    for name in SUMMARY_METRICS {
        s.push_str(&format!(" {name:>17}"));
    }
    s.push('\n');
    for v in summary {
        s.push_str(&format!("{:<12} {:>4}", v.variant.name(), v.runs));
        for (_, m, sd) in &v.metrics {
            s.push_str(&format!(" {:>17}", format!("{m:.4} ± {sd:.4}")));
        }
        s.push('\n');
    }
    s
}

/// Directional check on one metric (higher is better):
/// `fg_full > fg_no_inv >= fg_no_attn > milnce_only` over the means.
pub fn ordering_holds(summary: &[VariantSummary], metric: &str) -> bool {
    let get = |v: LossVariant| summary.iter().find(|s| s.variant == v).and_then(|s| s.mean(metric));
    match (
        get(LossVariant::FgFull),
        get(LossVariant::FgNoInv),
        get(LossVariant::FgNoAttn),
        get(LossVariant::MilnceOnly),
    ) {
        (Some(full), Some(inv), Some(attn), Some(base)) => full > inv && inv >= attn && attn > base,
        _ => false,
    }
}

/// Seeds in which `fg_full` strictly beats every other variant on `metric`.
pub fn full_best_seeds(runs: &[AblationRun], metric_name: &str) -> usize {
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .iter()
        .filter(|&&seed| {
            let of_seed: Vec<&AblationRun> = runs.iter().filter(|r| r.seed == seed).collect();
            let full = of_seed.iter().find(|r| r.variant == LossVariant::FgFull).map(|r| metric(r, metric_name));
            match full {
                Some(f) => of_seed
                    .iter()
                    .filter(|r| r.variant != LossVariant::FgFull)
                    .all(|r| f > metric(r, metric_name)),
                None => false,
            }
        })
        .count()
}
