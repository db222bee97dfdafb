use crate::encoders::{self, is_fine_param, BoundParams, Modality};
use crate::error::Result;
use crate::losses::{self, FineLayout, LossOptions};
use crate::tensor::{Graph, Var};

use super::batch::Batch;
use super::config::{LossVariant, TrainConfig};

/// Graph nodes of one training objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub cg: Var,
    /// Absent for `milnce_only`.
    pub fg: Option<Var>,
    pub reg: Var,
    pub total: Var,
}

/// Builds `L_cg + beta * L_fg + gamma * L_reg` for `batch` on `g`.
///
/// For `milnce_only` the regulariser skips the fine projections and the
/// attention parameters, so none of their gradients is ever non-zero.
pub fn build_objective(g: &mut Graph, p: &BoundParams, cfg: &TrainConfig, batch: &Batch) -> Result<Objective> {
    let m = &cfg.model;
    let opts = LossOptions {
        temperature: cfg.temperature,
        mean_over_batch: cfg.mean_over_batch,
    };
    let b = batch.size();
    let raw = g.constant(batch.raw_cells.clone());
    let h = encoders::encode_video(g, raw, b, p)?;
    let l = encoders::encode_text(g, &batch.views, p, m.contextual)?;

    let v = encoders::pool_avg_project(g, &h, p, m.normalize)?;
    let t = encoders::pool_text(g, &l, m.text_pool, p, m.normalize)?;
    let cg = losses::milnce_loss(g, v, t, &batch.pairing, opts)?;

    let fg = match cfg.variant.fine() {
        None => None,
        Some(variant) => {
            let hf = encoders::project_fine(g, h.values, Modality::Video, p, m.normalize)?;
            let lf = encoders::project_fine(g, l.values, Modality::Text, p, m.normalize)?;
            let layout = FineLayout {
                cells: h.cells,
                tokens: l.tokens,
            };
            Some(losses::fg_loss(g, hf, lf, layout, &batch.pairing, p, variant, opts)?)
        }
    };

    let reg_params: Vec<Var> = p
        .iter()
        .filter(|(name, _)| cfg.variant != LossVariant::MilnceOnly || !is_fine_param(name))
        .map(|(_, v)| v)
        .collect();
    let reg = losses::l2_reg(g, &reg_params)?;

    let mut total = cg;
    if let Some(fg) = fg {
        let weighted = g.scale(fg, cfg.beta);
        total = g.add(total, weighted)?;
    }
    let weighted = g.scale(reg, cfg.gamma);
    let total = g.add(total, weighted)?;
    Ok(Objective { cg, fg, reg, total })
}
