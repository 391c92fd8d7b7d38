//! Sampling-step ablation: the same trained model evaluated with
//! different numbers of denoising steps.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::StyleAccuracyReport;
use crate::corpus::Utterance;
use crate::engine::{evaluate_mel_mae, evaluate_style, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub steps: usize,
    pub mel_mae: f64,
    pub style_mean: f64,
    pub style: StyleAccuracyReport,
}

/// One row per entry of `t_values`, each evaluated with the same `seed`.
pub fn ablate_timesteps(
    model: &Model,
    eval: &[Utterance],
    t_values: &[usize],
    seed: u64,
    batch: usize,
) -> Result<Vec<AblationRow>> {
    if t_values.is_empty() {
        return Err(Error::Input("no step counts to ablate".into()));
    }
    t_values
        .iter()
        .map(|&t| {
            let mel_mae = evaluate_mel_mae(model, eval, Some(t), seed, batch)?;
            let (style, _) = evaluate_style(model, eval, Some(t), seed, batch)?;
            log::info!("ablation T={t}: mel MAE {mel_mae:.5}, style mean {:.4}", style.mean);
            Ok(AblationRow { steps: t, mel_mae, style_mean: style.mean, style })
        })
        .collect()
}

/// Aligned plain-text table with one column per factor.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let factors: Vec<&String> = rows.first().map(|r| r.style.per_factor.keys().collect()).unwrap_or_default();
    let mut out = format!("{:>3}  {:>10}  {:>10}", "T", "mel_mae", "style_mean");
    for f in &factors {
        let _ = write!(out, "  {f:>8}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:>3}  {:>10.5}  {:>10.4}", r.steps, r.mel_mae, r.style_mean);
        for f in &factors {
            let _ = write!(out, "  {:>8.4}", r.style.accuracy(f).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
