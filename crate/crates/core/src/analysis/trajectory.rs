use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::StepReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub vanilla_norm: f64,
    pub dgl_norm: f64,
    /// Suppression on modality `k` in the vanilla run; NaN when not recorded.
    pub mean_suppression: f64,
}

/// Aligns two runs step by step on encoder `k`'s gradient norm. The table is
/// as long as the shorter run.
pub fn gradient_norm_trajectory(
    vanilla: &[StepReport],
    dgl: &[StepReport],
    k: usize,
) -> Result<Vec<TrajectoryRow>> {
    let groups = |r: &[StepReport]| r.first().map(|s| s.grad_norms.len());
    if let (Some(a), Some(b)) = (groups(vanilla), groups(dgl)) {
        if a != b {
            return Err(Error::usage(format!(
                "runs disagree on parameter groups ({a} vs {b})"
            )));
        }
    }
    vanilla
        .iter()
        .zip(dgl)
        .map(|(v, d)| {
            let (Some(&vn), Some(&dn)) = (v.grad_norms.get(k), d.grad_norms.get(k)) else {
                return Err(Error::usage(format!("no encoder group {}", k + 1)));
            };
            Ok(TrajectoryRow {
                step: v.step,
                vanilla_norm: vn,
                dgl_norm: dn,
                mean_suppression: v.suppression.get(k).copied().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Averages a per-step series over consecutive windows of `steps_per_epoch`.
pub fn epoch_means(values: &[f64], steps_per_epoch: usize) -> Vec<f64> {
    values
        .chunks(steps_per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
