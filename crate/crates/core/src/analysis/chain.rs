use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::model::MultimodalModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradPath {
    /// Cross-entropy of the fused logits.
    Multi,
    /// Cross-entropy of the logits with every other modality dropped.
    Uni,
}

/// Exact per-sample gradients `dL_i / dz_i^{m_k}` read off the tape, `[n x d_k]`.
///
/// The batch loss is a mean, so the tape gradient is rescaled by `n` to give
/// each row the gradient of that sample's own loss.
pub fn full_chain_gradient(
    model: &MultimodalModel,
    inputs: &[Tensor],
    labels: &[usize],
    k: usize,
    path: GradPath,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let reps = model.encode(&mut tape, inputs)?;
    let logits = match path {
        GradPath::Multi => model.logits_full(&mut tape, &reps)?,
        GradPath::Uni => model.logits_unimodal(&mut tape, &reps, k)?,
    };
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let total = tape.scale(loss, labels.len() as f64);
    tape.backward(total)?;
    let shape = tape.shape(reps[k]).to_vec();
    let grad = tape
        .grad(reps[k])
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
    Tensor::new(shape, grad)
}
