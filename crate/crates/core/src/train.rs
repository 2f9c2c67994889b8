//! Training steps for every gradient-routing mode and the epoch loop.
//!
//! | mode        | encoders receive                 | fusion + classifier receive |
//! |-------------|----------------------------------|-----------------------------|
//! | `vanilla`   | multimodal loss                  | multimodal loss             |
//! | `dgl`       | `alpha * sum_k L^{m_k}`          | detached multimodal loss    |
//! | `mt_only`   | `alpha * sum_k L^{m_k}`          | detached loss + unimodal    |
//! | `ut_only`   | multimodal + `alpha * sum_k`     | multimodal loss             |
//! | `unimodal_k`| `L^{m_k}`                        | `L^{m_k}`                   |
//!
//! The DGL schedule backpropagates the weighted unimodal losses first, zeroes
//! whatever they left in the fusion and classifier groups, then backpropagates
//! the detached multimodal loss, and finally applies one optimizer step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ConcatHead;
use crate::autodiff::{sgd_step, zero_grad_group, Sgd, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{FusionKind, MultimodalModel};
use crate::rng::{self, Stream};
pub use crate::synthdata::Batch;
use crate::synthdata::{Split, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Vanilla,
    Dgl,
    MtOnly,
    UtOnly,
    /// Train only through modality `k` (zero-based); written `unimodal_{k+1}`.
    Unimodal(usize),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Vanilla => f.write_str("vanilla"),
            Mode::Dgl => f.write_str("dgl"),
            Mode::MtOnly => f.write_str("mt_only"),
            Mode::UtOnly => f.write_str("ut_only"),
            Mode::Unimodal(k) => write!(f, "unimodal_{}", k + 1),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "dgl" => Ok(Mode::Dgl),
            "mt_only" => Ok(Mode::MtOnly),
            "ut_only" => Ok(Mode::UtOnly),
            other => other
                .strip_prefix("unimodal_")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(|k| Mode::Unimodal(k - 1))
                .ok_or_else(|| Error::config(format!("unknown training mode {other:?}"))),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// The learning rate is multiplied by this factor every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dgl,
            alpha: 4.0,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr_decay_factor must be > 0"));
        }
        if let Mode::Unimodal(k) = self.mode {
            if k >= num_modalities {
                return Err(Error::config(format!(
                    "mode {} names a modality the model does not have",
                    self.mode
                )));
            }
        }
        self.sgd(self.lr).validate()
    }

    pub fn sgd(&self, lr: f64) -> Sgd {
        Sgd {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            0 => self.lr,
            every => self.lr * self.lr_decay_factor.powi((epoch / every) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Multimodal cross-entropy (the detached loss has the same value).
    pub loss_multi: f64,
    /// `L^{m_k}` per modality, unweighted.
    pub loss_uni: Vec<f64>,
    /// Gradient L2 norm per parameter group before the update, in group order.
    pub grad_norms: Vec<f64>,
    /// Batch mean of the off-target suppression factors' geometric mean acting
    /// on each modality's gradient; empty for non-concat fusion.
    pub suppression: Vec<f64>,
}

impl StepReport {
    pub fn global_grad_norm(&self) -> f64 {
        self.grad_norms.iter().map(|n| n * n).sum::<f64>().sqrt()
    }
}

fn checked(tape: &Tape, v: Var, what: &str) -> Result<f64> {
    let x = tape.scalar(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerical(format!("{what} loss is not finite ({x})")))
    }
}

fn expect_mode(cfg: &TrainConfig, want: Mode) -> Result<()> {
    if cfg.mode != want {
        return Err(Error::usage(format!(
            "step for mode {want} called with mode {}",
            cfg.mode
        )));
    }
    Ok(())
}

fn suppression_means(model: &MultimodalModel, tape: &Tape, reps: &[Var], labels: &[usize]) -> Result<Vec<f64>> {
    if model.spec().fusion.kind != FusionKind::Concat {
        return Ok(Vec::new());
    }
    let head = ConcatHead::from_model(model)?;
    let n = labels.len();
    let widths: Vec<usize> = reps.iter().map(|&z| tape.shape(z)[1]).collect();
    let mut sums = vec![0.0; reps.len()];
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<&[f64]> = reps
            .iter()
            .zip(&widths)
            .map(|(&v, &d)| &tape.value(v)[i * d..(i + 1) * d])
            .collect();
        for (k, sum) in sums.iter_mut().enumerate() {
            let factors = head.suppression_factors(&z, y, k)?;
            let (log_sum, count) = factors
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != y)
                .fold((0.0, 0usize), |(s, m), (_, f)| (s + f.ln(), m + 1));
            *sum += (log_sum / count as f64).exp();
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

/// Runs the forward and backward passes for `cfg.mode`, leaving the resulting
/// gradients in the model's parameter groups without updating parameters.
pub fn accumulate_grads(
    model: &mut MultimodalModel,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    model.clear_grads();
    let labels = &batch.labels;
    let mut tape = Tape::new();
    let reps = model.encode(&mut tape, &batch.inputs)?;
    let m = model.num_modalities();

    let mut uni_losses = Vec::with_capacity(m);
    let mut loss_uni = Vec::with_capacity(m);
    for k in 0..m {
        let logits = model.logits_unimodal(&mut tape, &reps, k)?;
        let l = tape.softmax_cross_entropy(logits, labels)?;
        loss_uni.push(checked(&tape, l, &format!("unimodal (modality {})", k + 1))?);
        uni_losses.push(l);
    }

    let (fusion, classifier) = (model.fusion_group(), model.classifier_group());
    let loss_multi = match cfg.mode {
        Mode::Vanilla => {
            let logits = model.logits_full(&mut tape, &reps)?;
            let l = tape.softmax_cross_entropy(logits, labels)?;
            let v = checked(&tape, l, "multimodal")?;
            tape.backward_into(l, model.groups_mut())?;
            v
        }
        Mode::Unimodal(k) => {
            let logits = model.logits_full(&mut tape, &reps)?;
            let l = tape.softmax_cross_entropy(logits, labels)?;
            let v = checked(&tape, l, "multimodal")?;
            let uni = *uni_losses
                .get(k)
                .ok_or_else(|| Error::usage(format!("no modality {}", k + 1)))?;
            tape.backward_into(uni, model.groups_mut())?;
            v
        }
        Mode::Dgl | Mode::MtOnly | Mode::UtOnly => {
            if cfg.alpha > 0.0 {
                let mut total = uni_losses[0];
                for &l in &uni_losses[1..] {
                    total = tape.add(total, l)?;
                }
                let weighted = tape.scale(total, cfg.alpha);
                tape.backward_into(weighted, model.groups_mut())?;
            }
            if matches!(cfg.mode, Mode::Dgl | Mode::UtOnly) {
                zero_grad_group(&mut model.groups_mut()[fusion]);
                zero_grad_group(&mut model.groups_mut()[classifier]);
            }
            let logits = if cfg.mode == Mode::UtOnly {
                model.logits_full(&mut tape, &reps)?
            } else {
                model.logits_detached(&mut tape, &reps)?
            };
            let l = tape.softmax_cross_entropy(logits, labels)?;
            let v = checked(&tape, l, "multimodal")?;
            tape.backward_into(l, model.groups_mut())?;
            v
        }
    };

    let grad_norms: Vec<f64> = model.groups().iter().map(|g| g.grad_norm()).collect();
    if let Some(g) = grad_norms.iter().position(|n| !n.is_finite()) {
        return Err(Error::Numerical(format!(
            "gradient of group {} is not finite",
            model.groups()[g].name
        )));
    }
    let suppression = suppression_means(model, &tape, &reps, labels)?;
    Ok(StepReport {
        step: 0,
        loss_multi,
        loss_uni,
        grad_norms,
        suppression,
    })
}

fn step_mode(
    model: &mut MultimodalModel,
    batch: &Batch,
    cfg: &TrainConfig,
    want: Mode,
) -> Result<StepReport> {
    expect_mode(cfg, want)?;
    let report = accumulate_grads(model, batch, cfg)?;
    sgd_step(model.groups_mut(), &cfg.sgd(cfg.lr))?;
    Ok(report)
}

/// One DGL update: encoders move only by the weighted unimodal gradients,
/// fusion and classifier only by the detached multimodal gradient.
pub fn step_dgl(model: &mut MultimodalModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    step_mode(model, batch, cfg, Mode::Dgl)
}

pub fn step_vanilla(model: &mut MultimodalModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    step_mode(model, batch, cfg, Mode::Vanilla)
}

/// Detached multimodal loss plus weighted unimodal losses, with no zeroing:
/// the unimodal gradients also reach fusion and classifier.
pub fn step_mt_only(model: &mut MultimodalModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    step_mode(model, batch, cfg, Mode::MtOnly)
}

/// Undetached multimodal loss plus weighted unimodal losses whose gradients
/// are wiped from fusion and classifier before the multimodal backward.
pub fn step_ut_only(model: &mut MultimodalModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    step_mode(model, batch, cfg, Mode::UtOnly)
}

/// Dispatches on `cfg.mode`.
pub fn step(model: &mut MultimodalModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    step_mode(model, batch, cfg, cfg.mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub multi_acc: f64,
    pub uni_acc: Vec<f64>,
    pub loss_multi: f64,
    pub loss_uni_sum: f64,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&logits[i * k..(i + 1) * k]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of the fused logits and of each modality-dropout path.
pub fn evaluate(model: &MultimodalModel, data: &SyntheticDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let k = model.num_classes();
    let mut tape = Tape::new();
    let reps = model.encode(&mut tape, &data.features)?;
    let logits = model.logits_full(&mut tape, &reps)?;
    let multi_acc = accuracy(tape.value(logits), k, &data.labels);
    let l = tape.softmax_cross_entropy(logits, &data.labels)?;
    let loss_multi = tape.scalar(l)?;
    let mut uni_acc = Vec::with_capacity(reps.len());
    let mut loss_uni_sum = 0.0;
    for m in 0..reps.len() {
        let logits = model.logits_unimodal(&mut tape, &reps, m)?;
        uni_acc.push(accuracy(tape.value(logits), k, &data.labels));
        let l = tape.softmax_cross_entropy(logits, &data.labels)?;
        loss_uni_sum += tape.scalar(l)?;
    }
    Ok(Evaluation {
        multi_acc,
        uni_acc,
        loss_multi,
        loss_uni_sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based epoch number.
    pub epoch: usize,
    pub split: Split,
    pub eval: Evaluation,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutput {
    pub steps: Vec<StepReport>,
    pub epochs: Vec<EpochMetrics>,
    /// SHA-256 of the first mini-batch's sample indices (hex), if any step ran.
    pub first_batch_hash: Option<String>,
}

impl TrainOutput {
    /// Final evaluation on `split`, if recorded.
    pub fn last(&self, split: Split) -> Option<&Evaluation> {
        self.epochs.iter().rev().find(|e| e.split == split).map(|e| &e.eval)
    }
}

fn hash_indices(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn train(
    model: &mut MultimodalModel,
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with(model, train_set, test_set, cfg, |_, _| Ok(()))
}

/// Epoch loop with a hook called after every epoch with the one-based epoch
/// number and the current model.
pub fn train_with<F>(
    model: &mut MultimodalModel,
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
    on_epoch: F,
) -> Result<TrainOutput>
where
    F: FnMut(usize, &MultimodalModel) -> Result<()>,
{
    let mut out = TrainOutput::default();
    train_into(model, train_set, test_set, cfg, &mut out, on_epoch)?;
    Ok(out)
}

/// Like [`train_with`], but records into `out` so that steps and epochs
/// completed before an error remain available.
pub fn train_into<F>(
    model: &mut MultimodalModel,
    train_set: &SyntheticDataset,
    test_set: Option<&SyntheticDataset>,
    cfg: &TrainConfig,
    out: &mut TrainOutput,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(usize, &MultimodalModel) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    cfg.validate(model.num_modalities())?;
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step_idx = out.steps.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let epoch_cfg = TrainConfig {
            lr: cfg.lr_at(epoch),
            ..cfg.clone()
        };
        for chunk in order.chunks(cfg.batch_size) {
            if out.first_batch_hash.is_none() {
                out.first_batch_hash = Some(hash_indices(chunk));
            }
            let batch = train_set.batch(chunk);
            let mut report = step(model, &batch, &epoch_cfg)?;
            report.step = step_idx;
            step_idx += 1;
            out.steps.push(report);
        }
        for data in std::iter::once(train_set).chain(test_set) {
            out.epochs.push(EpochMetrics {
                epoch: epoch + 1,
                split: data.split,
                eval: evaluate(model, data)?,
            });
        }
        on_epoch(epoch + 1, model)?;
    }
    Ok(())
}
