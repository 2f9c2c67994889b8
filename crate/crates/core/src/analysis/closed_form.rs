//! Closed-form encoder gradients for a linear head over concatenated
//! representations, and the suppression factors that separate them.
//!
//! For an analyzed modality `a` and target class `y`, write
//! `u_j(c) = W_c^{m_j} . z^{m_j}` for the contribution of modality `j` to
//! logit `c`. The other modalities enter the target-row gradient only through
//!
//! ```text
//! s_c = exp( sum_{j != a} (W_c^{m_j} - W_y^{m_j}) . z^{m_j} )
//! p_y = exp(u_a(y) + b_y) / sum_c exp(u_a(c) + b_c) s_c
//! g   = (p_y - 1) W_y^{m_a}
//! ```
//!
//! With every `s_c = 1` the expression collapses to the unimodal one.

use std::ops::Range;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{FusionKind, MultimodalModel};

/// Classifier `W [K x sum d_k]`, `b [K]` viewed block-wise per modality.
#[derive(Debug, Clone)]
pub struct ConcatHead<'a> {
    weight: &'a [f64],
    bias: &'a [f64],
    classes: usize,
    width: usize,
    blocks: Vec<Range<usize>>,
}

impl<'a> ConcatHead<'a> {
    pub fn new(weight: &'a Tensor, bias: &'a Tensor, dims: &[usize]) -> Result<Self> {
        let (classes, width) = match weight.shape() {
            [k, w] => (*k, *w),
            s => {
                return Err(Error::Dimension {
                    op: "concat head",
                    left: s.to_vec(),
                    right: vec![0, 0],
                })
            }
        };
        if dims.iter().sum::<usize>() != width || bias.numel() != classes {
            return Err(Error::Dimension {
                op: "concat head",
                left: weight.shape().to_vec(),
                right: dims.to_vec(),
            });
        }
        let mut blocks = Vec::with_capacity(dims.len());
        let mut start = 0;
        for &d in dims {
            blocks.push(start..start + d);
            start += d;
        }
        Ok(Self {
            weight: weight.data(),
            bias: bias.data(),
            classes,
            width,
            blocks,
        })
    }

    pub fn from_model(model: &'a MultimodalModel) -> Result<Self> {
        if model.spec().fusion.kind != FusionKind::Concat {
            return Err(Error::Unsupported(
                "closed-form gradients need concatenation fusion".into(),
            ));
        }
        let dims: Vec<usize> = model.spec().encoders.iter().map(|e| e.output_dim).collect();
        Self::new(model.classifier_weight(), model.classifier_bias(), &dims)
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_modalities(&self) -> usize {
        self.blocks.len()
    }

    /// `W_c^{m_k}`, the block of row `c` that multiplies modality `k`.
    pub fn row_block(&self, c: usize, k: usize) -> &[f64] {
        let row = &self.weight[c * self.width..(c + 1) * self.width];
        &row[self.blocks[k].clone()]
    }

    fn check(&self, z: &[&[f64]], y: usize, k: usize) -> Result<()> {
        if z.len() != self.blocks.len() {
            return Err(Error::usage(format!(
                "expected {} representations, got {}",
                self.blocks.len(),
                z.len()
            )));
        }
        for (j, (zj, b)) in z.iter().zip(&self.blocks).enumerate() {
            if zj.len() != b.len() {
                return Err(Error::Dimension {
                    op: "closed form",
                    left: vec![b.len()],
                    right: vec![zj.len(), j],
                });
            }
        }
        if y >= self.classes {
            return Err(Error::data(format!("label {y} out of range")));
        }
        if k >= self.blocks.len() {
            return Err(Error::usage(format!("modality {} out of range", k + 1)));
        }
        Ok(())
    }

    /// `log s_c` for every class: contributions of all modalities except `k`.
    fn log_factors(&self, z: &[&[f64]], y: usize, k: usize) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                (0..self.blocks.len())
                    .filter(|&j| j != k)
                    .map(|j| {
                        let (wc, wy) = (self.row_block(c, j), self.row_block(y, j));
                        wc.iter()
                            .zip(wy)
                            .zip(z[j])
                            .map(|((a, b), x)| (a - b) * x)
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    /// Target probability `exp(l_y) / sum_c exp(l_c) s_c` with `l_c = W_c^{m_k} z + b_c`.
    fn target_prob(&self, zk: &[f64], y: usize, k: usize, log_s: &[f64]) -> f64 {
        let shifted: Vec<f64> = (0..self.classes)
            .map(|c| {
                let l: f64 = self.row_block(c, k).iter().zip(zk).map(|(w, x)| w * x).sum();
                l + self.bias[c] + log_s[c]
            })
            .collect();
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = shifted.iter().map(|l| (l - max).exp()).sum();
        (shifted[y] - max).exp() / denom
    }

    fn scaled_target_row(&self, p: f64, y: usize, k: usize) -> Vec<f64> {
        self.row_block(y, k).iter().map(|w| (p - 1.0) * w).collect()
    }

    pub fn suppression_factors(&self, z: &[&[f64]], y: usize, k: usize) -> Result<Vec<f64>> {
        self.check(z, y, k)?;
        Ok(self.log_factors(z, y, k).into_iter().map(f64::exp).collect())
    }

    /// Multimodal target-row gradient reaching `z^{m_k}`.
    pub fn g_multi(&self, z: &[&[f64]], y: usize, k: usize) -> Result<Vec<f64>> {
        self.check(z, y, k)?;
        let log_s = self.log_factors(z, y, k);
        let p = self.target_prob(z[k], y, k, &log_s);
        Ok(self.scaled_target_row(p, y, k))
    }

    /// Unimodal probability of the target class from modality `k` alone.
    pub fn p_uni(&self, zk: &[f64], y: usize, k: usize) -> f64 {
        self.target_prob(zk, y, k, &vec![0.0; self.classes])
    }

    pub fn p_multi(&self, z: &[&[f64]], y: usize, k: usize) -> Result<f64> {
        self.check(z, y, k)?;
        let log_s = self.log_factors(z, y, k);
        Ok(self.target_prob(z[k], y, k, &log_s))
    }

    /// Unimodal target-row gradient reaching `z^{m_k}` when only modality `k` is present.
    pub fn g_uni(&self, zk: &[f64], y: usize, k: usize) -> Result<Vec<f64>> {
        if k >= self.blocks.len() || zk.len() != self.blocks[k].len() {
            return Err(Error::usage("modality index or width mismatch"));
        }
        if y >= self.classes {
            return Err(Error::data(format!("label {y} out of range")));
        }
        let p = self.p_uni(zk, y, k);
        Ok(self.scaled_target_row(p, y, k))
    }
}

/// Multimodal target-row gradient for modality `k` (the first modality in the
/// two-modality derivation).
pub fn closed_form_g_multi(head: &ConcatHead<'_>, z: &[&[f64]], y: usize, k: usize) -> Result<Vec<f64>> {
    head.g_multi(z, y, k)
}

pub fn closed_form_g_uni(head: &ConcatHead<'_>, zk: &[f64], y: usize, k: usize) -> Result<Vec<f64>> {
    head.g_uni(zk, y, k)
}

/// Per-sample suppression factors acting on modality `k`'s gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionRecord {
    pub step: usize,
    pub sample: usize,
    pub label: usize,
    pub factors: Vec<f64>,
}

impl SuppressionRecord {
    /// True when every off-target factor is strictly below one.
    pub fn all_off_target_below_one(&self) -> bool {
        self.factors
            .iter()
            .enumerate()
            .all(|(c, &s)| c == self.label || s < 1.0)
    }

    /// Geometric mean of the off-target factors.
    pub fn geo_mean_off_target(&self) -> f64 {
        let (sum, n) = self
            .factors
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != self.label)
            .fold((0.0, 0usize), |(s, n), (_, f)| (s + f.ln(), n + 1));
        if n == 0 {
            1.0
        } else {
            (sum / n as f64).exp()
        }
    }
}

pub fn suppression_factors(
    head: &ConcatHead<'_>,
    z: &[&[f64]],
    y: usize,
    k: usize,
) -> Result<Vec<f64>> {
    head.suppression_factors(z, y, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientComparison {
    pub step: usize,
    pub sample: usize,
    pub g_uni: Vec<f64>,
    pub g_multi: Vec<f64>,
    pub p_uni: f64,
    pub all_off_target_below_one: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl GradientComparison {
    pub fn norm_uni(&self) -> f64 {
        norm(&self.g_uni)
    }

    pub fn norm_multi(&self) -> f64 {
        norm(&self.g_multi)
    }

    /// `|g_uni| - |g_multi|`.
    pub fn margin(&self) -> f64 {
        self.norm_uni() - self.norm_multi()
    }

    /// Whether the suppression premise holds for this sample.
    pub fn premise(&self) -> bool {
        self.all_off_target_below_one && self.p_uni > 0.0 && self.p_uni < 1.0
    }
}

/// Suppression factors and gradient comparisons for every sample of a set of
/// representations (row `i` of `reps[j]` is `z_i^{m_j}`).
pub fn analyze_samples(
    head: &ConcatHead<'_>,
    reps: &[Tensor],
    labels: &[usize],
    k: usize,
    step: usize,
) -> Result<(Vec<SuppressionRecord>, Vec<GradientComparison>)> {
    let mut records = Vec::with_capacity(labels.len());
    let mut comparisons = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let z: Vec<&[f64]> = reps.iter().map(|r| r.row(i)).collect();
        let factors = head.suppression_factors(&z, y, k)?;
        let record = SuppressionRecord {
            step,
            sample: i,
            label: y,
            factors,
        };
        comparisons.push(GradientComparison {
            step,
            sample: i,
            g_uni: head.g_uni(z[k], y, k)?,
            g_multi: head.g_multi(&z, y, k)?,
            p_uni: head.p_uni(z[k], y, k),
            all_off_target_below_one: record.all_off_target_below_one(),
        });
        records.push(record);
    }
    Ok((records, comparisons))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InequalityVerdict {
    /// Samples on which the premise holds.
    pub checked: usize,
    /// Premise samples violating `|g_uni| > |g_multi| > 0`.
    pub violations: usize,
    pub min_margin: f64,
}

impl InequalityVerdict {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `|g_uni| > |g_multi| > 0` (with `tol` slack) on every premise sample.
pub fn inequality_verdict(comparisons: &[GradientComparison], tol: f64) -> InequalityVerdict {
    let mut v = InequalityVerdict {
        min_margin: f64::INFINITY,
        ..Default::default()
    };
    for c in comparisons.iter().filter(|c| c.premise()) {
        v.checked += 1;
        let m = c.margin();
        v.min_margin = v.min_margin.min(m);
        if !(m > tol && c.norm_multi() > 0.0) {
            v.violations += 1;
        }
    }
    v
}

/// Runs the encoders on `batch` and compares the closed-form gradients for modality `k`.
pub fn check_suppression_inequality(
    model: &MultimodalModel,
    inputs: &[Tensor],
    labels: &[usize],
    k: usize,
    step: usize,
) -> Result<Vec<GradientComparison>> {
    let head = ConcatHead::from_model(model)?;
    let reps = model.representations(inputs)?;
    Ok(analyze_samples(&head, &reps, labels, k, step)?.1)
}
