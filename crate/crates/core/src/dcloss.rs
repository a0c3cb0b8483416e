//! The decoupling classifier loss.
//!
//! ROIs assigned to a foreground class go through the *positive head*, an
//! ordinary softmax cross-entropy. ROIs assigned to background go through the
//! *negative head*: their logits are first multiplied by the image-level label
//! mask `m` (1 for each class that has a labeled instance in the image, and
//! always 1 for background), and the cross-entropy against background is taken
//! on the softmax of the masked vector.
//!
//! Masking is multiplicative: a masked-out class keeps a logit of exactly 0 and
//! therefore still contributes `exp(0) = 1` to the softmax denominator. It is
//! not removed from the distribution. The logit gradient of a masked class is
//! exactly zero, so background supervision from an image never pushes down a
//! class that image was not annotated for.
//!
//! The per-image loss is `(Σ positive + Σ negative) / N`, where `N` counts all
//! sampled ROIs of the image regardless of head.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_from_logits, stable_softmax, LogitVector};

/// Image-level label mask over `C` foreground classes plus background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask(Vec<bool>);

impl LabelMask {
    /// Builds a mask from 0/1 entries; the last entry (background) must be 1.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::invalid(format!(
                "mask needs at least 2 entries, got {}",
                bits.len()
            )));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::invalid(format!(
                "mask entry {i} is {}, expected 0 or 1",
                bits[i]
            )));
        }
        if bits[bits.len() - 1] != 1 {
            return Err(Error::invalid("mask background entry must be 1"));
        }
        Ok(LabelMask(bits.iter().map(|&b| b == 1).collect()))
    }

    /// Mask with every class enabled; reduces the negative head to plain CE.
    pub fn all_ones(num_fg_classes: usize) -> Self {
        LabelMask(vec![true; num_fg_classes + 1])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_fg_classes(&self) -> usize {
        self.0.len() - 1
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn is_all_ones(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

/// Mask for an image whose labeled instances belong to `labeled_classes`.
pub fn build_image_mask<I>(labeled_classes: I, num_fg_classes: usize) -> Result<LabelMask>
where
    I: IntoIterator<Item = usize>,
{
    if num_fg_classes == 0 {
        return Err(Error::invalid("need at least one foreground class"));
    }
    let mut bits = vec![false; num_fg_classes + 1];
    for c in labeled_classes {
        if c >= num_fg_classes {
            return Err(Error::invalid(format!(
                "labeled class {c} out of range for {num_fg_classes} foreground classes"
            )));
        }
        bits[c] = true;
    }
    bits[num_fg_classes] = true;
    Ok(LabelMask(bits))
}

/// The sampled ROIs of one image together with that image's label mask.
#[derive(Debug, Clone)]
pub struct RoiClassificationBatch {
    logits: Vec<LogitVector>,
    labels: Vec<usize>,
    mask: LabelMask,
}

impl RoiClassificationBatch {
    pub fn new(logits: Vec<LogitVector>, labels: Vec<usize>, mask: LabelMask) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("ROI batch is empty"));
        }
        if logits.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} logit rows but {} labels",
                logits.len(),
                labels.len()
            )));
        }
        let width = mask.len();
        if let Some(i) = logits.iter().position(|x| x.len() != width) {
            return Err(Error::invalid(format!(
                "logit row {i} has {} entries, mask has {width}",
                logits[i].len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y >= width) {
            return Err(Error::IndexOutOfRange {
                index: labels[i],
                len: width,
            });
        }
        Ok(RoiClassificationBatch { logits, labels, mask })
    }

    pub fn logits(&self) -> &[LogitVector] {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask(&self) -> &LabelMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn background(&self) -> usize {
        self.mask.len() - 1
    }

    /// Distinct foreground labels among the positives.
    pub fn positive_classes(&self) -> BTreeSet<usize> {
        let bg = self.background();
        self.labels.iter().copied().filter(|&y| y != bg).collect()
    }
}

/// Per-image loss split by head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub positive_sum: f64,
    pub negative_sum: f64,
    pub total: f64,
    pub n: usize,
}

fn check_foreground_target(x: &[f64], target: usize) -> Result<()> {
    let bg = x.len().saturating_sub(1);
    if target > bg {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: x.len(),
        });
    }
    if target == bg {
        return Err(Error::invalid(
            "positive head target must be a foreground class, got background",
        ));
    }
    Ok(())
}

fn check_mask_width(x: &[f64], m: &LabelMask) -> Result<()> {
    if x.len() != m.len() {
        return Err(Error::invalid(format!(
            "logit length {} does not match mask length {}",
            x.len(),
            m.len()
        )));
    }
    Ok(())
}

/// Cross-entropy of a foreground-assigned ROI; the mask is never applied.
pub fn positive_head_loss(x: &[f64], target: usize) -> Result<f64> {
    check_foreground_target(x, target)?;
    cross_entropy_from_logits(x, target)
}

/// `x̄_i = m_i · x_i`; masked entries become exactly 0.
pub fn masked_logits(x: &[f64], m: &LabelMask) -> Result<Vec<f64>> {
    check_mask_width(x, m)?;
    Ok(x.iter()
        .zip(&m.0)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect())
}

/// `-log p̄_C` where `p̄ = softmax(m ⊙ x)`.
pub fn negative_head_loss(x: &[f64], m: &LabelMask) -> Result<f64> {
    let masked = masked_logits(x, m)?;
    cross_entropy_from_logits(&masked, m.len() - 1)
}

/// `p̂ − onehot(target)`.
pub fn positive_head_grad_logits(x: &[f64], target: usize) -> Result<Vec<f64>> {
    check_foreground_target(x, target)?;
    let mut g = stable_softmax(x)?.into_inner();
    g[target] -= 1.0;
    Ok(g)
}

/// `m ⊙ (p̄ − onehot(C))`; zero wherever `m_i = 0`.
pub fn negative_head_grad_logits(x: &[f64], m: &LabelMask) -> Result<Vec<f64>> {
    let masked = masked_logits(x, m)?;
    let p = stable_softmax(&masked)?.into_inner();
    let bg = p.len() - 1;
    Ok(p.into_iter()
        .enumerate()
        .map(|(i, pi)| {
            if !m.0[i] {
                0.0
            } else if i == bg {
                pi - 1.0
            } else {
                pi
            }
        })
        .collect())
}

/// Decoupled loss of one image, normalized by its total ROI count.
pub fn dc_loss_image(batch: &RoiClassificationBatch) -> Result<LossBreakdown> {
    let bg = batch.background();
    let mut positive_sum = 0.0;
    let mut negative_sum = 0.0;
    for (x, &y) in batch.logits.iter().zip(&batch.labels) {
        if y == bg {
            negative_sum += negative_head_loss(x.as_slice(), &batch.mask)?;
        } else {
            positive_sum += positive_head_loss(x.as_slice(), y)?;
        }
    }
    let n = batch.len();
    Ok(LossBreakdown {
        positive_sum,
        negative_sum,
        total: (positive_sum + negative_sum) / n as f64,
        n,
    })
}

/// Mean softmax cross-entropy over all ROIs; ignores the mask.
pub fn standard_ce_image(batch: &RoiClassificationBatch) -> Result<f64> {
    let mut sum = 0.0;
    for (x, &y) in batch.logits.iter().zip(&batch.labels) {
        sum += cross_entropy_from_logits(x.as_slice(), y)?;
    }
    Ok(sum / batch.len() as f64)
}
