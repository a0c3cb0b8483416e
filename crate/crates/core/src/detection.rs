//! Box geometry, IoU-based ROI label assignment and foreground-fraction ROI
//! sampling.
//!
//! Assignment only sees *labeled* ground truth. A proposal sitting on an
//! unlabeled instance is therefore assigned background, which is how missing
//! annotations turn into noisy negatives.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoU threshold for foreground assignment (inclusive).
pub const DEFAULT_FG_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_POSITIVE_FRACTION: f64 = 0.25;

/// Axis-aligned box in corner form, continuous coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Box from `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("box has non-finite coordinates: {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::invalid(format!("box corners out of order: {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamps all corners into `[lo, hi]`.
    pub fn clip(&self, lo: f64, hi: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(lo, hi),
            y1: self.y1.clamp(lo, hi),
            x2: self.x2.clamp(lo, hi),
            y2: self.y2.clamp(lo, hi),
        }
    }

    fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 for disjoint boxes or a zero-area union.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A ground-truth object; `labeled` is false when the few-shot annotation
/// omits it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub bbox: BBox,
    pub category: usize,
    pub labeled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAssignment {
    pub proposal_index: usize,
    /// Foreground class, or `C` for background.
    pub assigned_label: usize,
    pub max_iou: f64,
    /// Index into the ground-truth slice of the best labeled match, if any.
    pub matched_gt: Option<usize>,
}

impl RoiAssignment {
    pub fn is_positive(&self, num_fg_classes: usize) -> bool {
        self.assigned_label < num_fg_classes
    }
}

/// Assigns each proposal the class of its best-overlapping labeled ground
/// truth when that IoU reaches `fg_threshold`, background otherwise.
///
/// Ties in IoU go to the lower ground-truth index. There is no rescue rule
/// for ground truth that no proposal matches.
pub fn assign_labels(
    proposals: &[BBox],
    gts: &[GroundTruthInstance],
    num_fg_classes: usize,
    fg_threshold: f64,
) -> Result<Vec<RoiAssignment>> {
    if !(fg_threshold > 0.0 && fg_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "fg_threshold must lie in (0, 1], got {fg_threshold}"
        )));
    }
    for (i, gt) in gts.iter().enumerate() {
        gt.bbox.validate()?;
        if gt.category >= num_fg_classes {
            return Err(Error::invalid(format!(
                "ground truth {i} has category {} but only {num_fg_classes} classes exist",
                gt.category
            )));
        }
    }
    proposals
        .iter()
        .enumerate()
        .map(|(proposal_index, p)| {
            p.validate()?;
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts.iter().enumerate().filter(|(_, g)| g.labeled) {
                let v = iou_unchecked(p, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            let (matched_gt, max_iou) = match best {
                Some((gi, v)) => (Some(gi), v),
                None => (None, 0.0),
            };
            let positive = max_iou >= fg_threshold;
            Ok(RoiAssignment {
                proposal_index,
                assigned_label: if positive {
                    gts[matched_gt.unwrap()].category
                } else {
                    num_fg_classes
                },
                max_iou,
                matched_gt: if positive { matched_gt } else { None },
            })
        })
        .collect()
}

/// Picks up to `round(positive_fraction · batch_size)` positives uniformly
/// without replacement and fills the rest of the batch with negatives.
///
/// Returns indices into `assignments`, positives first.
pub fn sample_rois<R: Rng + ?Sized>(
    assignments: &[RoiAssignment],
    num_fg_classes: usize,
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if assignments.is_empty() {
        return Err(Error::invalid("no ROI assignments to sample from"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "positive_fraction must lie in (0, 1), got {positive_fraction}"
        )));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..assignments.len()).partition(|&i| assignments[i].is_positive(num_fg_classes));

    let quota = (positive_fraction * batch_size as f64).round() as usize;
    let n_pos = pos.len().min(quota);
    let n_neg = neg.len().min(batch_size - n_pos);

    let mut out = Vec::with_capacity(n_pos + n_neg);
    out.extend(sample(rng, pos.len(), n_pos).into_iter().map(|i| pos[i]));
    out.extend(sample(rng, neg.len(), n_neg).into_iter().map(|i| neg[i]));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(bbox: BBox, category: usize, labeled: bool) -> GroundTruthInstance {
        GroundTruthInstance {
            bbox,
            category,
            labeled,
        }
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        assert!((iou(&a, &b(5.0, 5.0, 15.0, 15.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_inverted_boxes() {
        let bad = BBox {
            x1: 2.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        assert!(iou(&bad, &b(0.0, 0.0, 1.0, 1.0)).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn assignment_examples() {
        let g = b(0.2, 0.2, 0.4, 0.4);
        let out = assign_labels(&[g], &[gt(g, 3, true)], 5, 0.5).unwrap();
        assert_eq!(out[0].assigned_label, 3);
        assert_eq!(out[0].max_iou, 1.0);
        assert_eq!(out[0].matched_gt, Some(0));

        // IoU 1 against an unlabeled instance only: background.
        let out = assign_labels(&[g], &[gt(g, 3, false)], 5, 0.5).unwrap();
        assert_eq!(out[0].assigned_label, 5);
        assert_eq!(out[0].max_iou, 0.0);
        assert_eq!(out[0].matched_gt, None);

        // [0,0,1,1] vs [0,0,2,1] has IoU exactly 0.5.
        let out = assign_labels(&[b(0.0, 0.0, 2.0, 1.0)], &[gt(b(0.0, 0.0, 1.0, 1.0), 1, true)], 2, 0.5).unwrap();
        assert_eq!(out[0].max_iou, 0.5);
        assert_eq!(out[0].assigned_label, 1);

        assert!(assign_labels(&[], &[gt(g, 0, true)], 1, 0.5).unwrap().is_empty());
        assert!(assign_labels(&[g], &[], 1, 0.0).is_err());
        assert!(assign_labels(&[g], &[gt(g, 2, true)], 2, 0.5).is_err());
    }

    fn fake_assignments(pos: usize, neg: usize) -> Vec<RoiAssignment> {
        (0..pos + neg)
            .map(|i| RoiAssignment {
                proposal_index: i,
                assigned_label: if i < pos { 0 } else { 1 },
                max_iou: if i < pos { 0.9 } else { 0.1 },
                matched_gt: if i < pos { Some(0) } else { None },
            })
            .collect()
    }

    #[test]
    fn sampling_quotas() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = fake_assignments(100, 900);
        let idx = sample_rois(&a, 1, 128, 0.25, &mut rng).unwrap();
        assert_eq!(idx.len(), 128);
        assert_eq!(idx.iter().filter(|&&i| a[i].is_positive(1)).count(), 32);

        let a = fake_assignments(5, 900);
        let idx = sample_rois(&a, 1, 128, 0.25, &mut rng).unwrap();
        assert_eq!(idx.iter().filter(|&&i| a[i].is_positive(1)).count(), 5);
        assert_eq!(idx.len(), 128);

        let a = fake_assignments(3, 10);
        assert_eq!(sample_rois(&a, 1, 128, 0.25, &mut rng).unwrap().len(), 13);
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = fake_assignments(100, 900);
        let run = |seed| sample_rois(&a, 1, 128, 0.25, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn sampling_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_rois(&[], 1, 128, 0.25, &mut rng).is_err());
        let a = fake_assignments(1, 1);
        assert!(sample_rois(&a, 1, 0, 0.25, &mut rng).is_err());
        assert!(sample_rois(&a, 1, 8, 1.0, &mut rng).is_err());
        assert!(sample_rois(&a, 1, 8, 0.0, &mut rng).is_err());
    }

    fn unit_box() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.5, 0.0f64..0.5).prop_map(|(x, y, w, h)| BBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        })
    }

    fn gt_list() -> impl Strategy<Value = Vec<GroundTruthInstance>> {
        prop::collection::vec((unit_box(), 0usize..4, any::<bool>()), 0..6).prop_map(|v| {
            v.into_iter()
                .map(|(bbox, category, labeled)| gt(bbox, category, labeled))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn iou_properties(a in unit_box(), c in unit_box()) {
            let v = iou(&a, &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a).unwrap());
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn assignment_label_iff_threshold(
            proposals in prop::collection::vec(unit_box(), 0..20),
            gts in gt_list(),
            thr in 0.05f64..1.0,
        ) {
            for a in assign_labels(&proposals, &gts, 4, thr).unwrap() {
                prop_assert_eq!(a.assigned_label < 4, a.max_iou >= thr);
                if a.assigned_label < 4 {
                    prop_assert!(a.matched_gt.is_some());
                }
            }
        }

        #[test]
        fn hiding_an_instance_is_monotone(
            proposals in prop::collection::vec(unit_box(), 1..20),
            gts in gt_list(),
            hide in 0usize..6,
        ) {
            let before = assign_labels(&proposals, &gts, 4, 0.5).unwrap();
            let mut hidden = gts.clone();
            if let Some(g) = hidden.get_mut(hide) {
                g.labeled = false;
            }
            let after = assign_labels(&proposals, &hidden, 4, 0.5).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert!(y.max_iou <= x.max_iou);
                if y.assigned_label < 4 {
                    prop_assert!(x.assigned_label < 4);
                }
            }
        }

        #[test]
        fn sample_size_bounds(pos in 0usize..50, neg in 0usize..300, batch in 1usize..200, seed in any::<u64>()) {
            prop_assume!(pos + neg > 0);
            let a = fake_assignments(pos, neg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = sample_rois(&a, 1, batch, 0.25, &mut rng).unwrap();
            prop_assert!(idx.len() <= batch);
            let npos = idx.iter().filter(|&&i| a[i].is_positive(1)).count();
            prop_assert!(npos <= (0.25 * batch as f64).round() as usize);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), idx.len());
        }
    }
}
