//! Detection scoring: IoU matching above 50%, precision / recall / F1,
//! confidence-swept PR curves, NMS, and classification accuracy.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::network::Model;
use crate::synthdata::LabeledSet;

pub const MATCH_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    if !a.has_positive_extent() || !b.has_positive_extent() {
        return Err(Error::Contract(format!(
            "iou needs positive extents, got {a:?} and {b:?}"
        )));
    }
    Ok(a.iou(b))
}

/// Descending confidence; ties go to the smaller `x`, then the smaller `y`.
fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
}

/// Greedy suppression: a detection is dropped when its IoU with an already
/// kept, higher-ranked detection is at least `iou_thresh`.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(detections, iou_thresh)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// Indices of the detections kept by [`nms`], in rank order.
pub fn nms_indices(detections: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence(&detections[a], &detections[b]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i].bbox;
        if kept.iter().all(|&k| detections[k].bbox.iou(d) < iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// How repeated detections of one ground-truth box are scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Repeats count as the same correct prediction: neither tp nor fp.
    #[default]
    MergeDuplicates,
    /// PASCAL VOC: every repeat is a false positive.
    VocStrict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub detection: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub duplicates: usize,
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    /// Adds another image's counts; pairs are not carried over.
    pub fn absorb(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.duplicates += other.duplicates;
    }
}

/// Greedy matching in descending confidence. Each detection is compared with
/// the ground-truth box of highest IoU; a match needs IoU strictly above
/// `iou_thresh`. The first detection on a box is a true positive, later ones
/// are duplicates.
pub fn match_detections(
    detections: &[Detection],
    gt: &[BoundingBox],
    iou_thresh: f64,
    policy: MatchPolicy,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_confidence(&detections[a], &detections[b]));
    let mut taken = vec![false; gt.len()];
    let mut out = MatchResult::default();
    for di in order {
        let d = &detections[di];
        let best = gt
            .iter()
            .enumerate()
            .map(|(gi, g)| (gi, d.bbox.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((gi, v)) if v > iou_thresh => {
                if taken[gi] {
                    out.duplicates += 1;
                    if policy == MatchPolicy::VocStrict {
                        out.fp += 1;
                    }
                } else {
                    taken[gi] = true;
                    out.tp += 1;
                    out.pairs.push(MatchedPair {
                        detection: di,
                        gt: gi,
                        iou: v,
                    });
                }
            }
            _ => out.fp += 1,
        }
    }
    out.fn_ = gt.len() - out.tp;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision over tp+fp (duplicates only counted when the policy made them
/// false positives), recall over tp+fn; empty denominators give 0.
pub fn precision_recall_f1(m: &MatchResult) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(m.tp, m.tp + m.fp);
    let recall = ratio(m.tp, m.tp + m.fn_);
    Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub gt: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// Ascending threshold.
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    /// Highest-F1 point; ties resolve to the lowest threshold.
    pub fn best_f1(&self) -> PrPoint {
        let mut best = self.points[0];
        for p in &self.points[1..] {
            if p.f1 > best.f1 {
                best = *p;
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for p in &self.points {
            writeln!(
                s,
                "{:.4},{:.6},{:.6},{:.6}",
                p.threshold, p.precision, p.recall, p.f1
            )
            .unwrap();
        }
        s
    }
}

/// Scores all images at `n_thresholds` evenly spaced confidence cutoffs in
/// `[0, 1]`; a detection survives a cutoff when its confidence is at least
/// the cutoff.
pub fn pr_curve(images: &[ImageResult], n_thresholds: usize, policy: MatchPolicy) -> Result<PrCurve> {
    if n_thresholds < 2 {
        return Err(Error::Contract("a PR curve needs at least 2 thresholds".into()));
    }
    let points = (0..n_thresholds)
        .map(|k| {
            let t = k as f64 / (n_thresholds - 1) as f64;
            let mut total = MatchResult::default();
            for img in images {
                let kept: Vec<Detection> = img
                    .detections
                    .iter()
                    .filter(|d| d.confidence >= t)
                    .copied()
                    .collect();
                total.absorb(&match_detections(&kept, &img.gt, MATCH_IOU, policy));
            }
            let prf = precision_recall_f1(&total);
            PrPoint {
                threshold: t,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
            }
        })
        .collect();
    Ok(PrCurve { points })
}

/// Fraction of points whose arg-max logit equals the label.
pub fn classification_accuracy(model: &Model, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let logits = model.predict(&set.all_rows()?)?.logits;
    let k = logits.shape()[1];
    let correct = (0..set.len())
        .filter(|&i| argmax(&logits.data()[i * k..(i + 1) * k]) == set.labels[i])
        .count();
    Ok(correct as f64 / set.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, s: f64, c: f64) -> Detection {
        Detection {
            bbox: BoundingBox::new(x, y, s, s),
            confidence: c,
        }
    }

    #[test]
    fn iou_contract() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BoundingBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        assert!(iou(&a, &BoundingBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn nms_cases() {
        let one = vec![det(0.0, 0.0, 5.0, 0.4)];
        assert_eq!(nms(&one, NMS_IOU), one);
        let pair = vec![det(1.0, 1.0, 5.0, 0.8), det(1.0, 1.0, 5.0, 0.9)];
        assert_eq!(nms(&pair, NMS_IOU), vec![pair[1]]);
        let apart = vec![det(0.0, 0.0, 4.0, 0.5), det(10.0, 10.0, 4.0, 0.6)];
        assert_eq!(nms(&apart, NMS_IOU).len(), 2);
        // equal confidence: smaller x wins
        let tie = vec![det(2.0, 0.0, 5.0, 0.7), det(1.0, 0.0, 5.0, 0.7)];
        assert_eq!(nms(&tie, NMS_IOU), vec![tie[1]]);
    }

    #[test]
    fn matching_rules() {
        let gt = vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0), BoundingBox::new(20.0, 20.0, 6.0, 6.0)];
        let perfect = vec![det(0.0, 0.0, 10.0, 0.9), det(20.0, 20.0, 6.0, 0.8)];
        let m = match_detections(&perfect, &gt, MATCH_IOU, MatchPolicy::MergeDuplicates);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));

        let twice = vec![det(0.0, 0.0, 10.0, 0.9), det(1.0, 0.0, 10.0, 0.8)];
        let m = match_detections(&twice, &gt[..1], MATCH_IOU, MatchPolicy::MergeDuplicates);
        assert_eq!((m.tp, m.fp, m.duplicates), (1, 0, 1));
        let strict = match_detections(&twice, &gt[..1], MATCH_IOU, MatchPolicy::VocStrict);
        assert_eq!((strict.tp, strict.fp, strict.duplicates), (1, 1, 1));

        // IoU exactly 0.5 must not match: 10x10 vs 10x5 inside it.
        let half = vec![Detection {
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 5.0),
            confidence: 1.0,
        }];
        assert_eq!(gt[0].iou(&half[0].bbox), 0.5);
        let m = match_detections(&half, &gt[..1], MATCH_IOU, MatchPolicy::MergeDuplicates);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn prf_edge_cases() {
        let none = MatchResult::default();
        assert_eq!(precision_recall_f1(&none).f1, 0.0);
        let full = MatchResult {
            tp: 3,
            ..Default::default()
        };
        let prf = precision_recall_f1(&full);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn curve_is_monotone_and_ends_empty() {
        let gt = vec![BoundingBox::new(0.0, 0.0, 8.0, 8.0), BoundingBox::new(16.0, 16.0, 8.0, 8.0)];
        let images = vec![ImageResult {
            detections: vec![
                det(0.0, 0.0, 8.0, 0.95),
                det(16.5, 16.0, 8.0, 0.4),
                det(8.0, 20.0, 4.0, 0.6),
            ],
            gt,
        }];
        let c = pr_curve(&images, 11, MatchPolicy::MergeDuplicates).unwrap();
        for w in c.points.windows(2) {
            assert!(w[1].recall <= w[0].recall);
        }
        assert_eq!(c.points.last().unwrap().recall, 0.0);
        let best = c.best_f1();
        assert!(c.points.iter().all(|p| p.f1 <= best.f1));
        assert!(c.to_csv().starts_with("threshold,precision,recall,f1\n"));
        assert!(pr_curve(&images, 1, MatchPolicy::MergeDuplicates).is_err());
    }
}
