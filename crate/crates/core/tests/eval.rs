use domain_adapt::eval::{
    f1_score, match_detections, nms, pr_curve, Detection, ImageResult, MatchPolicy, MATCH_IOU,
};
use domain_adapt::geometry::BoundingBox;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..20.0, 0.0f64..20.0, 0.5f64..8.0, 0.5f64..8.0).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
}

fn policy() -> impl Strategy<Value = MatchPolicy> {
    prop_oneof![Just(MatchPolicy::MergeDuplicates), Just(MatchPolicy::VocStrict)]
}

/// Detections with distinct `x`, so the documented tie-break fixes their rank.
fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((boxes(), prop_oneof![Just(0.5), Just(0.9), 0.0f64..1.0]), 0..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (mut b, c))| {
                b.x += i as f64 * 1e-6;
                Detection { bbox: b, confidence: c }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn iou_laws(a in boxes(), b in boxes()) {
        let ab = a.iou(&b);
        prop_assert_eq!(ab, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matching_counts(dets in detections(10), gt in prop::collection::vec(boxes(), 0..6), p in policy()) {
        let m = match_detections(&dets, &gt, MATCH_IOU, p);
        prop_assert_eq!(m.tp + m.fn_, gt.len());
        let extra = if p == MatchPolicy::VocStrict { 0 } else { m.duplicates };
        prop_assert_eq!(m.tp + m.fp + extra, dets.len());
    }

    #[test]
    fn matching_ignores_input_order(dets in detections(10), gt in prop::collection::vec(boxes(), 0..6), p in policy()) {
        let a = match_detections(&dets, &gt, MATCH_IOU, p);
        let rev: Vec<Detection> = dets.iter().rev().copied().collect();
        let b = match_detections(&rev, &gt, MATCH_IOU, p);
        prop_assert_eq!((a.tp, a.fp, a.fn_, a.duplicates), (b.tp, b.fp, b.fn_, b.duplicates));
    }

    #[test]
    fn recall_never_rises_with_threshold(images in prop::collection::vec((detections(6), prop::collection::vec(boxes(), 1..4)), 1..4), p in policy()) {
        let images: Vec<ImageResult> = images.into_iter().map(|(detections, gt)| ImageResult { detections, gt }).collect();
        let curve = pr_curve(&images, 21, p).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall);
        }
        let best = curve.best_f1();
        prop_assert!(curve.points.iter().all(|q| q.f1 <= best.f1));
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(dets in detections(12)) {
        let kept = nms(&dets, 0.3);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) < 0.3);
            }
        }
    }
}

#[test]
fn table_one_f1_values() {
    // (1 - precision, recall, published F1)
    let rows = [
        (0.101, 0.187, 0.309),
        (0.015, 0.683, 0.807),
        (0.035, 0.412, 0.577),
        (0.245, 0.408, 0.530),
        (0.632, 0.905, 0.524),
        (0.176, 0.778, 0.800),
        (0.140, 0.530, 0.656),
        (0.006, 0.811, 0.893),
        (0.097, 0.778, 0.836),
    ];
    for (miss, r, f1) in rows {
        let got = f1_score(1.0 - miss, r);
        assert!((got - f1).abs() <= 1e-3, "({miss}, {r}) gives {got}, expected {f1}");
    }
}
