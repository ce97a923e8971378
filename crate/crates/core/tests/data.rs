mod common;

use common::{source_params, target_params};
use domain_adapt::detector::SweepConfig;
use domain_adapt::synthdata::{extract_windows, gen_detection_dataset, gen_detection_range, Domain};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generation_is_pure(seed in any::<u64>()) {
        let a = gen_detection_dataset(&target_params(), 4, seed, Domain::Target).unwrap();
        let b = gen_detection_dataset(&target_params(), 4, seed, Domain::Target).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn positive_boxes_round_trip(seed in any::<u64>()) {
        let s = SweepConfig::default();
        for scene in gen_detection_dataset(&source_params(), 3, seed, Domain::Source).unwrap() {
            let gts = scene.gt_boxes();
            for w in extract_windows(&scene, s.window, s.stride, s.pos_iou, s.neg_iou) {
                if w.label == 1 {
                    let b = w.window.denormalize(&w.box_target.unwrap());
                    let best = gts.iter().map(|g| g.iou(&b)).fold(0.0, f64::max);
                    prop_assert!(best >= s.pos_iou, "{best}");
                } else {
                    prop_assert!(w.box_target.is_none());
                }
            }
        }
    }

    #[test]
    fn ranges_are_prefix_consistent(seed in any::<u64>(), start in 0usize..5) {
        let all = gen_detection_dataset(&target_params(), 8, seed, Domain::Target).unwrap();
        let part = gen_detection_range(&target_params(), start, 3, seed, Domain::Target).unwrap();
        prop_assert_eq!(&all[start..start + 3], &part[..]);
    }
}

#[test]
fn evaluation_split_never_overlaps_the_pool() {
    let pool = gen_detection_range(&target_params(), 0, 30, 9, Domain::Target).unwrap();
    let eval = gen_detection_range(&target_params(), 30, 20, 9, Domain::Target).unwrap();
    for e in &eval {
        assert!(pool.iter().all(|p| p.pixels != e.pixels));
    }
}
