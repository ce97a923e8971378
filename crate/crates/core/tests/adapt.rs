mod common;

use common::{scenes, target_params, trained_source};
use domain_adapt::adapt::{
    adapt_iteration, run_adaptation, AdaptConfig, DetectionData, MethodVariant, SourcePool,
};
use domain_adapt::losses::RegularizerSite;
use domain_adapt::network::Model;
use domain_adapt::synthdata::Domain;

fn setup(seed: u64) -> (Model, DetectionData) {
    let (model, source) = trained_source(seed);
    let data = DetectionData {
        source,
        target_pool: scenes(&target_params(), 12, seed, Domain::Target),
        eval: domain_adapt::synthdata::gen_detection_range(&target_params(), 12, 8, seed, Domain::Target).unwrap(),
    };
    (model, data)
}

fn cfg(method: MethodVariant, seed: u64) -> AdaptConfig {
    AdaptConfig {
        method,
        seed,
        n_iterations: 2,
        steps_per_iteration: 12,
        batch_size: 8,
        target_images_per_iter: 6,
        source_images_per_iter: 20,
        eval_thresholds: 11,
        ..AdaptConfig::default()
    }
}

fn max_weight_gap(a: &Model, b: &Model) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn source_model_is_untouched_and_runs_repeat() {
    let (model, data) = setup(11);
    let snapshot = model.weights().to_bytes();
    let c = cfg(MethodVariant::MixedPlusEwm, 11);
    let a = run_adaptation(&c, &data, &model).unwrap();
    assert_eq!(model.weights().to_bytes(), snapshot);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.records.iter().any(|r| r.n_pseudo > 0));
    assert_ne!(a.model, model);
    let b = run_adaptation(&c, &data, &model).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.model, b.model);
}

#[test]
fn pseudo_labels_and_negatives_per_iteration() {
    let (source, data) = setup(12);
    let pool = SourcePool::new(&data.source, &Default::default()).unwrap();
    for method in [MethodVariant::MixedPlusEwm, MethodVariant::TargetPlusEwm] {
        let c = AdaptConfig {
            tau_annotate: 0.6,
            ..cfg(method, 12)
        };
        let mut model = source.clone();
        let mut total = 0;
        for it in 0..2 {
            let out = adapt_iteration(&mut model, &source, &data.target_pool, &pool, &c, it).unwrap();
            assert!(out.pseudo.iter().all(|p| p.confidence() >= c.tau_annotate));
            let expected = if method.uses_negatives() { out.pseudo.len() } else { 0 };
            assert_eq!(out.n_negatives, expected);
            total += out.pseudo.len();
        }
        assert!(total > 0);
    }
}

#[test]
fn zero_alpha_matches_no_regularizer_step_for_step() {
    let (model, data) = setup(13);
    let with = AdaptConfig {
        alpha: 0.0,
        ..cfg(MethodVariant::MixedPlusEwm, 13)
    };
    let without = AdaptConfig {
        site_override: Some(RegularizerSite::None),
        ..with.clone()
    };
    let a = run_adaptation(&with, &data, &model).unwrap();
    let b = run_adaptation(&without, &data, &model).unwrap();
    assert!(max_weight_gap(&a.model, &b.model) <= 1e-12);
    for (x, y) in a.history.records.iter().zip(&b.history.records) {
        assert_eq!((x.n_pseudo, x.precision, x.recall), (y.n_pseudo, y.precision, y.recall));
        assert!((x.loss_s - y.loss_s).abs() <= 1e-12);
    }
}

#[test]
fn one_iteration_is_one_adapt_iteration() {
    let (source, data) = setup(14);
    let c = AdaptConfig {
        n_iterations: 1,
        target_images_per_iter: data.target_pool.len(),
        ..cfg(MethodVariant::MixedPlusFv, 14)
    };
    let run = run_adaptation(&c, &data, &source).unwrap();
    let pool = SourcePool::new(&data.source, &c.sweep).unwrap();
    let mut manual = source.clone();
    let out = adapt_iteration(&mut manual, &source, &data.target_pool, &pool, &c, 0).unwrap();
    assert_eq!(run.model, manual);
    assert_eq!(run.history.records[0].n_pseudo, out.pseudo.len());
}
