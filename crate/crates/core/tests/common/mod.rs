#![allow(dead_code)]

use domain_adapt::adapt::{train_source, SourceTrainConfig};
use domain_adapt::engine::Tensor;
use domain_adapt::losses::DetectionBatch;
use domain_adapt::network::{build_detector, DetectorConfig, Model};
use domain_adapt::rng::{self, Rng};
use domain_adapt::synthdata::{gen_detection_dataset, Domain, DomainParams, Scene};
use rand::Rng as _;

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn detector(hidden: &[usize], seed: u64) -> Model {
    let arch = build_detector(&DetectorConfig {
        window: 8,
        hidden: hidden.to_vec(),
    })
    .unwrap()
    .arch()
    .clone();
    Model::initialized(arch, seed).unwrap()
}

/// Random windows with the given label; positives get a box and, when
/// `confidence` is set, a pseudo-label confidence.
pub fn batch(rng: &mut Rng, n: usize, label: u8, confidence: Option<f64>) -> DetectionBatch {
    let inputs = uniform(rng, &[n, 64], 0.0, 1.0);
    let box_targets = (0..n)
        .map(|_| {
            (label == 1).then(|| {
                let x = rng.random_range(0.0..0.4);
                let y = rng.random_range(0.0..0.4);
                [x, y, rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)]
            })
        })
        .collect();
    DetectionBatch {
        inputs,
        box_targets,
        labels: vec![label; n],
        confidences: vec![confidence; n],
    }
}

pub fn source_params() -> DomainParams {
    DomainParams {
        image_size: 32,
        background_level: 0.2,
        background_noise_sd: 0.05,
        blob_contrast: 0.6,
        blob_radius_range: (2.8, 3.4),
        object_count_range: (1, 3),
        distractor_rate: 0.5,
    }
}

pub fn target_params() -> DomainParams {
    DomainParams {
        blob_contrast: 0.4,
        ..source_params()
    }
}

pub fn scenes(params: &DomainParams, n: usize, seed: u64, domain: Domain) -> Vec<Scene> {
    gen_detection_dataset(params, n, seed, domain).unwrap()
}

/// A quickly trained source detector that already fires on target heads.
pub fn trained_source(seed: u64) -> (Model, Vec<Scene>) {
    let source = scenes(&source_params(), 60, seed, Domain::Source);
    let mut model = detector(&[32, 16], seed);
    let cfg = SourceTrainConfig {
        epochs: 40,
        seed,
        ..SourceTrainConfig::default()
    };
    train_source(&mut model, &source, &cfg).unwrap();
    (model, source)
}

pub fn stream(seed: u64) -> Rng {
    rng::stream(seed, "tests", 0)
}
