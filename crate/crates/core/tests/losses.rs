mod common;

use common::{batch, detector, stream, uniform};
use domain_adapt::engine::{Graph, Tensor};
use domain_adapt::losses::{
    combined_loss, mmd_ewm, mmd_fv, supervised_loss, BatchPair, DetectionBatch, LossConfig,
    RegularizerBatches, RegularizerSite, SourceStream,
};
use proptest::prelude::*;

/// `(1/O)·Σ_o Σ_d (mean_b t[b,o,d] − mean_b s[b,o,d])²` with explicit loops.
fn naive_mmd(t: &Tensor, s: &Tensor) -> f64 {
    let (o, d) = (t.shape()[1], t.shape()[2]);
    let mean = |x: &Tensor, oi: usize, di: usize| {
        let b = x.shape()[0];
        let mut acc = 0.0;
        for bi in 0..b {
            acc += x.data()[bi * o * d + oi * d + di];
        }
        acc / b as f64
    };
    let mut total = 0.0;
    for oi in 0..o {
        for di in 0..d {
            let gap = mean(t, oi, di) - mean(s, oi, di);
            total += gap * gap;
        }
    }
    total / o as f64
}

fn ewm_value(t: &Tensor, s: &Tensor) -> f64 {
    let mut g = Graph::new();
    let tv = g.constant(t.clone());
    let sv = g.constant(s.clone());
    let m = mmd_ewm(&mut g, tv, sv).unwrap();
    g.value(m).item().unwrap()
}

fn fv_value(t: &Tensor, s: &Tensor) -> f64 {
    let mut g = Graph::new();
    let tv = g.constant(t.clone());
    let sv = g.constant(s.clone());
    let m = mmd_fv(&mut g, tv, sv).unwrap();
    g.value(m).item().unwrap()
}

fn permute(b: &DetectionBatch, order: &[usize]) -> DetectionBatch {
    let dim = b.inputs.shape()[1];
    let rows: Vec<&[f64]> = order.iter().map(|&i| &b.inputs.data()[i * dim..(i + 1) * dim]).collect();
    DetectionBatch {
        inputs: Tensor::from_rows(&rows).unwrap(),
        box_targets: order.iter().map(|&i| b.box_targets[i]).collect(),
        labels: order.iter().map(|&i| b.labels[i]).collect(),
        confidences: order.iter().map(|&i| b.confidences[i]).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_ewm_matches_loops(bt in 1usize..6, bs in 1usize..6, o in 1usize..4, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream(seed);
        let t = uniform(&mut rng, &[bt, o, d], -2.0, 2.0);
        let s = uniform(&mut rng, &[bs, o, d], -2.0, 2.0);
        let got = ewm_value(&t, &s);
        prop_assert!((got - naive_mmd(&t, &s)).abs() <= 1e-10);
        prop_assert!(got >= 0.0);
        prop_assert_eq!(ewm_value(&t, &t), 0.0);
    }

    #[test]
    fn mmd_fv_matches_loops(bt in 1usize..6, bs in 1usize..6, d in 1usize..8, seed in any::<u64>()) {
        let mut rng = stream(seed);
        let t = uniform(&mut rng, &[bt, d], -2.0, 2.0);
        let s = uniform(&mut rng, &[bs, d], -2.0, 2.0);
        let t3 = Tensor::new(vec![bt, 1, d], t.data().to_vec()).unwrap();
        let s3 = Tensor::new(vec![bs, 1, d], s.data().to_vec()).unwrap();
        let got = fv_value(&t, &s);
        prop_assert!((got - naive_mmd(&t3, &s3)).abs() <= 1e-10);
        // a single output makes the two sites the same formula on m_1
        prop_assert!((ewm_value(&t3, &s3) - got).abs() <= 1e-12);
    }

    #[test]
    fn mmd_zero_iff_means_coincide(b in 1usize..5, d in 1usize..5, shift in 0.01f64..1.0, seed in any::<u64>()) {
        let mut rng = stream(seed);
        let t = uniform(&mut rng, &[b, 1, d], -1.0, 1.0);
        let mut rev: Vec<f64> = t.data().chunks(d).rev().flatten().copied().collect();
        let same_mean = Tensor::new(vec![b, 1, d], rev.clone()).unwrap();
        prop_assert!(ewm_value(&t, &same_mean) < 1e-28);
        rev[0] += shift;
        let moved = Tensor::new(vec![b, 1, d], rev).unwrap();
        prop_assert!(ewm_value(&t, &moved) > 0.0);
    }

    #[test]
    fn supervised_loss_ignores_order(n in 2usize..7, seed in any::<u64>()) {
        let mut rng = stream(seed);
        let model = detector(&[6, 4], seed);
        let mut t = batch(&mut rng, n, 1, Some(0.9));
        t.confidences[0] = Some(0.5);
        let neg = batch(&mut rng, n, 0, None);
        let order: Vec<usize> = (0..n).rev().collect();
        let eval = |t: &DetectionBatch, neg: &DetectionBatch| {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let l = supervised_loss(&mut g, &model, &p, Some(t), Some(neg), 0.8).unwrap();
            g.value(l).item().unwrap()
        };
        let a = eval(&t, &neg);
        let b = eval(&permute(&t, &order), &permute(&neg, &order));
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn alpha_zero_is_supervised_exactly(seed in any::<u64>()) {
        let mut rng = stream(seed);
        let model = detector(&[6, 4], seed);
        let source = detector(&[6, 4], seed ^ 1);
        let t = batch(&mut rng, 4, 1, Some(0.95));
        let neg = batch(&mut rng, 4, 0, None);
        let reg = RegularizerBatches {
            target: uniform(&mut rng, &[5, 64], 0.0, 1.0),
            source: uniform(&mut rng, &[5, 64], 0.0, 1.0),
        };
        let run = |with_reg: bool| {
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let sp = source.bind(&mut g, false);
            let pair = BatchPair {
                target: Some(&t),
                negatives: Some(&neg),
                regularizer: with_reg.then_some(&reg),
            };
            let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
            let terms = combined_loss(&mut g, &model, &p, SourceStream { model: &source, params: &sp }, &pair, &cfg).unwrap();
            g.backward(terms.total).unwrap();
            let grads: Vec<Vec<f64>> = p.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
            for &v in &sp {
                assert!(g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
            }
            (g.value(terms.total).item().unwrap(), grads)
        };
        let (la, ga) = run(true);
        let (lb, gb) = run(false);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
    }
}

#[test]
fn source_stream_collects_no_gradient() {
    let mut rng = stream(3);
    let model = detector(&[6, 4], 1);
    let source = model.clone();
    let t = batch(&mut rng, 4, 1, Some(0.9));
    let reg = RegularizerBatches {
        target: uniform(&mut rng, &[6, 64], 0.0, 1.0),
        source: uniform(&mut rng, &[6, 64], 0.0, 1.0),
    };
    for site in [RegularizerSite::Ewm, RegularizerSite::FeatureVector] {
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let sp = source.bind(&mut g, false);
        let pair = BatchPair {
            target: Some(&t),
            negatives: None,
            regularizer: Some(&reg),
        };
        let cfg = LossConfig {
            site,
            ..LossConfig::default()
        };
        let terms = combined_loss(&mut g, &model, &p, SourceStream { model: &source, params: &sp }, &pair, &cfg).unwrap();
        assert!(g.value(terms.unsupervised.unwrap()).item().unwrap() > 0.0);
        g.backward(terms.total).unwrap();
        assert!(sp.iter().all(|&v| g.grad(v).is_none()));
        assert!(p.iter().any(|&v| g.grad(v).is_some_and(|gr| gr.iter().any(|&x| x != 0.0))));
    }
}

#[test]
fn trainable_source_params_are_rejected() {
    let mut rng = stream(4);
    let model = detector(&[6, 4], 1);
    let reg = RegularizerBatches {
        target: uniform(&mut rng, &[2, 64], 0.0, 1.0),
        source: uniform(&mut rng, &[2, 64], 0.0, 1.0),
    };
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let sp = model.bind(&mut g, true);
    let pair = BatchPair {
        regularizer: Some(&reg),
        ..BatchPair::default()
    };
    let r = combined_loss(&mut g, &model, &p, SourceStream { model: &model, params: &sp }, &pair, &LossConfig::default());
    assert!(matches!(r, Err(domain_adapt::Error::Contract(_))));
}

#[test]
fn fresh_copy_matches_source_outputs() {
    let mut rng = stream(5);
    let source = detector(&[8, 4], 7);
    let target = source.clone();
    let x = uniform(&mut rng, &[10, 64], -1.0, 2.0);
    let a = source.predict(&x).unwrap();
    let b = target.predict(&x).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.boxes, b.boxes);
    assert!(a.boxes.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}
