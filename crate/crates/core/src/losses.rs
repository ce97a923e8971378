//! Target-stream objective: a confidence-gated supervised loss over
//! auto-annotated positives and source negatives, plus a mean-embedding MMD
//! penalty between the target model and the frozen source model, placed
//! either on the element-wise-multiply layer or on the feature vector.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::synthdata::WindowSample;

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_TAU: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerSite {
    None,
    Ewm,
    FeatureVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau_gate: f64,
    pub site: RegularizerSite,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            tau_gate: DEFAULT_TAU,
            site: RegularizerSite::Ewm,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.tau_gate > 0.0 && self.tau_gate < 1.0) {
            return Err(Error::Config(format!(
                "need alpha >= 0 and 0 < tau_gate < 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Step function selecting confident pseudo-labels: 1 iff `c >= tau`.
pub fn confidence_gate(c: f64, tau: f64) -> f64 {
    if c >= tau {
        1.0
    } else {
        0.0
    }
}

/// Windows with their labels, box targets and (for pseudo-labels) confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    /// `[n × window²]`.
    pub inputs: Tensor,
    pub box_targets: Vec<Option<[f64; 4]>>,
    pub labels: Vec<u8>,
    pub confidences: Vec<Option<f64>>,
}

impl DetectionBatch {
    pub fn from_windows(samples: &[&WindowSample], confidences: &[Option<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if confidences.len() != samples.len() {
            return Err(Error::Contract("one confidence slot per sample".into()));
        }
        let dim = samples[0].pixels.len();
        let mut data = Vec::with_capacity(samples.len() * dim);
        for s in samples {
            if s.pixels.len() != dim {
                return Err(Error::dim("batch", &[dim], &[s.pixels.len()]));
            }
            data.extend_from_slice(&s.pixels);
        }
        Ok(DetectionBatch {
            inputs: Tensor::new(vec![samples.len(), dim], data)?,
            box_targets: samples.iter().map(|s| s.box_target).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            confidences: confidences.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `Σ_i w_i·(l_i·R_i + C_i)` over one batch, where `R` is the mean L1 box
/// error and `C` the binary cross-entropy of the confidence. Negatives carry
/// no box target, so their regression term is zero.
fn weighted_detection_sum(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    batch: &DetectionBatch,
    weights: &[f64],
) -> Result<Var> {
    let n = batch.len();
    let x = g.constant(batch.inputs.clone());
    let out = model.forward(g, params, x)?;
    let (conf, boxes) = match (out.confidence, out.boxes) {
        (Some(c), Some(b)) => (c, b),
        _ => return Err(Error::Contract("detection loss needs a detector model".into())),
    };
    let labels: Vec<f64> = batch.labels.iter().map(|&l| l as f64).collect();
    let cls = g.bce_rows(conf, &labels)?;
    let mut terms = cls;
    if batch.labels.contains(&1) {
        let mut targets = Vec::with_capacity(n * 4);
        for (l, t) in batch.labels.iter().zip(&batch.box_targets) {
            match (l, t) {
                (1, Some(t)) => targets.extend_from_slice(t),
                (1, None) => return Err(Error::Contract("positive sample without a box".into())),
                _ => targets.extend_from_slice(&[0.0; 4]),
            }
        }
        let tv = g.constant(Tensor::new(vec![n, 4], targets)?);
        let reg = g.l1_rows(boxes, tv)?;
        let mask = g.constant(Tensor::vector(labels)?);
        let reg = g.ewmul(reg, mask)?;
        terms = g.add(terms, reg)?;
    }
    let w = g.constant(Tensor::vector(weights.to_vec())?);
    let weighted = g.ewmul(terms, w)?;
    Ok(g.sum(weighted))
}

/// Ungated mean loss over a fully labeled batch (source training).
pub fn labeled_detection_loss(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    batch: &DetectionBatch,
) -> Result<Var> {
    let s = weighted_detection_sum(g, model, params, batch, &vec![1.0; batch.len()])?;
    Ok(g.scale(s, 1.0 / batch.len() as f64))
}

/// Gated supervised loss over auto-annotated target positives and source
/// negatives, normalized by the number of samples.
///
/// Every target sample must have label 1 and a confidence; every negative
/// must have label 0. With both sides absent the loss is a constant zero.
pub fn supervised_loss(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    target: Option<&DetectionBatch>,
    negatives: Option<&DetectionBatch>,
    tau_gate: f64,
) -> Result<Var> {
    let mut parts = Vec::new();
    let mut count = 0;
    if let Some(t) = target {
        if t.labels.iter().any(|&l| l != 1) {
            return Err(Error::Contract("auto-annotated target samples must have label 1".into()));
        }
        let weights = t
            .confidences
            .iter()
            .map(|c| {
                c.map(|c| confidence_gate(c, tau_gate))
                    .ok_or_else(|| Error::Contract("target sample without confidence".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        parts.push(weighted_detection_sum(g, model, params, t, &weights)?);
        count += t.len();
    }
    if let Some(n) = negatives {
        if n.labels.iter().any(|&l| l != 0) {
            return Err(Error::Contract("negative samples must have label 0".into()));
        }
        parts.push(weighted_detection_sum(g, model, params, n, &vec![1.0; n.len()])?);
        count += n.len();
    }
    sum_and_normalize(g, parts, count)
}

fn sum_and_normalize(g: &mut Graph, parts: Vec<Var>, count: usize) -> Result<Var> {
    let mut it = parts.into_iter();
    let Some(mut total) = it.next() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    for p in it {
        total = g.add(total, p)?;
    }
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Labeled points for the classifier losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch {
    pub inputs: Tensor,
    pub classes: Vec<usize>,
    pub confidences: Vec<Option<f64>>,
}

/// Gated softmax cross-entropy over pseudo-labeled target points plus plain
/// cross-entropy over labeled points, normalized by the number of points.
pub fn classification_supervised_loss(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    target: Option<&ClassBatch>,
    labeled: Option<&ClassBatch>,
    tau_gate: f64,
) -> Result<Var> {
    let mut parts = Vec::new();
    let mut count = 0;
    for (batch, gated) in [(target, true), (labeled, false)] {
        let Some(b) = batch else { continue };
        let weights = b
            .confidences
            .iter()
            .map(|c| match (gated, c) {
                (false, _) => Ok(1.0),
                (true, Some(c)) => Ok(confidence_gate(*c, tau_gate)),
                (true, None) => Err(Error::Contract("target sample without confidence".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant(b.inputs.clone());
        let out = model.forward(g, params, x)?;
        let ce = g.softmax_ce_rows(out.logits, &b.classes)?;
        let w = g.constant(Tensor::vector(weights)?);
        let weighted = g.ewmul(ce, w)?;
        parts.push(g.sum(weighted));
        count += b.classes.len();
    }
    sum_and_normalize(g, parts, count)
}

fn batch_mean_gap(g: &mut Graph, target: Var, source: Var) -> Result<Var> {
    let mt = g.mean_axis(target, 0)?;
    let ms = g.mean_axis(source, 0)?;
    let diff = g.sub(mt, ms)?;
    let sq = g.square(diff)?;
    Ok(g.sum(sq))
}

/// `(1/N^O)·Σ_o ‖mean_b m_o(target) − mean_b m_o(source)‖²` over
/// `[batch × N^O × N^D]` element-wise-multiply activations.
pub fn mmd_ewm(g: &mut Graph, m_target: Var, m_source: Var) -> Result<Var> {
    let (st, ss) = (g.shape(m_target).to_vec(), g.shape(m_source).to_vec());
    if st.len() != 3 || ss.len() != 3 || st[1..] != ss[1..] {
        return Err(Error::dim("mmd_ewm", &st, &ss));
    }
    let gap = batch_mean_gap(g, m_target, m_source)?;
    Ok(g.scale(gap, 1.0 / st[1] as f64))
}

/// `‖mean_b f(target) − mean_b f(source)‖²` over `[batch × N^D]` features.
pub fn mmd_fv(g: &mut Graph, f_target: Var, f_source: Var) -> Result<Var> {
    let (st, ss) = (g.shape(f_target).to_vec(), g.shape(f_source).to_vec());
    if st.len() != 2 || ss.len() != 2 || st[1] != ss[1] {
        return Err(Error::dim("mmd_fv", &st, &ss));
    }
    batch_mean_gap(g, f_target, f_source)
}

/// Inputs for the regularizer: a target-domain batch for the target model
/// and a source-domain batch for the frozen source model.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerBatches {
    pub target: Tensor,
    pub source: Tensor,
}

/// The frozen source stream: the source model and its parameters bound on
/// the graph as constants (`Model::bind(g, false)`).
#[derive(Debug, Clone, Copy)]
pub struct SourceStream<'a> {
    pub model: &'a Model,
    pub params: &'a [Var],
}

/// The selected MMD term, or `None` when the site is `None`.
pub fn unsupervised_loss(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    source: SourceStream<'_>,
    batches: &RegularizerBatches,
    site: RegularizerSite,
) -> Result<Option<Var>> {
    if site == RegularizerSite::None {
        return Ok(None);
    }
    if source.params.iter().any(|&p| g.requires_grad(p)) {
        return Err(Error::Contract("source parameters must be bound as constants".into()));
    }
    let xt = g.constant(batches.target.clone());
    let xs = g.constant(batches.source.clone());
    let t = model.forward(g, params, xt)?;
    let s = source.model.forward(g, source.params, xs)?;
    let term = match site {
        RegularizerSite::Ewm => mmd_ewm(g, t.ewm, s.ewm)?,
        RegularizerSite::FeatureVector => mmd_fv(g, t.features, s.features)?,
        RegularizerSite::None => unreachable!(),
    };
    Ok(Some(term))
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub supervised: Var,
    pub unsupervised: Option<Var>,
}

/// `L = L_S + α·L_U`; without an unsupervised term `L` is `L_S` itself.
pub fn combine(g: &mut Graph, supervised: Var, unsupervised: Option<Var>, alpha: f64) -> Result<LossTerms> {
    let total = match unsupervised {
        Some(u) => {
            let scaled = g.scale(u, alpha);
            g.add(supervised, scaled)?
        }
        None => supervised,
    };
    Ok(LossTerms {
        total,
        supervised,
        unsupervised,
    })
}

/// Batches feeding one target-stream step.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchPair<'a> {
    pub target: Option<&'a DetectionBatch>,
    pub negatives: Option<&'a DetectionBatch>,
    pub regularizer: Option<&'a RegularizerBatches>,
}

pub fn combined_loss(
    g: &mut Graph,
    model: &Model,
    params: &[Var],
    source: SourceStream<'_>,
    pair: &BatchPair<'_>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let sup = supervised_loss(g, model, params, pair.target, pair.negatives, cfg.tau_gate)?;
    let unsup = match pair.regularizer {
        Some(r) => unsupervised_loss(g, model, params, source, r, cfg.site)?,
        None => None,
    };
    combine(g, sup, unsup, cfg.alpha)
}

/// Distances of split centers to the source center for one head output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDistance {
    pub dim: usize,
    pub dist_true: Option<f64>,
    pub dist_false: Option<f64>,
}

fn centers(m: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = m.shape();
    if s.len() != 3 {
        return Err(Error::dim("center_diagnostic", s, &[]));
    }
    let (b, o, d) = (s[0], s[1], s[2]);
    let data = m.data();
    Ok((0..o)
        .map(|oi| {
            (0..d)
                .map(|di| (0..b).map(|bi| data[(bi * o + oi) * d + di]).sum::<f64>() / b as f64)
                .collect()
        })
        .collect())
}

/// Euclidean distance from the center of correct (`m_true`) and incorrect
/// (`m_false`) pseudo-label activations to the source center, per output.
/// A missing split is reported as `None`.
pub fn center_diagnostic(
    m_true: Option<&Tensor>,
    m_false: Option<&Tensor>,
    m_source: &Tensor,
) -> Result<Vec<CenterDistance>> {
    let src = centers(m_source)?;
    let dist = |m: Option<&Tensor>| -> Result<Option<Vec<f64>>> {
        let Some(m) = m else { return Ok(None) };
        if m.shape()[1..] != m_source.shape()[1..] {
            return Err(Error::dim("center_diagnostic", m.shape(), m_source.shape()));
        }
        Ok(Some(
            centers(m)?
                .iter()
                .zip(&src)
                .map(|(c, s)| c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect(),
        ))
    };
    let (t, f) = (dist(m_true)?, dist(m_false)?);
    Ok((0..src.len())
        .map(|o| CenterDistance {
            dim: o,
            dist_true: t.as_ref().map(|v| v[o]),
            dist_false: f.as_ref().map(|v| v[o]),
        })
        .collect())
}

pub fn centers_csv(rows: &[CenterDistance]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    let mut s = String::from("dim_index,dist_true,dist_false\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.dim, fmt(r.dist_true), fmt(r.dist_false)).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Window;
    use crate::network::{build_detector, DetectorConfig};

    fn window(pixels: Vec<f64>, label: u8, box_target: Option<[f64; 4]>) -> WindowSample {
        WindowSample {
            pixels,
            window: Window { x: 0, y: 0, size: 8 },
            box_target,
            label,
        }
    }

    #[test]
    fn gate_definition() {
        assert_eq!(confidence_gate(0.95, 0.8), 1.0);
        assert_eq!(confidence_gate(0.5, 0.8), 0.0);
        assert_eq!(confidence_gate(0.8, 0.8), 1.0);
    }

    #[test]
    fn single_negative_at_half_confidence() {
        // zero weights make every confidence sigmoid(0) = 0.5
        let model = build_detector(&DetectorConfig::default()).unwrap();
        let neg = window(vec![0.3; 64], 0, None);
        let batch = DetectionBatch::from_windows(&[&neg], &[None]).unwrap();
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let l = supervised_loss(&mut g, &model, &params, None, Some(&batch), DEFAULT_TAU).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gated_target_contributes_nothing() {
        let model = build_detector(&DetectorConfig::default()).unwrap();
        let pos = window(vec![0.5; 64], 1, Some([0.1, 0.1, 0.8, 0.8]));
        let batch = DetectionBatch::from_windows(&[&pos], &[Some(0.5)]).unwrap();
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let l = supervised_loss(&mut g, &model, &params, Some(&batch), None, 0.8).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn label_contracts() {
        let model = build_detector(&DetectorConfig::default()).unwrap();
        let neg = window(vec![0.3; 64], 0, None);
        let as_target = DetectionBatch::from_windows(&[&neg], &[Some(0.9)]).unwrap();
        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        assert!(matches!(
            supervised_loss(&mut g, &model, &params, Some(&as_target), None, 0.8),
            Err(Error::Contract(_))
        ));
        assert!(DetectionBatch::from_windows(&[], &[]).is_err());
    }

    #[test]
    fn combination_arithmetic() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::scalar(1.0));
        let u = g.constant(Tensor::scalar(0.5));
        let t = combine(&mut g, s, Some(u), 0.8).unwrap();
        assert!((g.value(t.total).item().unwrap() - 1.4).abs() < 1e-15);
        let t0 = combine(&mut g, s, Some(u), 0.0).unwrap();
        assert_eq!(g.value(t0.total).item().unwrap(), 1.0);
        let none = combine(&mut g, s, None, 0.8).unwrap();
        assert_eq!(none.total, s);
    }

    #[test]
    fn mmd_simple_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap());
        let z = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
        let v = mmd_fv(&mut g, a, z).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 1.0);
        let same = mmd_fv(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
        let bad = g.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap());
        assert!(matches!(mmd_fv(&mut g, a, bad), Err(Error::Dimension { .. })));

        // N^O = 1, means differ by δ = (1, -2, 2)
        let mt = g.constant(Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 2.0, 1.0, -2.0, 2.0]).unwrap());
        let ms = g.constant(Tensor::new(vec![1, 1, 3], vec![0.0; 3]).unwrap());
        let v = mmd_ewm(&mut g, mt, ms).unwrap();
        assert_eq!(g.value(v).item().unwrap(), 9.0);
    }

    #[test]
    fn diagnostic_rows() {
        let src = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 0.0, 0.0, 3.0, 3.0, 0.0, 0.0]).unwrap();
        let rows = center_diagnostic(Some(&src), None, &src).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].dist_true, Some(0.0));
        assert_eq!(rows[0].dist_false, None);
        let csv = centers_csv(&rows);
        assert_eq!(csv, "dim_index,dist_true,dist_false\n0,0.000000,\n1,0.000000,\n");
    }
}
