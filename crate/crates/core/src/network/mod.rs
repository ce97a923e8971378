//! Dense feature extractor with a decomposed final layer.
//!
//! The confidence / logits head `p = f·C` is evaluated as an element-wise
//! multiply layer `M[b,o,d] = f[b,d]·C[d,o]` followed by a sum over `d`, so
//! the intermediate `M` is available to the regularizer. The box head of the
//! detector stays an ordinary fully connected layer.

mod weights;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use weights::{load_weights, save_weights, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// One sigmoid confidence plus four sigmoid box offsets.
    Detector,
    /// Softmax class logits.
    Classifier { classes: usize },
}

/// Layer widths and head type; enough to rebuild a model's parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the dense+relu layers; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub head: HeadKind,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive and at least one hidden layer is required: {:?} -> {:?}",
                self.input_dim, self.hidden
            )));
        }
        if let HeadKind::Classifier { classes } = self.head {
            if classes < 2 {
                return Err(Error::Config(format!("classifier needs >= 2 classes, got {classes}")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    /// Width of the decomposed head's output.
    pub fn outputs(&self) -> usize {
        match self.head {
            HeadKind::Detector => 1,
            HeadKind::Classifier { classes } => classes,
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for &w in &self.hidden {
            shapes.push(vec![fan_in, w]);
            shapes.push(vec![w]);
            fan_in = w;
        }
        shapes.push(vec![fan_in, self.outputs()]);
        if self.head == HeadKind::Detector {
            shapes.push(vec![fan_in, 4]);
            shapes.push(vec![4]);
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Side of the square input window in pixels.
    pub window: usize,
    pub hidden: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            window: 8,
            hidden: vec![32, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in × out]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Final layer split into element-wise multiply and sum; carries no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EwmHead {
    /// `[N^D × N^O]`.
    pub weight: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`; biases zero.
    UniformScaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    pub feature_layers: Vec<DenseLayer>,
    pub conf_head: EwmHead,
    pub box_head: Option<DenseLayer>,
}

/// Graph handles of one model forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Last feature vector `f`, `[batch × N^D]`.
    pub features: Var,
    /// Element-wise products `M`, `[batch × N^O × N^D]`.
    pub ewm: Var,
    /// Head output `p = Σ_d M`, `[batch × N^O]`.
    pub logits: Var,
    /// Detector only: `sigmoid(p)`, `[batch × 1]`.
    pub confidence: Option<Var>,
    /// Detector only: window-normalized boxes, `[batch × 4]`.
    pub boxes: Option<Var>,
}

/// Plain-value outputs of [`Model::predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub confidence: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

/// `M[b,o,d] = f[b,d]·C[d,o]` and `p[b,o] = Σ_d M[b,o,d]`.
pub fn ewm_forward(g: &mut Graph, f: Var, c: Var) -> Result<(Var, Var)> {
    let (sf, sc) = (g.shape(f).to_vec(), g.shape(c).to_vec());
    if sf.len() != 2 || sc.len() != 2 || sf[1] != sc[0] {
        return Err(Error::dim("ewm_forward", &sf, &sc));
    }
    let (batch, nd, no) = (sf[0], sf[1], sc[1]);
    let f3 = g.reshape(f, &[batch, 1, nd])?;
    let ct = g.transpose(c)?;
    let ct3 = g.reshape(ct, &[1, no, nd])?;
    let m = g.ewmul(f3, ct3)?;
    let p = g.reduce_sum(m, 2)?;
    Ok((m, p))
}

/// Agreement between the decomposed head and a plain matrix product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub max_grad_diff_features: f64,
    pub max_grad_diff_weights: f64,
}

impl Equivalence {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff
            .max(self.max_grad_diff_features)
            .max(self.max_grad_diff_weights)
    }
}

/// Runs `f·C` both as one matmul and as ewm+sum, comparing outputs and the
/// gradients of a fixed weighted sum of the outputs.
pub fn fc_equivalence_check(f: &Tensor, c: &Tensor) -> Result<Equivalence> {
    let run = |decomposed: bool| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let fv = g.param(f.clone());
        let cv = g.param(c.clone());
        let p = if decomposed {
            ewm_forward(&mut g, fv, cv)?.1
        } else {
            g.matmul(fv, cv)?
        };
        let n = g.value(p).numel();
        let weights: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.25).collect();
        let wv = g.constant(Tensor::new(g.shape(p).to_vec(), weights)?);
        let weighted = g.ewmul(p, wv)?;
        let loss = g.sum(weighted);
        g.backward(loss)?;
        Ok((
            g.value(p).data().to_vec(),
            g.grad(fv).unwrap_or_default().to_vec(),
            g.grad(cv).unwrap_or_default().to_vec(),
        ))
    };
    let (pe, gfe, gce) = run(true)?;
    let (pm, gfm, gcm) = run(false)?;
    Ok(Equivalence {
        max_abs_diff: max_abs_diff(&pe, &pm),
        max_grad_diff_features: max_abs_diff(&gfe, &gfm),
        max_grad_diff_weights: max_abs_diff(&gce, &gcm),
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn build_detector(cfg: &DetectorConfig) -> Result<Model> {
    Model::zeros(Architecture {
        input_dim: cfg.window * cfg.window,
        hidden: cfg.hidden.clone(),
        head: HeadKind::Detector,
    })
}

pub fn build_classifier(cfg: &ClassifierConfig) -> Result<Model> {
    Model::zeros(Architecture {
        input_dim: cfg.input_dim,
        hidden: cfg.hidden.clone(),
        head: HeadKind::Classifier {
            classes: cfg.classes,
        },
    })
}

/// Fills every weight matrix from a seeded stream; biases are reset to zero.
pub fn init_weights(model: &mut Model, seed: u64, scheme: InitScheme) {
    let mut rng = rng::stream(seed, "init", 0);
    for t in model.params_mut() {
        match scheme {
            InitScheme::UniformScaled => {
                if t.rank() == 2 {
                    let (fan_in, fan_out) = (t.shape()[0], t.shape()[1]);
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for v in t.data_mut() {
                        *v = rng.random_range(-s..=s);
                    }
                } else {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }
}

impl Model {
    /// Model with every parameter zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut tensors = arch
            .param_shapes()
            .into_iter()
            .map(Tensor::zeros)
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut feature_layers = Vec::new();
        for _ in &arch.hidden {
            let weight = tensors.next().unwrap();
            let bias = tensors.next();
            feature_layers.push(DenseLayer { weight, bias });
        }
        let conf_head = EwmHead {
            weight: tensors.next().unwrap(),
        };
        let box_head = (arch.head == HeadKind::Detector).then(|| DenseLayer {
            weight: tensors.next().unwrap(),
            bias: tensors.next(),
        });
        Ok(Model {
            arch,
            feature_layers,
            conf_head,
            box_head,
        })
    }

    pub fn initialized(arch: Architecture, seed: u64) -> Result<Self> {
        let mut m = Model::zeros(arch)?;
        init_weights(&mut m, seed, InitScheme::UniformScaled);
        Ok(m)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Parameters in storage order: per feature layer weight then bias, the
    /// decomposed head, then the box head weight and bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.feature_layers {
            out.push(&l.weight);
            out.extend(l.bias.as_ref());
        }
        out.push(&self.conf_head.weight);
        if let Some(b) = &self.box_head {
            out.push(&b.weight);
            out.extend(b.bias.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.feature_layers {
            out.push(&mut l.weight);
            out.extend(l.bias.as_mut());
        }
        out.push(&mut self.conf_head.weight);
        if let Some(b) = &mut self.box_head {
            out.push(&mut b.weight);
            out.extend(b.bias.as_mut());
        }
        out
    }

    /// Places every parameter on `g`, as gradient-collecting leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| {
                let t = t.clone().with_requires_grad(trainable);
                g.leaf(t)
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Forward> {
        if params.len() != self.params().len() {
            return Err(Error::Contract(format!(
                "model has {} parameters, {} bound",
                self.params().len(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        let mut h = x;
        for _ in &self.feature_layers {
            let w = it.next().unwrap();
            let b = it.next().unwrap();
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = g.relu(z);
        }
        let c = it.next().unwrap();
        let (ewm, logits) = ewm_forward(g, h, c)?;
        let (confidence, boxes) = match self.arch.head {
            HeadKind::Detector => {
                let conf = g.sigmoid(logits);
                let w = it.next().unwrap();
                let b = it.next().unwrap();
                let z = g.matmul(h, w)?;
                let z = g.add(z, b)?;
                (Some(conf), Some(g.sigmoid(z)))
            }
            HeadKind::Classifier { .. } => (None, None),
        };
        Ok(Forward {
            features: h,
            ewm,
            logits,
            confidence,
            boxes,
        })
    }

    /// Inference on a `[batch × input_dim]` tensor.
    pub fn predict(&self, inputs: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(inputs.clone());
        let out = self.forward(&mut g, &params, x)?;
        let confidence = out
            .confidence
            .map(|c| g.value(c).data().to_vec())
            .unwrap_or_default();
        let boxes = out
            .boxes
            .map(|b| {
                g.value(b)
                    .data()
                    .chunks_exact(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect()
            })
            .unwrap_or_default();
        Ok(Prediction {
            logits: g.value(out.logits).clone(),
            confidence,
            boxes,
        })
    }

    /// Plain SGD step from the gradients collected on `params`.
    pub fn sgd_step(&mut self, g: &Graph, params: &[Var], lr: f64) {
        for (t, &v) in self.params_mut().into_iter().zip(params) {
            if let Some(grad) = g.grad(v) {
                for (w, d) in t.data_mut().iter_mut().zip(grad) {
                    *w -= lr * d;
                }
            }
        }
    }

    pub fn weights(&self) -> ModelWeights {
        ModelWeights {
            arch: self.arch.clone(),
            tensors: self.params().into_iter().cloned().collect(),
        }
    }

    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let mut m = Model::zeros(w.arch.clone())?;
        m.load(w)?;
        Ok(m)
    }

    /// Overwrites all parameters; the architecture must match exactly.
    pub fn load(&mut self, w: &ModelWeights) -> Result<()> {
        if w.arch != self.arch {
            return Err(Error::Format(format!(
                "architecture mismatch: file has {:?}, model is {:?}",
                w.arch, self.arch
            )));
        }
        let shapes_match = w.tensors.len() == self.params().len()
            && w
                .tensors
                .iter()
                .zip(self.params())
                .all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::Format("parameter shapes do not match architecture".into()));
        }
        for (dst, src) in self.params_mut().into_iter().zip(&w.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewm_forward_hand_example() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
        let (m, p) = ewm_forward(&mut g, f, c).unwrap();
        assert_eq!(g.shape(m), &[1, 2, 2]);
        // m_0 = [1·3, 2·5], m_1 = [1·4, 2·6]
        assert_eq!(g.value(m).data(), &[3.0, 10.0, 4.0, 12.0]);
        assert_eq!(g.value(p).data(), &[13.0, 16.0]);
    }

    #[test]
    fn ewm_zero_weights_and_one_hot_selection() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&[[0.5, -2.0, 3.0]]).unwrap());
        let c = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
        let (m, p) = ewm_forward(&mut g, f, c).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));

        let onehot = g.constant(Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap());
        let c = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let (m, p) = ewm_forward(&mut g, onehot, c).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 3.0, 0.0, 0.0, 4.0, 0.0]);
        assert_eq!(g.value(p).data(), &[3.0, 4.0]);
        let bad = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        assert!(matches!(
            ewm_forward(&mut g, onehot, bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn equivalence_of_zero_features() {
        let f = Tensor::zeros(vec![3, 4]).unwrap();
        let c = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let eq = fc_equivalence_check(&f, &c).unwrap();
        assert_eq!(eq.max_abs_diff, 0.0);
    }

    #[test]
    fn detector_and_classifier_shapes() {
        let det = Model::initialized(build_detector(&DetectorConfig::default()).unwrap().arch().clone(), 3).unwrap();
        let x = Tensor::zeros(vec![5, 64]).unwrap();
        let mut g = Graph::new();
        let params = det.bind(&mut g, false);
        let xv = g.constant(x);
        let out = det.forward(&mut g, &params, xv).unwrap();
        assert_eq!(g.shape(out.boxes.unwrap()), &[5, 4]);
        assert_eq!(g.shape(out.confidence.unwrap()), &[5, 1]);
        assert_eq!(g.shape(out.ewm), &[5, 1, 16]);
        assert!(g.value(out.logits).all_finite());

        let cls = build_classifier(&ClassifierConfig {
            input_dim: 2,
            hidden: vec![8],
            classes: 3,
        })
        .unwrap();
        let p = cls.predict(&Tensor::zeros(vec![4, 2]).unwrap()).unwrap();
        assert_eq!(p.logits.shape(), &[4, 3]);
        assert!(p.confidence.is_empty());
    }

    #[test]
    fn non_positive_widths_are_rejected() {
        assert!(matches!(
            build_detector(&DetectorConfig {
                window: 8,
                hidden: vec![32, 0]
            }),
            Err(Error::Config(_))
        ));
        assert!(build_detector(&DetectorConfig {
            window: 0,
            hidden: vec![4]
        })
        .is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = build_detector(&DetectorConfig::default()).unwrap().arch().clone();
        let a = Model::initialized(arch.clone(), 7).unwrap();
        let b = Model::initialized(arch.clone(), 7).unwrap();
        let c = Model::initialized(arch, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in a.params() {
            if t.rank() == 2 {
                let s = (6.0 / (t.shape()[0] + t.shape()[1]) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= s));
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn source_clone_gives_identical_outputs() {
        let arch = build_detector(&DetectorConfig::default()).unwrap().arch().clone();
        let source = Model::initialized(arch, 11).unwrap();
        let target = Model::from_weights(&source.weights()).unwrap();
        let x = Tensor::new(vec![2, 64], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (a, b) = (source.predict(&x).unwrap(), target.predict(&x).unwrap());
        assert_eq!(a.confidence, b.confidence);
        assert_eq!(a.boxes, b.boxes);
    }
}
