use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::{log_sum_exp, Graph};
use crate::error::{Error, Result};
use crate::eval::{argmax, classification_accuracy};
use crate::losses::{self, ClassBatch, RegularizerBatches, RegularizerSite, SourceStream};
use crate::network::Model;
use crate::rng::{self, Rng};
use crate::synthdata::LabeledSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassSetting {
    /// Target labels are never used for training.
    Unsupervised,
    /// The first `labeled_per_class` target points of every class are
    /// labeled and included in every target step.
    Supervised { labeled_per_class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassAdaptConfig {
    pub n_iterations: usize,
    pub tau_annotate: f64,
    pub tau_gate: f64,
    pub alpha: f64,
    pub site: RegularizerSite,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassAdaptConfig {
    fn default() -> Self {
        ClassAdaptConfig {
            n_iterations: 5,
            tau_annotate: 0.8,
            tau_gate: 0.8,
            alpha: 0.8,
            site: RegularizerSite::Ewm,
            steps_per_iteration: 100,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl ClassAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n_iterations == 0 || self.steps_per_iteration == 0 || self.batch_size == 0 {
            return Err(Error::Config("iteration, step and batch counts must be positive".into()));
        }
        if !unit(self.tau_annotate) || !unit(self.tau_gate) || !(self.alpha >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("invalid classification adaptation config {self:?}")));
        }
        Ok(())
    }
}

fn sample(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

fn labeled_batch(set: &LabeledSet, idx: &[usize]) -> Result<ClassBatch> {
    Ok(ClassBatch {
        inputs: set.rows(idx)?,
        classes: idx.iter().map(|&i| set.labels[i]).collect(),
        confidences: vec![None; idx.len()],
    })
}

fn sgd_step(
    model: &mut Model,
    target: Option<&ClassBatch>,
    labeled: Option<&ClassBatch>,
    reg: Option<(&Model, &RegularizerBatches, RegularizerSite)>,
    alpha: f64,
    tau_gate: f64,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let sup = losses::classification_supervised_loss(&mut g, model, &params, target, labeled, tau_gate)?;
    let unsup = match reg {
        Some((src, batches, site)) => {
            let sp = src.bind(&mut g, false);
            let stream = SourceStream { model: src, params: &sp };
            losses::unsupervised_loss(&mut g, model, &params, stream, batches, site)?
        }
        None => None,
    };
    let terms = losses::combine(&mut g, sup, unsup, alpha)?;
    g.backward(terms.total)?;
    model.sgd_step(&g, &params, lr);
    let u = match terms.unsupervised {
        Some(u) => g.value(u).item()?,
        None => 0.0,
    };
    Ok((g.value(terms.supervised).item()?, u))
}

/// Cross-entropy training on the labeled source set; returns the mean loss
/// of each epoch.
pub fn train_classifier_source(
    model: &mut Model,
    set: &LabeledSet,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if set.is_empty() || batch_size == 0 {
        return Err(Error::Config("classifier training needs data and a positive batch size".into()));
    }
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = rng::stream(seed, "classifier-train", epoch as u64);
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let chunks = order.chunks(batch_size);
        let steps = chunks.len();
        for chunk in chunks {
            let b = labeled_batch(set, chunk)?;
            total += sgd_step(model, None, Some(&b), None, 0.0, 0.5, lr)?.0;
        }
        history.push(total / steps as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassPseudoLabel {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
}

/// Arg-max class of every point whose softmax probability reaches `tau`.
pub fn classification_pseudo_labels(model: &Model, set: &LabeledSet, tau: f64) -> Result<Vec<ClassPseudoLabel>> {
    let pred = model.predict(&set.all_rows()?)?;
    let k = pred.logits.shape()[1];
    Ok(pred
        .logits
        .data()
        .chunks_exact(k)
        .enumerate()
        .filter_map(|(index, row)| {
            let class = argmax(row);
            let confidence = (row[class] - log_sum_exp(row)).exp();
            (confidence >= tau).then_some(ClassPseudoLabel {
                index,
                class,
                confidence,
            })
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ClassAdaptResult {
    /// Accuracy on the evaluation split after each iteration.
    pub accuracy: Vec<f64>,
    pub n_pseudo: Vec<usize>,
    pub model: Model,
}

fn first_per_class(set: &LabeledSet, k: usize) -> Vec<usize> {
    let mut seen = vec![0; set.classes];
    (0..set.len())
        .filter(|&i| {
            let c = set.labels[i];
            seen[c] += 1;
            seen[c] <= k
        })
        .collect()
}

/// Self-training of a classifier on the target pool, alternating
/// pseudo-labeled target steps with labeled source steps, regularized
/// against the frozen source model.
pub fn run_classification_adaptation(
    cfg: &ClassAdaptConfig,
    setting: ClassSetting,
    source_model: &Model,
    source: &LabeledSet,
    target: &LabeledSet,
    eval: &LabeledSet,
) -> Result<ClassAdaptResult> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config("source and target sets must be non-empty".into()));
    }
    let labeled_target = match setting {
        ClassSetting::Unsupervised => None,
        ClassSetting::Supervised { labeled_per_class } => {
            if labeled_per_class == 0 {
                return Err(Error::Config("labeled_per_class must be positive".into()));
            }
            let idx = first_per_class(target, labeled_per_class);
            Some(labeled_batch(target, &idx)?)
        }
    };
    let mut model = source_model.clone();
    let mut accuracy = Vec::with_capacity(cfg.n_iterations);
    let mut n_pseudo = Vec::with_capacity(cfg.n_iterations);
    for iteration in 0..cfg.n_iterations {
        let it = iteration as u64;
        let pseudo = classification_pseudo_labels(&model, target, cfg.tau_annotate)?;
        let mut batch_rng = rng::stream(cfg.seed, "class-batches", it);
        let mut reg_t_rng = rng::stream(cfg.seed, "class-reg-target", it);
        let mut reg_s_rng = rng::stream(cfg.seed, "class-reg-source", it);
        for step in 0..cfg.steps_per_iteration {
            let target_phase = step % 2 == 0;
            let pseudo_batch = if target_phase && !pseudo.is_empty() {
                let idx = sample(&mut batch_rng, pseudo.len(), cfg.batch_size);
                let rows: Vec<usize> = idx.iter().map(|&i| pseudo[i].index).collect();
                Some(ClassBatch {
                    inputs: target.rows(&rows)?,
                    classes: idx.iter().map(|&i| pseudo[i].class).collect(),
                    confidences: idx.iter().map(|&i| Some(pseudo[i].confidence)).collect(),
                })
            } else {
                None
            };
            let labeled = if target_phase {
                labeled_target.clone()
            } else {
                Some(labeled_batch(source, &sample(&mut batch_rng, source.len(), cfg.batch_size))?)
            };
            let reg = if cfg.site == RegularizerSite::None {
                None
            } else {
                Some(RegularizerBatches {
                    target: target.rows(&sample(&mut reg_t_rng, target.len(), cfg.batch_size))?,
                    source: source.rows(&sample(&mut reg_s_rng, source.len(), cfg.batch_size))?,
                })
            };
            if pseudo_batch.is_none() && labeled.is_none() && reg.is_none() {
                continue;
            }
            sgd_step(
                &mut model,
                pseudo_batch.as_ref(),
                labeled.as_ref(),
                reg.as_ref().map(|r| (source_model, r, cfg.site)),
                cfg.alpha,
                cfg.tau_gate,
                cfg.learning_rate,
            )?;
        }
        accuracy.push(classification_accuracy(&model, eval)?);
        n_pseudo.push(pseudo.len());
    }
    Ok(ClassAdaptResult {
        accuracy,
        n_pseudo,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_classifier, ClassifierConfig};
    use crate::synthdata::{gen_classification_set, ClassDomainParams, ClassificationSpec};

    fn spec() -> ClassificationSpec {
        ClassificationSpec {
            dim: 4,
            classes: 3,
            mean_radius: 2.0,
            noise_sd: 0.4,
        }
    }

    fn classifier(seed: u64) -> Model {
        let arch = build_classifier(&ClassifierConfig {
            input_dim: 4,
            hidden: vec![16],
            classes: 3,
        })
        .unwrap()
        .arch()
        .clone();
        Model::initialized(arch, seed).unwrap()
    }

    #[test]
    fn source_training_learns() {
        let set = gen_classification_set(&spec(), &ClassDomainParams::identity(), 60, 1, "source").unwrap();
        let mut m = classifier(2);
        let losses = train_classifier_source(&mut m, &set, 15, 16, 0.1, 3).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(classification_accuracy(&m, &set).unwrap() > 0.9);
    }

    #[test]
    fn pseudo_labels_respect_threshold_and_history_length() {
        let id = ClassDomainParams::identity();
        let src = gen_classification_set(&spec(), &id, 40, 1, "source").unwrap();
        let tgt = gen_classification_set(&spec(), &id, 40, 1, "target").unwrap();
        let mut m = classifier(2);
        train_classifier_source(&mut m, &src, 10, 16, 0.1, 3).unwrap();
        let p = classification_pseudo_labels(&m, &tgt, 0.9).unwrap();
        assert!(p.iter().all(|l| l.confidence >= 0.9));
        let cfg = ClassAdaptConfig {
            n_iterations: 3,
            steps_per_iteration: 10,
            ..ClassAdaptConfig::default()
        };
        let before = m.clone();
        let r = run_classification_adaptation(&cfg, ClassSetting::Unsupervised, &m, &src, &tgt, &tgt).unwrap();
        assert_eq!(r.accuracy.len(), 3);
        assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(m, before);
    }

    #[test]
    fn first_k_per_class() {
        let set = gen_classification_set(&spec(), &ClassDomainParams::identity(), 5, 1, "t").unwrap();
        let idx = first_per_class(&set, 2);
        assert_eq!(idx.len(), 6);
    }
}
