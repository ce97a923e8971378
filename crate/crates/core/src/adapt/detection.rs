use log::{debug, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use super::{AdaptConfig, AdaptHistory, IterationRecord, RegularizerInput, StepMix};
use crate::detector::{self, Detector, ModelDetector, SweepConfig};
use crate::engine::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{Detection, PrCurve};
use crate::losses::{
    self, BatchPair, CenterDistance, DetectionBatch, RegularizerBatches, RegularizerSite, SourceStream,
};
use crate::network::Model;
use crate::rng::{self, Rng};
use crate::synthdata::{crop, extract_windows, sweep_windows, Scene, WindowSample};

/// Labeled source scenes, the unlabeled target pool, and the labeled target
/// evaluation split (disjoint from the pool).
#[derive(Debug, Clone)]
pub struct DetectionData {
    pub source: Vec<Scene>,
    pub target_pool: Vec<Scene>,
    pub eval: Vec<Scene>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub sweep: SweepConfig,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            sweep: SweepConfig::default(),
        }
    }
}

fn labeled_windows(scenes: &[Scene], sweep: &SweepConfig) -> Vec<WindowSample> {
    scenes
        .iter()
        .flat_map(|s| extract_windows(s, sweep.window, sweep.stride, sweep.pos_iou, sweep.neg_iou))
        .collect()
}

fn sgd_on_batch(model: &mut Model, batch: &DetectionBatch, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let loss = losses::labeled_detection_loss(&mut g, model, &params, batch)?;
    g.backward(loss)?;
    model.sgd_step(&g, &params, lr);
    g.value(loss).item()
}

/// Supervised training on labeled source windows with batches balanced
/// between positives and negatives. Returns the mean loss of each epoch.
pub fn train_source(model: &mut Model, source: &[Scene], cfg: &SourceTrainConfig) -> Result<Vec<f64>> {
    if source.is_empty() {
        return Err(Error::Config("source dataset is empty".into()));
    }
    if cfg.batch_size < 2 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("source training needs batch_size >= 2 and a positive rate".into()));
    }
    cfg.sweep.validate()?;
    let windows = labeled_windows(source, &cfg.sweep);
    let (pos, neg): (Vec<&WindowSample>, Vec<&WindowSample>) = windows.iter().partition(|w| w.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config("source windows need both positives and negatives".into()));
    }
    let half = cfg.batch_size / 2;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, "source-train", epoch as u64);
        let mut order: Vec<usize> = (0..pos.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(half) {
            let mut batch: Vec<&WindowSample> = chunk.iter().map(|&i| pos[i]).collect();
            batch.extend(sample_indices(&mut rng, neg.len(), half).into_iter().map(|i| neg[i]));
            let b = DetectionBatch::from_windows(&batch, &vec![None; batch.len()])?;
            total += sgd_on_batch(model, &b, cfg.learning_rate)?;
            steps += 1;
        }
        let mean = total / steps as f64;
        debug!("source epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    Ok(history)
}

/// `count` distinct indices below `n` when possible, otherwise `count`
/// draws with replacement.
fn sample_indices(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// A target detection promoted to a positive training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub image: usize,
    pub detection: Detection,
    /// The originating window, labeled 1, with the predicted box as target.
    pub sample: WindowSample,
    /// Whether the box matches hidden ground truth.
    pub correct: bool,
}

impl PseudoLabel {
    pub fn confidence(&self) -> f64 {
        self.detection.confidence
    }
}

/// Every detection with confidence at least `tau` becomes a pseudo-label.
pub fn auto_annotate(detector: &dyn Detector, scenes: &[Scene], tau: f64) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::new();
    for (image, scene) in scenes.iter().enumerate() {
        let gts = scene.gt_boxes();
        for d in detector.detect(scene)? {
            if d.detection.confidence < tau {
                continue;
            }
            out.push(PseudoLabel {
                image,
                correct: detector::matches_any(&d.detection.bbox, &gts),
                detection: d.detection,
                sample: WindowSample {
                    pixels: d.pixels,
                    window: d.window,
                    box_target: Some(d.box_norm),
                    label: 1,
                },
            });
        }
    }
    Ok(out)
}

/// Uniform sample of `count` negative windows, without replacement unless
/// there are fewer negatives than requested.
pub fn sample_negatives(pool: &[WindowSample], count: usize, rng: &mut Rng) -> Result<Vec<WindowSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let negatives: Vec<&WindowSample> = pool.iter().filter(|w| w.label == 0).collect();
    if negatives.is_empty() {
        return Err(Error::Contract("no negative windows to sample".into()));
    }
    if count > negatives.len() {
        warn!(
            "{count} negatives requested but only {} available; sampling with replacement",
            negatives.len()
        );
    }
    Ok(sample_indices(rng, negatives.len(), count)
        .into_iter()
        .map(|i| negatives[i].clone())
        .collect())
}

/// Per-image labeled windows and raw sweep crops of the source scenes.
#[derive(Debug, Clone)]
pub struct SourcePool {
    pub windows: Vec<Vec<WindowSample>>,
    pub crops: Vec<Vec<Vec<f64>>>,
}

impl SourcePool {
    pub fn new(scenes: &[Scene], sweep: &SweepConfig) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Config("source dataset is empty".into()));
        }
        Ok(SourcePool {
            windows: scenes
                .iter()
                .map(|s| extract_windows(s, sweep.window, sweep.stride, sweep.pos_iou, sweep.neg_iou))
                .collect(),
            crops: scenes.iter().map(|s| sweep_crops(s, sweep)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn positives(&self) -> Vec<WindowSample> {
        self.windows.iter().flatten().filter(|w| w.label == 1).cloned().collect()
    }
}

fn sweep_crops(scene: &Scene, sweep: &SweepConfig) -> Vec<Vec<f64>> {
    sweep_windows(scene, sweep.window, sweep.stride)
        .iter()
        .map(|w| crop(scene, w))
        .collect()
}

fn choose_images(n: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

fn stack(rows: &[&[f64]]) -> Result<Tensor> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat())
}

#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub pseudo: Vec<PseudoLabel>,
    pub n_negatives: usize,
    pub loss_s: f64,
    pub loss_u: f64,
    /// Number of SGD steps actually taken.
    pub updates: usize,
}

impl IterationOutcome {
    pub fn pseudo_precision(&self) -> Option<f64> {
        if self.pseudo.is_empty() {
            None
        } else {
            Some(self.pseudo.iter().filter(|p| p.correct).count() as f64 / self.pseudo.len() as f64)
        }
    }
}

/// One pass of auto-annotation, negative sampling and target-model updates.
/// `target_images` are the images sampled for this iteration.
pub fn adapt_iteration(
    model: &mut Model,
    source_model: &Model,
    target_images: &[Scene],
    source: &SourcePool,
    cfg: &AdaptConfig,
    iteration: usize,
) -> Result<IterationOutcome> {
    let it = iteration as u64;
    let pseudo = auto_annotate(
        &ModelDetector::new(model, cfg.sweep),
        target_images,
        cfg.tau_annotate,
    )?;
    let mut outcome = IterationOutcome {
        pseudo,
        n_negatives: 0,
        loss_s: 0.0,
        loss_u: 0.0,
        updates: 0,
    };
    if !cfg.method.trains() {
        return Ok(outcome);
    }

    let src_images = choose_images(
        source.len(),
        cfg.source_images_per_iter,
        &mut rng::stream(cfg.seed, "source-images", it),
    );
    let negatives = if cfg.method.uses_negatives() {
        let pool: Vec<WindowSample> = src_images.iter().flat_map(|&i| source.windows[i].iter().cloned()).collect();
        sample_negatives(
            &pool,
            outcome.pseudo.len(),
            &mut rng::stream(cfg.seed, "negatives", it),
        )?
    } else {
        Vec::new()
    };
    outcome.n_negatives = negatives.len();

    let site = cfg.site();
    let sweep_mode = site != RegularizerSite::None && cfg.regularizer_input == RegularizerInput::SweepWindows;
    let batch_mode = site != RegularizerSite::None && cfg.regularizer_input == RegularizerInput::TrainingBatch;
    let target_crops: Vec<Vec<f64>> = if sweep_mode {
        target_images.iter().flat_map(|s| sweep_crops(s, &cfg.sweep)).collect()
    } else {
        Vec::new()
    };
    let source_crops: Vec<&[f64]> = if sweep_mode {
        src_images
            .iter()
            .flat_map(|&i| source.crops[i].iter().map(Vec::as_slice))
            .collect()
    } else {
        Vec::new()
    };
    let (source_pos, source_neg): (Vec<&[f64]>, Vec<&[f64]>) = if batch_mode {
        let (p, n): (Vec<&WindowSample>, Vec<&WindowSample>) =
            src_images.iter().flat_map(|&i| source.windows[i].iter()).partition(|w| w.label == 1);
        (
            p.into_iter().map(|w| w.pixels.as_slice()).collect(),
            n.into_iter().map(|w| w.pixels.as_slice()).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    if batch_mode && (source_pos.is_empty() || source_neg.is_empty()) {
        return Err(Error::Config("source images need positive and negative windows".into()));
    }

    let loss_cfg = cfg.loss_config();
    let mut batch_rng = rng::stream(cfg.seed, "batches", it);
    let mut reg_t_rng = rng::stream(cfg.seed, "reg-target", it);
    let mut reg_s_rng = rng::stream(cfg.seed, "reg-source", it);
    let mut sum_s = 0.0;
    let mut sum_u = 0.0;
    for step in 0..cfg.steps_per_iteration {
        let joint = cfg.step_mix == StepMix::Joint;
        let positive_phase = joint || !cfg.method.uses_negatives() || step % 2 == 0;
        let negative_phase = cfg.method.uses_negatives() && (joint || step % 2 == 1);
        let target_batch = if positive_phase && !outcome.pseudo.is_empty() {
            let idx = sample_indices(&mut batch_rng, outcome.pseudo.len(), cfg.batch_size.min(outcome.pseudo.len()));
            let samples: Vec<&WindowSample> = idx.iter().map(|&i| &outcome.pseudo[i].sample).collect();
            let conf: Vec<Option<f64>> = idx.iter().map(|&i| Some(outcome.pseudo[i].confidence())).collect();
            Some(DetectionBatch::from_windows(&samples, &conf)?)
        } else {
            None
        };
        let negative_batch = if negative_phase && !negatives.is_empty() {
            let idx = sample_indices(&mut batch_rng, negatives.len(), cfg.batch_size.min(negatives.len()));
            let samples: Vec<&WindowSample> = idx.iter().map(|&i| &negatives[i]).collect();
            Some(DetectionBatch::from_windows(&samples, &vec![None; samples.len()])?)
        } else {
            None
        };
        let reg = if sweep_mode {
            let ti = sample_indices(&mut reg_t_rng, target_crops.len(), cfg.batch_size.min(target_crops.len()));
            let si = sample_indices(&mut reg_s_rng, source_crops.len(), cfg.batch_size.min(source_crops.len()));
            let trows: Vec<&[f64]> = ti.iter().map(|&i| target_crops[i].as_slice()).collect();
            let srows: Vec<&[f64]> = si.iter().map(|&i| source_crops[i]).collect();
            Some(RegularizerBatches {
                target: stack(&trows)?,
                source: stack(&srows)?,
            })
        } else if batch_mode {
            let step_batch = target_batch
                .as_ref()
                .map(|b| (b, &source_pos))
                .or(negative_batch.as_ref().map(|b| (b, &source_neg)));
            match step_batch {
                Some((b, reference)) => {
                    let si = sample_indices(&mut reg_s_rng, reference.len(), cfg.batch_size.min(reference.len()));
                    let srows: Vec<&[f64]> = si.iter().map(|&i| reference[i]).collect();
                    Some(RegularizerBatches {
                        target: b.inputs.clone(),
                        source: stack(&srows)?,
                    })
                }
                None => None,
            }
        } else {
            None
        };
        if target_batch.is_none() && negative_batch.is_none() && reg.is_none() {
            continue;
        }

        let mut g = Graph::new();
        let params = model.bind(&mut g, true);
        let source_params = source_model.bind(&mut g, false);
        let pair = BatchPair {
            target: target_batch.as_ref(),
            negatives: negative_batch.as_ref(),
            regularizer: reg.as_ref(),
        };
        let stream = SourceStream {
            model: source_model,
            params: &source_params,
        };
        let terms = losses::combined_loss(&mut g, model, &params, stream, &pair, &loss_cfg)?;
        g.backward(terms.total)?;
        model.sgd_step(&g, &params, cfg.learning_rate);
        sum_s += g.value(terms.supervised).item()?;
        if let Some(u) = terms.unsupervised {
            sum_u += g.value(u).item()?;
        }
        outcome.updates += 1;
    }
    if outcome.updates > 0 {
        outcome.loss_s = sum_s / outcome.updates as f64;
        outcome.loss_u = sum_u / outcome.updates as f64;
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub history: AdaptHistory,
    pub model: Model,
    /// PR curve of the final model on the evaluation split.
    pub final_curve: PrCurve,
}

fn evaluate(model: &Model, scenes: &[Scene], cfg: &AdaptConfig) -> Result<PrCurve> {
    detector::evaluate(
        &ModelDetector::new(model, cfg.sweep),
        scenes,
        cfg.eval_thresholds,
        cfg.match_policy,
    )
}

/// Runs `n_iterations` adaptation iterations starting from a copy of the
/// source model, which itself is only read.
pub fn run_adaptation(cfg: &AdaptConfig, data: &DetectionData, source_model: &Model) -> Result<AdaptRun> {
    cfg.validate()?;
    if data.target_pool.is_empty() || data.eval.is_empty() {
        return Err(Error::Config("target pool and evaluation split must be non-empty".into()));
    }
    let mut model = source_model.clone();
    let mut history = AdaptHistory::default();

    if !cfg.method.trains() {
        let curve = evaluate(&model, &data.eval, cfg)?;
        let best = curve.best_f1();
        for iteration in 0..cfg.n_iterations {
            history.records.push(IterationRecord {
                iteration,
                n_pseudo: 0,
                pseudo_precision: None,
                precision: best.precision,
                recall: best.recall,
                f1: best.f1,
                loss_s: 0.0,
                loss_u: 0.0,
                no_pseudo_labels: false,
            });
        }
        return Ok(AdaptRun {
            history,
            model,
            final_curve: curve,
        });
    }

    let pool = SourcePool::new(&data.source, &cfg.sweep)?;
    let mut curve = None;
    for iteration in 0..cfg.n_iterations {
        let chosen = choose_images(
            data.target_pool.len(),
            cfg.target_images_per_iter,
            &mut rng::stream(cfg.seed, "target-images", iteration as u64),
        );
        let images: Vec<Scene> = chosen.iter().map(|&i| data.target_pool[i].clone()).collect();
        let out = adapt_iteration(&mut model, source_model, &images, &pool, cfg, iteration)?;
        let c = evaluate(&model, &data.eval, cfg)?;
        let best = c.best_f1();
        debug!(
            "{} iteration {iteration}: {} pseudo-labels, f1 {:.4}",
            cfg.method.name(),
            out.pseudo.len(),
            best.f1
        );
        history.records.push(IterationRecord {
            iteration,
            n_pseudo: out.pseudo.len(),
            pseudo_precision: out.pseudo_precision(),
            precision: best.precision,
            recall: best.recall,
            f1: best.f1,
            loss_s: out.loss_s,
            loss_u: out.loss_u,
            no_pseudo_labels: out.pseudo.is_empty(),
        });
        curve = Some(c);
    }
    Ok(AdaptRun {
        history,
        model,
        final_curve: curve.expect("at least one iteration"),
    })
}

fn ewm_activations(model: &Model, rows: &[&[f64]]) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let x = g.constant(stack(rows)?);
    let out = model.forward(&mut g, &params, x)?;
    Ok(g.value(out.ewm).clone())
}

/// Element-wise-multiply layer centers of correct and incorrect
/// pseudo-labels, compared with the center of source positives, all
/// computed through `model`.
pub fn pseudo_label_centers(
    model: &Model,
    pseudo: &[PseudoLabel],
    source_positives: &[WindowSample],
) -> Result<Vec<CenterDistance>> {
    if source_positives.is_empty() {
        return Err(Error::Contract("no source positives for the reference center".into()));
    }
    let split = |correct: bool| -> Result<Option<Tensor>> {
        let rows: Vec<&[f64]> = pseudo
            .iter()
            .filter(|p| p.correct == correct)
            .map(|p| p.sample.pixels.as_slice())
            .collect();
        if rows.is_empty() {
            Ok(None)
        } else {
            ewm_activations(model, &rows).map(Some)
        }
    };
    let t = split(true)?;
    let f = split(false)?;
    let src_rows: Vec<&[f64]> = source_positives.iter().map(|w| w.pixels.as_slice()).collect();
    let s = ewm_activations(model, &src_rows)?;
    losses::center_diagnostic(t.as_ref(), f.as_ref(), &s)
}
