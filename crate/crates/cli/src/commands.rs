use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use domain_adapt::adapt::{
    auto_annotate, pseudo_label_centers, run_adaptation, run_classification_adaptation,
    train_classifier_source, train_source, AdaptConfig, AdaptRun, ClassSetting, DetectionData,
    MethodVariant,
};
use domain_adapt::detector::{self, ModelDetector};
use domain_adapt::eval::{classification_accuracy, PrCurve, PrPoint};
use domain_adapt::losses::centers_csv;
use domain_adapt::network::{build_classifier, build_detector, Model, ModelWeights};
use domain_adapt::synthdata::{
    extract_windows, gen_classification_set, gen_detection_range, load_classification_set,
    load_dataset, save_classification_set, save_dataset, Domain, LabeledSet, Scene,
};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;

const SOURCE: &str = "data/source.scenes";
const SOURCE_EVAL: &str = "data/source_eval.scenes";
const TARGET_POOL: &str = "data/target_pool.scenes";
const TARGET_EVAL: &str = "data/target_eval.scenes";
const CLASS_SOURCE: &str = "data/class_source.points";
const CLASS_TARGET: &str = "data/class_target.points";
const CLASS_EVAL: &str = "data/class_eval.points";
const SOURCE_WEIGHTS: &str = "source_model.weights";

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn echo(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("parameters serialize")
}

fn read_scenes(cfg: &ExperimentConfig, rel: &str, expected: &str) -> Result<Vec<Scene>> {
    let path = cfg.out_dir.join(rel);
    let (scenes, found) = load_dataset(&path)
        .with_context(|| format!("loading {} (run gen-data first)", path.display()))?;
    if found != expected {
        bail!("{} was generated from different parameters; rerun gen-data", path.display());
    }
    Ok(scenes)
}

fn read_points(cfg: &ExperimentConfig, rel: &str, expected: &str) -> Result<LabeledSet> {
    let path = cfg.out_dir.join(rel);
    let (set, found) = load_classification_set(&path)
        .with_context(|| format!("loading {} (run gen-data first)", path.display()))?;
    if found != expected {
        bail!("{} was generated from different parameters; rerun gen-data", path.display());
    }
    Ok(set)
}

fn detection_echo(cfg: &ExperimentConfig, domain: Domain) -> String {
    let params = match domain {
        Domain::Source => &cfg.source,
        Domain::Target => &cfg.target,
    };
    echo(&json!({ "seed": cfg.seed, "domain": domain, "params": params, "sizes": cfg.data }))
}

fn class_echo(cfg: &ExperimentConfig, split: &str) -> String {
    let c = &cfg.classification;
    let params = if split == "source" { &c.source } else { &c.target };
    echo(&json!({ "seed": cfg.seed, "split": split, "spec": c.spec, "params": params, "n_per_class": c.n_per_class }))
}

/// Generates the four detection splits and the three classification sets,
/// plus a manifest echoing the parameters and seeds.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.data;
    let dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let src_echo = detection_echo(cfg, Domain::Source);
    let tgt_echo = detection_echo(cfg, Domain::Target);
    let splits = [
        (SOURCE, &cfg.source, 0, d.source_images, Domain::Source, &src_echo),
        (SOURCE_EVAL, &cfg.source, d.source_images, d.source_eval_images, Domain::Source, &src_echo),
        (TARGET_POOL, &cfg.target, 0, d.target_pool_images, Domain::Target, &tgt_echo),
        (TARGET_EVAL, &cfg.target, d.target_pool_images, d.target_eval_images, Domain::Target, &tgt_echo),
    ];
    for (rel, params, start, count, domain, e) in splits {
        let scenes = gen_detection_range(params, start, count, cfg.seed, domain)?;
        save_dataset(cfg.out_dir.join(rel), &scenes, e)?;
        info!("wrote {count} scenes to {rel}");
    }
    let c = &cfg.classification;
    for (rel, params, split) in [
        (CLASS_SOURCE, &c.source, "source"),
        (CLASS_TARGET, &c.target, "target"),
        (CLASS_EVAL, &c.target, "eval"),
    ] {
        let set = gen_classification_set(&c.spec, params, c.n_per_class, cfg.seed, split)?;
        save_classification_set(cfg.out_dir.join(rel), &set, &class_echo(cfg, split))?;
    }
    write_json(
        &cfg.out_dir.join("manifest.json"),
        &json!({
            "seeds": {
                "detection_data": cfg.seed,
                "classification_data": cfg.seed,
                "model_init": cfg.seed,
                "source_training": cfg.seed,
                "adaptation": cfg.adapt.seed,
                "classification_adaptation": cfg.classification.adapt.seed,
            },
            "splits": {
                "source": [0, d.source_images],
                "source_eval": [d.source_images, d.source_images + d.source_eval_images],
                "target_pool": [0, d.target_pool_images],
                "target_eval": [d.target_pool_images, d.target_pool_images + d.target_eval_images],
            },
            "config": cfg,
        }),
    )
}

fn load_source_model(cfg: &ExperimentConfig) -> Result<Model> {
    let path = cfg.out_dir.join(SOURCE_WEIGHTS);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {} (run train-source first)", path.display()))?;
    let model = Model::from_weights(&ModelWeights::from_bytes(&bytes)?)?;
    if model.arch() != build_detector(&cfg.detector())?.arch() {
        bail!("{} does not match the configured detector", path.display());
    }
    Ok(model)
}

/// Trains the source detector; writes its weights and per-epoch losses, and
/// returns the best-F1 point on the source evaluation split.
pub fn train_source_cmd(cfg: &ExperimentConfig) -> Result<PrPoint> {
    let echo = detection_echo(cfg, Domain::Source);
    let source = read_scenes(cfg, SOURCE, &echo)?;
    let source_eval = read_scenes(cfg, SOURCE_EVAL, &echo)?;
    let arch = build_detector(&cfg.detector())?.arch().clone();
    let mut model = Model::initialized(arch, cfg.seed)?;
    let losses = train_source(&mut model, &source, &cfg.source_train())?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.6}")?;
    }
    write_atomic(&cfg.out_dir.join("source_loss.csv"), csv.as_bytes())?;
    write_atomic(&cfg.out_dir.join(SOURCE_WEIGHTS), &model.weights().to_bytes())?;
    let curve = evaluate_model(&model, &source_eval, &cfg.adapt)?;
    let best = curve.best_f1();
    info!("source model on source eval: p {:.3} r {:.3} f1 {:.3}", best.precision, best.recall, best.f1);
    Ok(best)
}

fn evaluate_model(model: &Model, scenes: &[Scene], adapt: &AdaptConfig) -> Result<PrCurve> {
    Ok(detector::evaluate(
        &ModelDetector::new(model, adapt.sweep),
        scenes,
        adapt.eval_thresholds,
        adapt.match_policy,
    )?)
}

fn detection_data(cfg: &ExperimentConfig) -> Result<DetectionData> {
    let src = detection_echo(cfg, Domain::Source);
    let tgt = detection_echo(cfg, Domain::Target);
    Ok(DetectionData {
        source: read_scenes(cfg, SOURCE, &src)?,
        target_pool: read_scenes(cfg, TARGET_POOL, &tgt)?,
        eval: read_scenes(cfg, TARGET_EVAL, &tgt)?,
    })
}

/// Best-F1 operating point of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub scene: String,
    pub threshold: f64,
    pub p: f64,
    pub one_minus_p: f64,
    pub r: f64,
    pub f1: f64,
}

impl MethodSummary {
    fn new(method: MethodVariant, best: PrPoint) -> Self {
        MethodSummary {
            method: method.name().to_string(),
            scene: "target_eval".to_string(),
            threshold: best.threshold,
            p: best.precision,
            one_minus_p: 1.0 - best.precision,
            r: best.recall,
            f1: best.f1,
        }
    }
}

fn write_run(cfg: &ExperimentConfig, data: &DetectionData, method: MethodVariant, run: &AdaptRun) -> Result<MethodSummary> {
    let dir = cfg.out_dir.join("adapt").join(method.name());
    write_atomic(&dir.join("history.csv"), run.history.to_csv().as_bytes())?;
    write_atomic(&dir.join("pr_curve.csv"), run.final_curve.to_csv().as_bytes())?;
    write_atomic(&dir.join("final.weights"), &run.model.weights().to_bytes())?;
    let pseudo = auto_annotate(
        &ModelDetector::new(&run.model, cfg.adapt.sweep),
        &data.target_pool,
        cfg.adapt.tau_annotate,
    )?;
    let s = cfg.adapt.sweep;
    let positives: Vec<_> = data
        .source
        .iter()
        .flat_map(|sc| extract_windows(sc, s.window, s.stride, s.pos_iou, s.neg_iou))
        .filter(|w| w.label == 1)
        .collect();
    let centers = pseudo_label_centers(&run.model, &pseudo, &positives)?;
    write_atomic(&dir.join("centers.csv"), centers_csv(&centers).as_bytes())?;
    let summary = MethodSummary::new(method, run.final_curve.best_f1());
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn adapt_one(cfg: &ExperimentConfig, data: &DetectionData, source: &Model, method: MethodVariant) -> Result<MethodSummary> {
    let acfg = AdaptConfig {
        method,
        ..cfg.adapt.clone()
    };
    let run = run_adaptation(&acfg, data, source)?;
    ensure!(run.history.len() == acfg.n_iterations, "history has {} rows", run.history.len());
    let summary = write_run(cfg, data, method, &run)?;
    info!("{}: p {:.3} r {:.3} f1 {:.3}", method.name(), summary.p, summary.r, summary.f1);
    Ok(summary)
}

/// Runs the configured method (or `method` when given).
pub fn adapt_cmd(cfg: &ExperimentConfig, method: Option<MethodVariant>) -> Result<MethodSummary> {
    let data = detection_data(cfg)?;
    let source = load_source_model(cfg)?;
    adapt_one(cfg, &data, &source, method.unwrap_or(cfg.adapt.method))
}

pub fn summary_csv(rows: &[MethodSummary]) -> String {
    let mut s = String::from("method,threshold,one_minus_precision,recall,f1\n");
    for r in rows {
        writeln!(s, "{},{:.4},{:.6},{:.6},{:.6}", r.method, r.threshold, r.one_minus_p, r.r, r.f1).unwrap();
    }
    s
}

/// All five methods on the same data and seeds, plus the summary table.
pub fn compare_cmd(cfg: &ExperimentConfig) -> Result<Vec<MethodSummary>> {
    let data = detection_data(cfg)?;
    let source = load_source_model(cfg)?;
    let rows = MethodVariant::ALL
        .into_iter()
        .map(|m| adapt_one(cfg, &data, &source, m))
        .collect::<Result<Vec<_>>>()?;
    let dir = cfg.out_dir.join("compare");
    write_atomic(&dir.join("summary.csv"), summary_csv(&rows).as_bytes())?;
    write_json(&dir.join("summary.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub seed: u64,
    pub source_only: f64,
    pub unsupervised: f64,
    pub supervised: f64,
    pub unsupervised_history: Vec<f64>,
    pub supervised_history: Vec<f64>,
}

/// Source-only, unsupervised and supervised accuracies on the target
/// evaluation set.
pub fn classify_cmd(cfg: &ExperimentConfig) -> Result<ClassifyReport> {
    let c = &cfg.classification;
    let source = read_points(cfg, CLASS_SOURCE, &class_echo(cfg, "source"))?;
    let target = read_points(cfg, CLASS_TARGET, &class_echo(cfg, "target"))?;
    let eval = read_points(cfg, CLASS_EVAL, &class_echo(cfg, "eval"))?;
    let arch = build_classifier(&c.classifier())?.arch().clone();
    let mut model = Model::initialized(arch, cfg.seed)?;
    train_classifier_source(&mut model, &source, c.epochs, c.batch_size, c.learning_rate, cfg.seed)?;
    let source_only = classification_accuracy(&model, &eval)?;
    let unsup = run_classification_adaptation(&c.adapt, ClassSetting::Unsupervised, &model, &source, &target, &eval)?;
    let sup = run_classification_adaptation(
        &c.adapt,
        ClassSetting::Supervised {
            labeled_per_class: c.labeled_per_class,
        },
        &model,
        &source,
        &target,
        &eval,
    )?;
    let last = |v: &[f64]| *v.last().expect("at least one iteration");
    let report = ClassifyReport {
        seed: cfg.seed,
        source_only,
        unsupervised: last(&unsup.accuracy),
        supervised: last(&sup.accuracy),
        unsupervised_history: unsup.accuracy,
        supervised_history: sup.accuracy,
    };
    let dir = cfg.out_dir.join("classify");
    let csv = format!(
        "setting,accuracy\nsource_only,{:.6}\nunsupervised,{:.6}\nsupervised,{:.6}\n",
        report.source_only, report.unsupervised, report.supervised
    );
    write_atomic(&dir.join("accuracy.csv"), csv.as_bytes())?;
    write_json(&dir.join("accuracy.json"), &report)?;
    Ok(report)
}

/// Scores a weights file (the source model by default) on the target
/// evaluation split.
pub fn eval_cmd(cfg: &ExperimentConfig, weights: Option<&Path>) -> Result<MethodSummary> {
    let path: PathBuf = weights.map_or_else(|| cfg.out_dir.join(SOURCE_WEIGHTS), Path::to_path_buf);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let model = Model::from_weights(&ModelWeights::from_bytes(&bytes)?)?;
    let eval = read_scenes(cfg, TARGET_EVAL, &detection_echo(cfg, Domain::Target))?;
    let curve = evaluate_model(&model, &eval, &cfg.adapt)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let dir = cfg.out_dir.join("eval").join(name);
    write_atomic(&dir.join("pr_curve.csv"), curve.to_csv().as_bytes())?;
    let best = curve.best_f1();
    let summary = MethodSummary {
        method: name.to_string(),
        ..MethodSummary::new(MethodVariant::SourceOnly, best)
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}
