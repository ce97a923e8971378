use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use domain_adapt::adapt::{AdaptConfig, ClassAdaptConfig, SourceTrainConfig};
use domain_adapt::network::{ClassifierConfig, DetectorConfig};
use domain_adapt::synthdata::{ClassDomainParams, ClassificationSpec, DomainParams};
use serde::{Deserialize, Serialize};

/// Image counts of the four detection splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSizes {
    pub source_images: usize,
    pub source_eval_images: usize,
    pub target_pool_images: usize,
    pub target_eval_images: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            source_images: 1000,
            source_eval_images: 100,
            target_pool_images: 500,
            target_eval_images: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SourceTraining {
    fn default() -> Self {
        SourceTraining {
            epochs: 150,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub hidden: Vec<usize>,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            hidden: DetectorConfig::default().hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationSection {
    pub spec: ClassificationSpec,
    pub source: ClassDomainParams,
    pub target: ClassDomainParams,
    pub n_per_class: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub labeled_per_class: usize,
    pub adapt: ClassAdaptConfig,
}

impl Default for ClassificationSection {
    fn default() -> Self {
        ClassificationSection {
            spec: ClassificationSpec {
                dim: 4,
                classes: 3,
                mean_radius: 2.0,
                noise_sd: 0.6,
            },
            source: ClassDomainParams::identity(),
            target: ClassDomainParams {
                rotation_deg: 35.0,
                translation: 0.8,
                cov_scale: 1.2,
            },
            n_per_class: 100,
            hidden: vec![16],
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            labeled_per_class: 3,
            adapt: ClassAdaptConfig::default(),
        }
    }
}

impl ClassificationSection {
    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: self.spec.dim,
            hidden: self.hidden.clone(),
            classes: self.spec.classes,
        }
    }
}

/// Everything one experiment needs; commands read nothing else besides the
/// files earlier commands wrote under `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSizes,
    pub source: DomainParams,
    pub target: DomainParams,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub source_training: SourceTraining,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub classification: ClassificationSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        if self.source.image_size != self.target.image_size {
            bail!("source and target image sizes differ");
        }
        let d = &self.data;
        if d.source_images == 0 || d.source_eval_images == 0 || d.target_pool_images == 0 || d.target_eval_images == 0 {
            bail!("every split needs at least one image");
        }
        let st = &self.source_training;
        if st.batch_size < 2 || !(st.learning_rate > 0.0) {
            bail!("source_training needs batch_size >= 2 and a positive learning_rate");
        }
        self.adapt.validate()?;
        let c = &self.classification;
        c.spec.validate()?;
        c.adapt.validate()?;
        if c.n_per_class == 0 || c.batch_size == 0 || c.labeled_per_class == 0 || !(c.learning_rate > 0.0) {
            bail!("classification sizes and learning_rate must be positive");
        }
        Ok(())
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            window: self.adapt.sweep.window,
            hidden: self.detector.hidden.clone(),
        }
    }

    pub fn source_train(&self) -> SourceTrainConfig {
        SourceTrainConfig {
            epochs: self.source_training.epochs,
            batch_size: self.source_training.batch_size,
            learning_rate: self.source_training.learning_rate,
            seed: self.seed,
            sweep: self.adapt.sweep,
        }
    }

    /// Applies the command-line overrides; the adaptation seeds always follow
    /// the experiment seed.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>, voc_strict: bool) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        if voc_strict {
            self.adapt.match_policy = domain_adapt::eval::MatchPolicy::VocStrict;
        }
        self.adapt.seed = self.seed;
        self.classification.adapt.seed = self.seed;
        self
    }
}
