//! Sliding-window detection: sweep, batched scoring, mapping back to image
//! coordinates and NMS. Also the ground-truth oracle used to test the
//! auto-annotation path end to end.

use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::eval::{self, Detection, ImageResult, MatchPolicy, PrCurve, NMS_IOU};
use crate::geometry::{BoundingBox, Window};
use crate::network::Model;
use crate::synthdata::{crop, sweep_windows, Scene, DEFAULT_NEG_IOU, DEFAULT_POS_IOU};

const MIN_EXTENT: f64 = 1e-3;

/// Window geometry and the IoU cutoffs that label windows for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub window: usize,
    pub stride: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            window: 8,
            stride: 4,
            pos_iou: DEFAULT_POS_IOU,
            neg_iou: DEFAULT_NEG_IOU,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || !(self.neg_iou <= self.pos_iou) {
            return Err(Error::Config(format!("invalid sweep {self:?}")));
        }
        Ok(())
    }
}

/// A detection together with the window it came from and its box in
/// window-normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDetection {
    pub detection: Detection,
    pub window: Window,
    pub pixels: Vec<f64>,
    pub box_norm: [f64; 4],
}

pub trait Detector {
    fn detect(&self, scene: &Scene) -> Result<Vec<WindowDetection>>;
}

pub struct ModelDetector<'a> {
    pub model: &'a Model,
    pub sweep: SweepConfig,
    pub nms_iou: f64,
}

impl<'a> ModelDetector<'a> {
    pub fn new(model: &'a Model, sweep: SweepConfig) -> Self {
        ModelDetector {
            model,
            sweep,
            nms_iou: NMS_IOU,
        }
    }
}

fn clip_to_window(v: &[f64; 4]) -> [f64; 4] {
    let x0 = v[0].clamp(0.0, 1.0);
    let y0 = v[1].clamp(0.0, 1.0);
    let x1 = (v[0] + v[2]).clamp(0.0, 1.0);
    let y1 = (v[1] + v[3]).clamp(0.0, 1.0);
    [x0, y0, x1 - x0, y1 - y0]
}

impl Detector for ModelDetector<'_> {
    fn detect(&self, scene: &Scene) -> Result<Vec<WindowDetection>> {
        let windows = sweep_windows(scene, self.sweep.window, self.sweep.stride);
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.sweep.window * self.sweep.window;
        let crops: Vec<Vec<f64>> = windows.iter().map(|w| crop(scene, w)).collect();
        let inputs = Tensor::new(vec![windows.len(), dim], crops.concat())?;
        let pred = self.model.predict(&inputs)?;
        if pred.confidence.len() != windows.len() {
            return Err(Error::Contract("detector needs a detection head".into()));
        }
        let s = self.sweep.window as f64;
        let min_norm = MIN_EXTENT / s;
        let mut all = Vec::with_capacity(windows.len());
        for (i, (w, pixels)) in windows.into_iter().zip(crops).enumerate() {
            let mut b = clip_to_window(&pred.boxes[i]);
            b[2] = b[2].max(min_norm);
            b[3] = b[3].max(min_norm);
            all.push(WindowDetection {
                detection: Detection {
                    bbox: w.denormalize(&b),
                    confidence: pred.confidence[i],
                },
                window: w,
                pixels,
                box_norm: b,
            });
        }
        let dets: Vec<Detection> = all.iter().map(|d| d.detection).collect();
        let keep = eval::nms_indices(&dets, self.nms_iou);
        Ok(keep.into_iter().map(|i| all[i].clone()).collect())
    }
}

/// Reports every ground-truth box at confidence 1, attributed to the sweep
/// window overlapping it most.
pub struct OracleDetector {
    pub sweep: SweepConfig,
}

impl Detector for OracleDetector {
    fn detect(&self, scene: &Scene) -> Result<Vec<WindowDetection>> {
        let windows = sweep_windows(scene, self.sweep.window, self.sweep.stride);
        let mut out = Vec::new();
        for gt in scene.gt_boxes() {
            let Some(w) = windows
                .iter()
                .copied()
                .max_by(|a, b| a.bbox().iou(&gt).total_cmp(&b.bbox().iou(&gt)))
            else {
                break;
            };
            let clipped = w.bbox().intersection(&gt).unwrap_or(gt);
            out.push(WindowDetection {
                detection: Detection {
                    bbox: gt,
                    confidence: 1.0,
                },
                window: w,
                pixels: crop(scene, &w),
                box_norm: w.normalize(&clipped),
            });
        }
        Ok(out)
    }
}

pub fn detect_all(detector: &dyn Detector, scenes: &[Scene]) -> Result<Vec<ImageResult>> {
    scenes
        .iter()
        .map(|s| {
            Ok(ImageResult {
                detections: detector.detect(s)?.into_iter().map(|d| d.detection).collect(),
                gt: s.gt_boxes(),
            })
        })
        .collect()
}

/// PR curve of a detector over labeled scenes.
pub fn evaluate(
    detector: &dyn Detector,
    scenes: &[Scene],
    n_thresholds: usize,
    policy: MatchPolicy,
) -> Result<PrCurve> {
    eval::pr_curve(&detect_all(detector, scenes)?, n_thresholds, policy)
}

/// True when `b` overlaps some ground-truth box above the match threshold.
pub fn matches_any(b: &BoundingBox, gts: &[BoundingBox]) -> bool {
    gts.iter().any(|g| g.iou(b) > eval::MATCH_IOU)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_detector, DetectorConfig};
    use crate::synthdata::{gen_detection_dataset, Domain, DomainParams};

    fn scenes() -> Vec<Scene> {
        let p = DomainParams {
            image_size: 32,
            background_level: 0.2,
            background_noise_sd: 0.05,
            blob_contrast: 0.6,
            blob_radius_range: (3.0, 4.0),
            object_count_range: (1, 3),
            distractor_rate: 0.5,
        };
        gen_detection_dataset(&p, 6, 4, Domain::Source).unwrap()
    }

    #[test]
    fn oracle_is_perfect() {
        let s = scenes();
        let oracle = OracleDetector {
            sweep: SweepConfig::default(),
        };
        let best = evaluate(&oracle, &s, 11, MatchPolicy::default()).unwrap().best_f1();
        assert_eq!((best.precision, best.recall), (1.0, 1.0));
    }

    #[test]
    fn model_detections_are_suppressed_and_inside_windows() {
        let model = Model::initialized(build_detector(&DetectorConfig::default()).unwrap().arch().clone(), 3)
            .unwrap();
        let det = ModelDetector::new(&model, SweepConfig::default());
        let out = det.detect(&scenes()[0]).unwrap();
        assert!(!out.is_empty() && out.len() <= 49);
        for (i, a) in out.iter().enumerate() {
            assert!(a.detection.bbox.has_positive_extent());
            assert!(a.box_norm.iter().all(|v| (0.0..=1.0).contains(v)));
            for b in &out[i + 1..] {
                assert!(a.detection.bbox.iou(&b.detection.bbox) < NMS_IOU);
            }
        }
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_to_window(&[0.5, -0.25, 0.75, 0.5]), [0.5, 0.0, 0.5, 0.25]);
    }
}
