use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Window};
use crate::rng;

pub const DEFAULT_POS_IOU: f64 = 0.5;
pub const DEFAULT_NEG_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Appearance statistics of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub background_level: f64,
    pub background_noise_sd: f64,
    /// Peak intensity added by a blob.
    pub blob_contrast: f64,
    /// Head radius range in pixels; the annotation is the `2r × 2r` square.
    pub blob_radius_range: (f64, f64),
    pub object_count_range: (usize, usize),
    /// Expected elongated distractors per image.
    pub distractor_rate: f64,
}

fn default_image_size() -> usize {
    32
}

impl DomainParams {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.blob_radius_range;
        let (c0, c1) = self.object_count_range;
        let ok = self.image_size >= 8
            && r0 > 0.0
            && r0 <= r1
            && 2.0 * r1 < self.image_size as f64
            && c0 <= c1
            && self.distractor_rate >= 0.0
            && self.background_noise_sd >= 0.0
            && (0.0..=1.0).contains(&self.background_level)
            && self.blob_contrast > self.background_noise_sd;
        if !ok {
            return Err(Error::Config(format!("invalid domain parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub bbox: BoundingBox,
    pub label: u8,
    /// Present only on auto-annotated samples.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub annotations: Vec<Annotation>,
    pub domain: Domain,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BoundingBox> {
        self.annotations
            .iter()
            .filter(|a| a.label == 1)
            .map(|a| a.bbox)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.height * self.width {
            return Err(Error::Format("pixel count disagrees with image size".into()));
        }
        for a in &self.annotations {
            if !a.bbox.has_positive_extent()
                || !a.bbox.within(self.width as f64, self.height as f64)
                || a.label > 1
                || a.confidence.is_some_and(|c| !(0.0..=1.0).contains(&c))
            {
                return Err(Error::Format(format!("invalid annotation {a:?}")));
            }
        }
        Ok(())
    }
}

/// One crop of a scene prepared for training or inference.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub pixels: Vec<f64>,
    pub window: Window,
    /// Window-normalized target box; present iff `label == 1`.
    pub box_target: Option<[f64; 4]>,
    pub label: u8,
}

/// Scenes `0..n_images` of a seeded stream.
pub fn gen_detection_dataset(
    params: &DomainParams,
    n_images: usize,
    seed: u64,
    domain: Domain,
) -> Result<Vec<Scene>> {
    gen_detection_range(params, 0, n_images, seed, domain)
}

/// Scenes `start..start+count`; each scene depends only on `(params, seed,
/// index)`, so disjoint ranges give disjoint splits of the same stream.
pub fn gen_detection_range(
    params: &DomainParams,
    start: usize,
    count: usize,
    seed: u64,
    domain: Domain,
) -> Result<Vec<Scene>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::Config("n_images must be positive".into()));
    }
    Ok((start..start + count)
        .map(|i| gen_scene(params, seed, i as u64, domain))
        .collect())
}

struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
}

fn gen_scene(p: &DomainParams, seed: u64, index: u64, domain: Domain) -> Scene {
    let mut rng = rng::stream(seed, "scene", index);
    let size = p.image_size;
    let sz = size as f64;
    let (r0, r1) = p.blob_radius_range;
    let n_heads = rng.random_range(p.object_count_range.0..=p.object_count_range.1);

    let mut heads: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..n_heads {
        for _ in 0..50 {
            let r = if r1 > r0 { rng.random_range(r0..r1) } else { r0 };
            let cx = rng.random_range(r..=sz - r);
            let cy = rng.random_range(r..=sz - r);
            let clear = heads
                .iter()
                .all(|&(hx, hy, hr)| ((hx - cx).powi(2) + (hy - cy).powi(2)).sqrt() >= hr + r + 1.0);
            if clear {
                heads.push((cx, cy, r));
                break;
            }
        }
    }

    let mut n_distractors = p.distractor_rate.floor() as usize;
    if rng.random::<f64>() < p.distractor_rate.fract() {
        n_distractors += 1;
    }
    let mut blobs: Vec<Blob> = heads
        .iter()
        .map(|&(cx, cy, r)| Blob {
            cx,
            cy,
            sx: r / 2.0,
            sy: r / 2.0,
        })
        .collect();
    for _ in 0..n_distractors {
        for _ in 0..50 {
            let long = 0.9 * r1;
            let short = r0 / 3.0;
            let horizontal = rng.random::<bool>();
            let cx = rng.random_range(0.0..sz);
            let cy = rng.random_range(0.0..sz);
            let clear = heads
                .iter()
                .all(|&(hx, hy, hr)| ((hx - cx).powi(2) + (hy - cy).powi(2)).sqrt() >= hr + 4.0);
            if clear {
                let (sx, sy) = if horizontal { (long, short) } else { (short, long) };
                blobs.push(Blob { cx, cy, sx, sy });
                break;
            }
        }
    }

    let noise = Normal::new(0.0, p.background_noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = p.background_level;
            if p.background_noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            for b in &blobs {
                let dx = (px - b.cx) / b.sx;
                let dy = (py - b.cy) / b.sy;
                v += p.blob_contrast * (-0.5 * (dx * dx + dy * dy)).exp();
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }

    let annotations = heads
        .iter()
        .map(|&(cx, cy, r)| Annotation {
            bbox: BoundingBox::new(cx - r, cy - r, 2.0 * r, 2.0 * r),
            label: 1,
            confidence: None,
        })
        .collect();
    Scene {
        height: size,
        width: size,
        pixels,
        annotations,
        domain,
    }
}

/// All window placements of a sweep, row by row.
pub fn sweep_windows(scene: &Scene, window: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    if window > scene.width || window > scene.height || stride == 0 {
        return out;
    }
    for y in (0..=scene.height - window).step_by(stride) {
        for x in (0..=scene.width - window).step_by(stride) {
            out.push(Window { x, y, size: window });
        }
    }
    out
}

pub fn crop(scene: &Scene, w: &Window) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.size * w.size);
    for row in w.y..w.y + w.size {
        let start = row * scene.width + w.x;
        out.extend_from_slice(&scene.pixels[start..start + w.size]);
    }
    out
}

/// Labels every sweep window against the scene's positive annotations.
///
/// Windows with best IoU `>= pos_iou` become positives whose box target is
/// the matched annotation clipped to the window; windows below `neg_iou` are
/// negatives; everything in between is dropped.
pub fn extract_windows(
    scene: &Scene,
    window: usize,
    stride: usize,
    pos_iou: f64,
    neg_iou: f64,
) -> Vec<WindowSample> {
    let gts = scene.gt_boxes();
    let mut out = Vec::new();
    for w in sweep_windows(scene, window, stride) {
        let wb = w.bbox();
        let best = gts
            .iter()
            .map(|g| (wb.iou(g), g))
            .fold(None, |acc: Option<(f64, &BoundingBox)>, (iou, g)| match acc {
                Some((a, _)) if a >= iou => acc,
                _ => Some((iou, g)),
            });
        let best_iou = best.map_or(0.0, |(i, _)| i);
        if best_iou >= pos_iou {
            let g = best.unwrap().1;
            let clipped = wb.intersection(g).expect("positive IoU overlaps");
            out.push(WindowSample {
                pixels: crop(scene, &w),
                window: w,
                box_target: Some(w.normalize(&clipped)),
                label: 1,
            });
        } else if best_iou < neg_iou {
            out.push(WindowSample {
                pixels: crop(scene, &w),
                window: w,
                box_target: None,
                label: 0,
            });
        }
    }
    out
}
