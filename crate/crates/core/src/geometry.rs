use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel units: top-left corner plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn has_positive_extent(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Intersection over union; callers guarantee positive extents.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        // `x + w - x` need not round back to `w`
        if self == other {
            return 1.0;
        }
        match self.intersection(other) {
            Some(i) => {
                let inter = i.area();
                inter / (self.area() + other.area() - inter)
            }
            None => 0.0,
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Square crop location inside a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl Window {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.x as f64, self.y as f64, self.size as f64, self.size as f64)
    }

    /// Maps an image box into window-normalized `[x, y, w, h]`.
    pub fn normalize(&self, b: &BoundingBox) -> [f64; 4] {
        let s = self.size as f64;
        [
            (b.x - self.x as f64) / s,
            (b.y - self.y as f64) / s,
            b.w / s,
            b.h / s,
        ]
    }

    pub fn denormalize(&self, v: &[f64; 4]) -> BoundingBox {
        let s = self.size as f64;
        BoundingBox::new(self.x as f64 + v[0] * s, self.y as f64 + v[1] * s, v[2] * s, v[3] * s)
    }
}
