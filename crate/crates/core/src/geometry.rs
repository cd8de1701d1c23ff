//! Pixel-space boxes under the half-open convention `[x_min, x_max) x [y_min, y_max)`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BBox {
    pub const fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> i32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min
    }

    /// Area in pixels; zero for degenerate boxes.
    pub fn area(&self) -> i64 {
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            0
        } else {
            i64::from(self.width()) * i64::from(self.height())
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.x_min) + f64::from(self.x_max)) / 2.0,
            (f64::from(self.y_min) + f64::from(self.y_max)) / 2.0,
        )
    }

    /// True when the box is non-empty and lies inside a `width x height` frame.
    pub fn is_valid_in(&self, width: usize, height: usize) -> bool {
        self.x_min >= 0
            && self.y_min >= 0
            && self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max as i64 <= width as i64
            && self.y_max as i64 <= height as i64
    }

    /// Intersect with the frame; `None` when nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(0),
            y_min: self.y_min.max(0),
            x_max: self.x_max.min(width as i32),
            y_max: self.y_max.min(height as i32),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0);
        i64::from(w) * i64::from(h)
    }

    pub fn contains_pixel(&self, x: i32, y: i32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Intersection over union under the half-open convention; 0 when the union
/// is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}
