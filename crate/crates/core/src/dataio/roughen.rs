//! Box roughening: imitates lazy, inconsistent manual annotation by growing
//! and shifting tight boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BoxAnnotation;
use crate::geometry::BBox;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoughenSpec {
    pub max_dilate_px: u32,
    pub max_shift_px: u32,
}

/// Per-side dilation and a translation, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoxJitter {
    pub left: i32,
    pub top: i32,
    pub right: i32,
    pub bottom: i32,
    pub shift_x: i32,
    pub shift_y: i32,
}

/// Apply a jitter to one box. The shift is limited so the original centre
/// stays inside the result; the result is clipped to the frame.
pub fn roughen_box(b: BBox, j: BoxJitter, width: usize, height: usize) -> BBox {
    let (x0, x1) = axis(b.x_min, b.x_max, j.left, j.right, j.shift_x);
    let (y0, y1) = axis(b.y_min, b.y_max, j.top, j.bottom, j.shift_y);
    BBox::new(x0, y0, x1, y1)
        .clip(width, height)
        .expect("original centre lies in the frame and in the roughened box")
}

fn axis(lo: i32, hi: i32, grow_lo: i32, grow_hi: i32, shift: i32) -> (i32, i32) {
    let lo2 = lo - grow_lo;
    let hi2 = hi + grow_hi;
    // Centre c = (lo + hi) / 2 must satisfy lo2 + s <= c < hi2 + s, i.e. in
    // doubled integer units 2(lo2 + s) <= lo + hi and lo + hi < 2(hi2 + s).
    let sum = lo + hi;
    let s_max = (sum - 2 * lo2).div_euclid(2);
    let s_min = (sum - 2 * hi2).div_euclid(2) + 1;
    let s = shift.clamp(s_min, s_max);
    (lo2 + s, hi2 + s)
}

/// Independently roughen every annotation with uniform integer offsets:
/// dilation in `0..=max_dilate_px` per side, shift in `±max_shift_px`.
pub fn roughen_boxes(
    annotations: &[BoxAnnotation],
    frame: (usize, usize),
    spec: RoughenSpec,
    seed: u64,
) -> Vec<BoxAnnotation> {
    let mut r = rng::rng(seed);
    let d = spec.max_dilate_px as i32;
    let s = spec.max_shift_px as i32;
    annotations
        .iter()
        .map(|a| {
            let j = BoxJitter {
                left: r.random_range(0..=d),
                top: r.random_range(0..=d),
                right: r.random_range(0..=d),
                bottom: r.random_range(0..=d),
                shift_x: r.random_range(-s..=s),
                shift_y: r.random_range(-s..=s),
            };
            BoxAnnotation::new(&a.image_id, roughen_box(a.bbox(), j, frame.0, frame.1))
        })
        .collect()
}
