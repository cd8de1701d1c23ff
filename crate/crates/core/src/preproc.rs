//! Deterministic preprocessing (foreground crop, power-of-two resize,
//! intensity normalisation) and classical augmentation with exact box
//! propagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::rng;

pub const DEFAULT_FOREGROUND_THRESHOLD: f32 = 0.05;
pub const ALLOWED_TARGETS: [usize; 5] = [32, 64, 128, 256, 512];

/// Half-open crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropRect {
    pub fn full(image: &GrayImage) -> Self {
        CropRect {
            x0: 0,
            y0: 0,
            x1: image.width(),
            y1: image.height(),
        }
    }

    /// Move a box from source coordinates into the crop frame.
    pub fn apply(&self, b: BBox) -> Option<BBox> {
        BBox::new(
            b.x_min - self.x0 as i32,
            b.y_min - self.y0 as i32,
            b.x_max - self.x0 as i32,
            b.y_max - self.y0 as i32,
        )
        .clip(self.x1 - self.x0, self.y1 - self.y0)
    }
}

/// Tight crop around pixels brighter than `threshold`; the full frame when
/// nothing exceeds it.
pub fn foreground_crop(image: &GrayImage, threshold: f32) -> (GrayImage, CropRect) {
    let (w, h) = (image.width(), image.height());
    let mut rect: Option<CropRect> = None;
    for y in 0..h {
        for x in 0..w {
            if image.get(x, y) > threshold {
                let r = rect.get_or_insert(CropRect {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                });
                r.x0 = r.x0.min(x);
                r.y0 = r.y0.min(y);
                r.x1 = r.x1.max(x + 1);
                r.y1 = r.y1.max(y + 1);
            }
        }
    }
    let Some(rect) = rect else {
        return (image.clone(), CropRect::full(image));
    };
    let cw = rect.x1 - rect.x0;
    let ch = rect.y1 - rect.y0;
    let mut out = GrayImage::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            out.set(x, y, image.get(rect.x0 + x, rect.y0 + y));
        }
    }
    (out, rect)
}

/// Bilinear resize to `target x target` with half-pixel-centre alignment.
/// Boxes scale outward (floor mins, ceil maxes) and keep at least one pixel.
pub fn resize_pow2(image: &GrayImage, target: usize, boxes: &[BBox]) -> Result<(GrayImage, Vec<BBox>)> {
    if !ALLOWED_TARGETS.contains(&target) {
        return Err(Error::InvalidInput(format!(
            "resize target {target} is not one of {ALLOWED_TARGETS:?}"
        )));
    }
    if image.is_empty() {
        return Err(Error::InvalidInput("cannot resize an empty image".into()));
    }
    let out = resize_bilinear(image, target, target);
    let boxes = boxes
        .iter()
        .map(|&b| scale_box(b, (image.width(), image.height()), (target, target)))
        .collect();
    Ok((out, boxes))
}

pub fn resize_bilinear(image: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    if (w, h) == (out_w, out_h) {
        return image.clone();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = GrayImage::new(out_w, out_h);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = f64::from(image.get(x0, y0)) * (1.0 - tx) + f64::from(image.get(x1, y0)) * tx;
            let bot = f64::from(image.get(x0, y1)) * (1.0 - tx) + f64::from(image.get(x1, y1)) * tx;
            out.set(ox, oy, (top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

/// Scale a box between frames, rounding outward.
pub fn scale_box(b: BBox, from: (usize, usize), to: (usize, usize)) -> BBox {
    let (fw, fh) = (from.0 as i64, from.1 as i64);
    let (tw, th) = (to.0 as i64, to.1 as i64);
    let floor = |v: i32, t: i64, f: i64| (i64::from(v) * t).div_euclid(f);
    let ceil = |v: i32, t: i64, f: i64| (i64::from(v) * t + f - 1).div_euclid(f);
    let mut x0 = floor(b.x_min, tw, fw).clamp(0, tw);
    let mut y0 = floor(b.y_min, th, fh).clamp(0, th);
    let mut x1 = ceil(b.x_max, tw, fw).clamp(0, tw);
    let mut y1 = ceil(b.y_max, th, fh).clamp(0, th);
    if x1 <= x0 {
        if x0 >= tw {
            x0 = tw - 1;
        }
        x1 = x0 + 1;
    }
    if y1 <= y0 {
        if y0 >= th {
            y0 = th - 1;
        }
        y1 = y0 + 1;
    }
    BBox::new(x0 as i32, y0 as i32, x1 as i32, y1 as i32)
}

/// Classical augmentation parameters. Flips are applied when set; rotation,
/// intensity scale and shift are drawn uniformly from their ranges with `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalAugSpec {
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub intensity_scale: (f64, f64),
    pub intensity_shift: (f64, f64),
    pub seed: u64,
}

impl Default for ClassicalAugSpec {
    fn default() -> Self {
        ClassicalAugSpec {
            hflip: false,
            vflip: false,
            rotation_deg: 0.0,
            intensity_scale: (1.0, 1.0),
            intensity_shift: (0.0, 0.0),
            seed: 0,
        }
    }
}

impl ClassicalAugSpec {
    pub fn flips(hflip: bool, vflip: bool) -> Self {
        ClassicalAugSpec {
            hflip,
            vflip,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=15.0).contains(&self.rotation_deg) {
            return Err(Error::InvalidConfig("rotation_deg must be in [0, 15]".into()));
        }
        let (a, b) = self.intensity_scale;
        if a > b || a <= 0.0 {
            return Err(Error::InvalidConfig("intensity_scale range must be positive and ordered".into()));
        }
        if self.intensity_shift.0 > self.intensity_shift.1 {
            return Err(Error::InvalidConfig("intensity_shift range must be ordered".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
    /// Boxes removed because rotation moved them out of the frame.
    pub dropped: usize,
}

pub fn hflip_box(b: BBox, width: usize) -> BBox {
    let w = width as i32;
    BBox::new(w - b.x_max, b.y_min, w - b.x_min, b.y_max)
}

pub fn vflip_box(b: BBox, height: usize) -> BBox {
    let h = height as i32;
    BBox::new(b.x_min, h - b.y_max, b.x_max, h - b.y_min)
}

pub fn classical_augment(image: &GrayImage, boxes: &[BBox], spec: &ClassicalAugSpec) -> Result<Augmented> {
    spec.validate()?;
    let (w, h) = (image.width(), image.height());
    if w != h {
        return Err(Error::InvalidInput(format!("classical augmentation needs a square image, got {w}x{h}")));
    }
    let mut r = rng::rng(spec.seed);
    let angle = if spec.rotation_deg > 0.0 {
        r.random_range(-spec.rotation_deg..=spec.rotation_deg)
    } else {
        0.0
    };
    let scale = uniform(&mut r, spec.intensity_scale);
    let shift = uniform(&mut r, spec.intensity_shift);

    let mut img = image.clone();
    let mut out_boxes = boxes.to_vec();
    if spec.hflip {
        let mut f = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set(w - 1 - x, y, img.get(x, y));
            }
        }
        img = f;
        out_boxes.iter_mut().for_each(|b| *b = hflip_box(*b, w));
    }
    if spec.vflip {
        let mut f = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set(x, h - 1 - y, img.get(x, y));
            }
        }
        img = f;
        out_boxes.iter_mut().for_each(|b| *b = vflip_box(*b, h));
    }
    let mut dropped = 0;
    if angle != 0.0 {
        img = rotate(&img, angle.to_radians());
        let mut kept = Vec::with_capacity(out_boxes.len());
        for b in out_boxes {
            match rotate_box(b, angle.to_radians(), w, h) {
                Some(rb) => kept.push(rb),
                None => dropped += 1,
            }
        }
        out_boxes = kept;
    }
    if scale != 1.0 || shift != 0.0 {
        img = img.map(|v| ((f64::from(v) * scale + shift).clamp(0.0, 1.0)) as f32);
    }
    if dropped > 0 {
        log::warn!("classical augmentation dropped {dropped} box(es) rotated out of frame");
    }
    Ok(Augmented {
        image: img,
        boxes: out_boxes,
        dropped,
    })
}

fn uniform(r: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// Rotate about the image centre by `theta` radians (counter-clockwise in
/// image coordinates), bilinear sampling with zero fill.
fn rotate(image: &GrayImage, theta: f64) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = theta.sin_cos();
    let sample = |x: f64, y: f64| -> f64 {
        // (x, y) is a continuous position; pixel centres sit at +0.5.
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - (fy - y0)), (1.0, fy - y0)] {
            for (dx, wx) in [(0.0, 1.0 - (fx - x0)), (1.0, fx - x0)] {
                let (px, py) = (x0 + dx, y0 + dy);
                if px >= 0.0 && py >= 0.0 && (px as usize) < w && (py as usize) < h {
                    acc += wx * wy * f64::from(image.get(px as usize, py as usize));
                }
            }
        }
        acc
    };
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // inverse mapping of the destination pixel centre
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            out.set(x, y, sample(sx, sy) as f32);
        }
    }
    out
}

fn rotate_box(b: BBox, theta: f64, w: usize, h: usize) -> Option<BBox> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = theta.sin_cos();
    let corners = [
        (f64::from(b.x_min), f64::from(b.y_min)),
        (f64::from(b.x_max), f64::from(b.y_min)),
        (f64::from(b.x_min), f64::from(b.y_max)),
        (f64::from(b.x_max), f64::from(b.y_max)),
    ];
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let (dx, dy) = (x - cx, y - cy);
        let rx = c * dx - s * dy + cx;
        let ry = s * dx + c * dy + cy;
        lo = (lo.0.min(rx), lo.1.min(ry));
        hi = (hi.0.max(rx), hi.1.max(ry));
    }
    BBox::new(
        lo.0.floor() as i32,
        lo.1.floor() as i32,
        hi.0.ceil() as i32,
        hi.1.ceil() as i32,
    )
    .clip(w, h)
}

/// `x -> 2x - 1`, mapping `[0, 1]` onto `[-1, 1]`.
pub fn normalize_intensity(image: &GrayImage) -> GrayImage {
    image.map(|v| 2.0 * v - 1.0)
}

pub fn denormalize_intensity(image: &GrayImage) -> GrayImage {
    image.map(|v| (v + 1.0) / 2.0)
}
