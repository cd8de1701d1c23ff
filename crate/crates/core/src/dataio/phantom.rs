//! Procedural brain-slice phantoms: an elliptical skull ring around textured
//! tissue, bright elliptical lesions with tight boxes, and optional bright
//! curvilinear vessels that carry no box.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, DatasetManifest, ImageRecord, Provenance, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::rng;

/// Upper bound of the tissue intensity; lesions must start above it.
pub const TISSUE_MAX: f64 = 0.35;
const TISSUE_MIN: f64 = 0.15;
/// Every head fits inside a centred circle of this radius (fraction of side).
const HEAD_ENVELOPE: f64 = 0.48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealRange {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionCount {
    pub min: u32,
    pub max: u32,
    /// Probability that a slice carries no lesion at all.
    pub p_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_patients: usize,
    pub slices_per_patient: IntRange,
    pub resolution: usize,
    pub lesions_per_slice: LesionCount,
    pub lesion_intensity: RealRange,
    pub vessel_distractors: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_patients: 40,
            slices_per_patient: IntRange { min: 4, max: 8 },
            resolution: 64,
            lesions_per_slice: LesionCount {
                min: 1,
                max: 3,
                p_zero: 0.1,
            },
            lesion_intensity: RealRange { min: 0.7, max: 0.95 },
            vessel_distractors: true,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.resolution < 32 {
            return bad(format!("phantom resolution {} is below 32", self.resolution));
        }
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.slices_per_patient.min == 0 || self.slices_per_patient.min > self.slices_per_patient.max {
            return bad("slices_per_patient must satisfy 1 <= min <= max".into());
        }
        let lc = &self.lesions_per_slice;
        if lc.min > lc.max || !(0.0..=1.0).contains(&lc.p_zero) {
            return bad("lesions_per_slice needs min <= max and p_zero in [0, 1]".into());
        }
        let li = &self.lesion_intensity;
        if li.min > li.max || li.max > 1.0 {
            return bad("lesion_intensity needs min <= max <= 1".into());
        }
        if li.min <= TISSUE_MAX {
            return bad(format!(
                "lesion intensity {} does not exceed the tissue background {TISSUE_MAX}",
                li.min
            ));
        }
        Ok(())
    }
}

/// Rotated ellipse in continuous pixel coordinates (pixel `(x, y)` has its
/// centre at `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalised squared radius of a point; `<= 1` inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        self.radius2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0
    }

    /// Pixels whose centres fall inside the ellipse.
    pub fn support(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let r = self.a.max(self.b) + 1.0;
        let x0 = ((self.cx - r).floor().max(0.0)) as usize;
        let y0 = ((self.cy - r).floor().max(0.0)) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(width);
        let y1 = ((self.cy + r).ceil() as usize).min(height);
        let mut out = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains_pixel(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            a: self.a * f,
            b: self.b * f,
            ..*self
        }
    }
}

/// Ground truth kept alongside each generated slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTruth {
    pub image_id: String,
    pub skull: Ellipse,
    pub skull_thickness: f64,
    pub lesions: Vec<(Ellipse, BBox)>,
    /// Control points of each quadratic vessel curve.
    pub vessels: Vec<[(f64, f64); 3]>,
}

impl SliceTruth {
    /// Tight pixel box of the skull ring.
    pub fn skull_box(&self, width: usize, height: usize) -> Option<BBox> {
        tight_box(&self.skull.support(width, height))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    pub manifest: DatasetManifest,
    pub truth: Vec<SliceTruth>,
}

/// True for pixels outside the region any phantom head can occupy.
pub fn outside_head_envelope(x: usize, y: usize, resolution: usize) -> bool {
    let c = resolution as f64 / 2.0;
    let r = HEAD_ENVELOPE * resolution as f64;
    let dx = x as f64 + 0.5 - c;
    let dy = y as f64 + 0.5 - c;
    dx * dx + dy * dy > r * r
}

pub fn generate_phantom_dataset(config: &PhantomConfig) -> Result<PhantomDataset> {
    config.validate()?;
    let mut manifest = DatasetManifest::new("phantom", Split::None);
    let mut truth = Vec::new();
    for p in 0..config.n_patients {
        let mut prng = rng::rng_for(config.seed, p as u64);
        let patient = PatientAnatomy::sample(config, &mut prng);
        let n_slices = prng.random_range(config.slices_per_patient.min..=config.slices_per_patient.max);
        let patient_id = format!("P{p:03}");
        for s in 0..n_slices {
            let image_id = format!("{patient_id}_S{s:02}");
            let mut srng = rng::rng_for(config.seed, ((p as u64) << 20) | (u64::from(s) + 1));
            let t = if n_slices > 1 {
                2.0 * f64::from(s) / f64::from(n_slices - 1) - 1.0
            } else {
                0.0
            };
            let (pixels, slice_truth) = render_slice(config, &patient, t, &image_id, &mut srng);
            for (_, b) in &slice_truth.lesions {
                manifest.annotations.push(BoxAnnotation::new(&image_id, *b));
            }
            manifest.records.push(ImageRecord {
                image_id: image_id.clone(),
                patient_id: patient_id.clone(),
                slice_index: s,
                pixels,
                provenance: Provenance::Real,
            });
            truth.push(slice_truth);
        }
    }
    Ok(PhantomDataset { manifest, truth })
}

struct PatientAnatomy {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    skull_intensity: f64,
    tissue_base: f64,
    /// (amplitude, kx, ky, phase) texture waves.
    waves: Vec<(f64, f64, f64, f64)>,
}

impl PatientAnatomy {
    fn sample(config: &PhantomConfig, rng: &mut impl Rng) -> Self {
        let res = config.resolution as f64;
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.01..0.03),
                    rng.random_range(1.0..5.0) * 2.0 * PI / res,
                    rng.random_range(1.0..5.0) * 2.0 * PI / res,
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        PatientAnatomy {
            cx: res / 2.0 + rng.random_range(-0.03..0.03) * res,
            cy: res / 2.0 + rng.random_range(-0.03..0.03) * res,
            a: rng.random_range(0.36..0.44) * res,
            b: rng.random_range(0.36..0.44) * res,
            theta: rng.random_range(-0.17..0.17),
            skull_intensity: rng.random_range(0.55..0.7),
            tissue_base: rng.random_range(0.22..0.28),
            waves,
        }
    }
}

fn tight_box(pixels: &[(usize, usize)]) -> Option<BBox> {
    let first = pixels.first()?;
    let mut b = BBox::new(first.0 as i32, first.1 as i32, first.0 as i32 + 1, first.1 as i32 + 1);
    for &(x, y) in pixels {
        b.x_min = b.x_min.min(x as i32);
        b.y_min = b.y_min.min(y as i32);
        b.x_max = b.x_max.max(x as i32 + 1);
        b.y_max = b.y_max.max(y as i32 + 1);
    }
    Some(b)
}

fn render_slice(
    config: &PhantomConfig,
    patient: &PatientAnatomy,
    t: f64,
    image_id: &str,
    rng: &mut impl Rng,
) -> (GrayImage, SliceTruth) {
    let res = config.resolution;
    let resf = res as f64;
    let scale = 1.0 - 0.15 * t.abs();
    let skull = Ellipse {
        cx: patient.cx,
        cy: patient.cy,
        a: patient.a * scale,
        b: patient.b * scale,
        theta: patient.theta,
    };
    let thickness = (0.035 * resf).max(1.5);
    let inner = Ellipse {
        a: skull.a - thickness,
        b: skull.b - thickness,
        ..skull
    };
    let mut img = GrayImage::new(res, res);
    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = if inner.radius2(px, py) <= 1.0 {
                let wave: f64 = patient
                    .waves
                    .iter()
                    .map(|&(amp, kx, ky, ph)| amp * (kx * px + ky * py + ph).sin())
                    .sum();
                let noise = rng.random_range(-0.01..0.01);
                (patient.tissue_base + wave + noise).clamp(TISSUE_MIN, TISSUE_MAX)
            } else if skull.radius2(px, py) <= 1.0 {
                patient.skull_intensity + rng.random_range(-0.02..0.02)
            } else {
                0.0
            };
            img.set(x, y, v as f32);
        }
    }

    let li = config.lesion_intensity;
    let mut vessels = Vec::new();
    if config.vessel_distractors {
        let n = rng.random_range(1..=3);
        for _ in 0..n {
            let pts = [
                point_in(&inner, 0.8, rng),
                point_in(&inner, 0.8, rng),
                point_in(&inner, 0.8, rng),
            ];
            let intensity = rng.random_range(li.min..=li.max);
            draw_curve(&mut img, &inner, &pts, intensity);
            vessels.push(pts);
        }
    }

    let lc = config.lesions_per_slice;
    let count = if rng.random_bool(lc.p_zero) {
        0
    } else {
        rng.random_range(lc.min..=lc.max)
    };
    let mut lesions: Vec<(Ellipse, BBox)> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..30 {
            let a = rng.random_range(0.03..0.08) * resf;
            let b = rng.random_range(0.03..0.08) * resf;
            let (a, b) = (a.max(1.2), b.max(1.2));
            let (cx, cy) = point_in(&inner, 0.7, rng);
            let e = Ellipse {
                cx,
                cy,
                a,
                b,
                theta: rng.random_range(0.0..PI),
            };
            let support = e.support(res, res);
            let Some(bx) = tight_box(&support) else { continue };
            if !support.iter().all(|&(x, y)| inner.contains_pixel(x, y)) {
                continue;
            }
            if lesions.iter().any(|(_, other)| other.intersection_area(&bx) > 0) {
                continue;
            }
            let peak = rng.random_range(li.min..=li.max);
            for &(x, y) in &support {
                let r2 = e.radius2(x as f64 + 0.5, y as f64 + 0.5);
                let v = TISSUE_MAX + (peak - TISSUE_MAX) * (0.7 + 0.3 * (1.0 - r2));
                let cur = f64::from(img.get(x, y));
                img.set(x, y, v.max(cur) as f32);
            }
            lesions.push((e, bx));
            break;
        }
    }
    img.quantize16();
    let truth = SliceTruth {
        image_id: image_id.to_string(),
        skull,
        skull_thickness: thickness,
        lesions,
        vessels,
    };
    (img, truth)
}

fn point_in(e: &Ellipse, frac: f64, rng: &mut impl Rng) -> (f64, f64) {
    let r = frac * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let (u, v) = (r * e.a * phi.cos(), r * e.b * phi.sin());
    let (s, c) = e.theta.sin_cos();
    (e.cx + u * c - v * s, e.cy + u * s + v * c)
}

fn draw_curve(img: &mut GrayImage, inside: &Ellipse, pts: &[(f64, f64); 3], intensity: f64) {
    let (w, h) = (img.width(), img.height());
    let steps = 4 * w;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let mt = 1.0 - t;
        let x = mt * mt * pts[0].0 + 2.0 * mt * t * pts[1].0 + t * t * pts[2].0;
        let y = mt * mt * pts[0].1 + 2.0 * mt * t * pts[1].1 + t * t * pts[2].1;
        let (px, py) = (x.floor() as isize, y.floor() as isize);
        if px < 0 || py < 0 || px as usize >= w || py as usize >= h {
            continue;
        }
        let (px, py) = (px as usize, py as usize);
        if inside.contains_pixel(px, py) {
            img.set(px, py, intensity as f32);
        }
    }
}
