//! Turning a trained generator into a source of annotated training images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cpggan::{generate_batch, GanConfig, TrainState};
use crate::dataio::{save_manifest, BoxAnnotation, DatasetManifest, ImageRecord, Provenance, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::rng;

pub const SYNTHETIC_PATIENT: &str = "SYNTH";

/// Bounded uniform perturbation of template boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionJitterSpec {
    /// Maximum centre shift per axis, as a fraction of the image side.
    pub shift_frac: f64,
    /// Maximum relative change of width and height.
    pub scale_frac: f64,
    pub seed: u64,
}

impl Default for ConditionJitterSpec {
    fn default() -> Self {
        ConditionJitterSpec {
            shift_frac: 0.1,
            scale_frac: 0.15,
            seed: 0,
        }
    }
}

impl ConditionJitterSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("shift_frac", self.shift_frac), ("scale_frac", self.scale_frac)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 0.5], got {v}")));
            }
        }
        Ok(())
    }
}

/// Shift a box's centre by `(dx, dy)` image-side fractions and scale its
/// width and height by `(1 + sx, 1 + sy)`, then clip to the frame. The centre
/// is kept inside the frame, so the result always has positive area.
pub fn jitter_box(b: BBox, dx: f64, dy: f64, sx: f64, sy: f64, resolution: usize) -> BBox {
    let res = resolution as f64;
    let (cx, cy) = b.center();
    let cx = (cx + dx * res).clamp(0.5, res - 0.5);
    let cy = (cy + dy * res).clamp(0.5, res - 0.5);
    let w = (f64::from(b.width()) * (1.0 + sx)).round().max(1.0);
    let h = (f64::from(b.height()) * (1.0 + sy)).round().max(1.0);
    let x0 = (cx - w / 2.0).round();
    let y0 = (cy - h / 2.0).round();
    let out = BBox::new(x0 as i32, y0 as i32, (x0 + w) as i32, (y0 + h) as i32);
    out.clip(resolution, resolution)
        .expect("a box whose centre lies in the frame overlaps it")
}

/// `n` condition box sets for `resolution x resolution` images. The number
/// of boxes per set follows the per-image histogram of the annotations and
/// each box is a jittered copy of a uniformly drawn annotation.
pub fn sample_conditions(
    train_annotations: &[BoxAnnotation],
    n: usize,
    jitter: &ConditionJitterSpec,
    resolution: usize,
) -> Result<Vec<Vec<BBox>>> {
    jitter.validate()?;
    if train_annotations.is_empty() {
        return Err(Error::EmptyPool("no training boxes to draw conditions from".into()));
    }
    let mut per_image: BTreeMap<&str, usize> = BTreeMap::new();
    for a in train_annotations {
        *per_image.entry(a.image_id.as_str()).or_default() += 1;
    }
    let counts: Vec<usize> = per_image.into_values().collect();
    let mut rng = rng::rng(jitter.seed);
    let u = |m: f64, rng: &mut rng::Rng| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = counts[rng.random_range(0..counts.len())];
        let mut set = Vec::with_capacity(k);
        for _ in 0..k {
            let t = train_annotations[rng.random_range(0..train_annotations.len())].bbox();
            let dx = u(jitter.shift_frac, &mut rng);
            let dy = u(jitter.shift_frac, &mut rng);
            let sx = u(jitter.scale_frac, &mut rng);
            let sy = u(jitter.scale_frac, &mut rng);
            set.push(jitter_box(t, dx, dy, sx, sy, resolution));
        }
        out.push(set);
    }
    Ok(out)
}

pub fn synthetic_id(index: usize) -> String {
    format!("SYN_{index:05}")
}

/// Generate one image per condition set and, when `out_dir` is given, write
/// the images and manifest there. Annotations equal the condition boxes.
pub fn synthesize_augmentation(
    state: &TrainState,
    config: &GanConfig,
    conditions: &[Vec<BBox>],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<DatasetManifest> {
    let generated = generate_batch(state, config, conditions, seed)?;
    let mut manifest = DatasetManifest::new("synthetic", Split::Synth);
    for (i, (pixels, boxes)) in generated.into_iter().enumerate() {
        let id = synthetic_id(i);
        for b in boxes {
            manifest.annotations.push(BoxAnnotation::new(id.clone(), b));
        }
        manifest.records.push(ImageRecord {
            image_id: id,
            patient_id: SYNTHETIC_PATIENT.to_string(),
            slice_index: i as u32,
            pixels,
            provenance: Provenance::Synthetic,
        });
    }
    if let Some(dir) = out_dir {
        save_manifest(&manifest, dir)?;
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionEntry {
    pub image_id: String,
    #[serde(default)]
    pub reason: String,
}

/// Synthetic images to drop, stored as a JSON array of `{image_id, reason}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExclusionList {
    pub entries: Vec<ExclusionEntry>,
}

impl ExclusionList {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.image_id.as_str()).collect()
    }
}

/// Remove the listed synthetic records and their annotations. Ids not in
/// the manifest are ignored; naming a real record is an error.
pub fn apply_exclusion_list(manifest: &DatasetManifest, exclusions: &ExclusionList) -> Result<DatasetManifest> {
    let ids = exclusions.ids();
    if let Some(real) = manifest
        .records
        .iter()
        .find(|r| r.provenance == Provenance::Real && ids.contains(r.image_id.as_str()))
    {
        return Err(Error::ExcludesRealRecord(real.image_id.clone()));
    }
    Ok(manifest.filter_records(&manifest.name, manifest.split, |r| !ids.contains(r.image_id.as_str())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixRatio {
    RealOnly,
    OneToOne,
    OneToTwo,
    AbsoluteCount(usize),
}

impl MixRatio {
    pub fn synthetic_count(&self, n_real: usize) -> usize {
        match *self {
            MixRatio::RealOnly => 0,
            MixRatio::OneToOne => n_real,
            MixRatio::OneToTwo => 2 * n_real,
            MixRatio::AbsoluteCount(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub ratio: MixRatio,
    #[serde(default)]
    pub shuffle_seed: u64,
}

/// All real records plus a seeded subset of synthetic ones, in shuffled
/// order.
pub fn mix_real_synthetic(real: &DatasetManifest, synth: &DatasetManifest, spec: &MixSpec) -> Result<DatasetManifest> {
    let want = spec.ratio.synthetic_count(real.records.len());
    if synth.records.len() < want {
        return Err(Error::InsufficientPool {
            requested: want,
            available: synth.records.len(),
        });
    }
    let mut rng = rng::rng(spec.shuffle_seed);
    let mut pool: Vec<usize> = (0..synth.records.len()).collect();
    pool.shuffle(&mut rng);
    let chosen: BTreeSet<&str> = pool[..want]
        .iter()
        .map(|&i| synth.records[i].image_id.as_str())
        .collect();

    let mut records: Vec<ImageRecord> = real.records.clone();
    records.extend(
        synth
            .records
            .iter()
            .filter(|r| chosen.contains(r.image_id.as_str()))
            .cloned(),
    );
    records.shuffle(&mut rng);
    let mut annotations = real.annotations.clone();
    annotations.extend(
        synth
            .annotations
            .iter()
            .filter(|a| chosen.contains(a.image_id.as_str()))
            .cloned(),
    );
    let out = DatasetManifest {
        name: format!("{}+{}", real.name, synth.name),
        split: real.split,
        records,
        annotations,
    };
    out.validate()?;
    Ok(out)
}

/// Blend `patch` into `base` inside `b`. The weight ramps linearly from the
/// border: the outermost box pixels get `1 / feather_px`, pixels at depth
/// `feather_px` or more get 1. Pixels outside the box are copied unchanged.
pub fn paste_roi(base: &GrayImage, patch: &GrayImage, b: BBox, feather_px: usize) -> Result<GrayImage> {
    if !b.is_valid_in(base.width(), base.height()) {
        return Err(Error::InvalidInput(format!(
            "box {b} outside {}x{} image",
            base.width(),
            base.height()
        )));
    }
    if patch.width() != b.width() as usize || patch.height() != b.height() as usize {
        return Err(Error::InvalidInput(format!(
            "patch {}x{} does not match box {b}",
            patch.width(),
            patch.height()
        )));
    }
    let mut out = base.clone();
    for y in b.y_min..b.y_max {
        for x in b.x_min..b.x_max {
            let depth = (x - b.x_min + 1)
                .min(b.x_max - x)
                .min(y - b.y_min + 1)
                .min(b.y_max - y);
            let w = if feather_px == 0 {
                1.0
            } else {
                (f64::from(depth) / feather_px as f64).min(1.0) as f32
            };
            let p = patch.get((x - b.x_min) as usize, (y - b.y_min) as usize);
            let v = base.get(x as usize, y as usize);
            out.set(x as usize, y as usize, if w == 1.0 { p } else { w * p + (1.0 - w) * v });
        }
    }
    Ok(out)
}
