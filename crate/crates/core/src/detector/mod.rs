//! Single-scale grid detector: each of the `S x S` cells predicts `B`
//! boxes as (centre offset within the cell, size as a fraction of the image
//! side, objectness).

mod network;
mod train;

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::preproc::ClassicalAugSpec;

pub use network::{detector_forward, extract_features, images_tensor, init_detector, raw_to_predictions};
pub use train::{
    load_detector, predict, save_detector, train_detector, DetectorModel, EpochLog, TrainingLog,
};

pub const SLOT: usize = 5;

/// Which training records receive classical augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalScope {
    None,
    RealOnly,
    All,
}

/// On-the-fly classical augmentation during detector training. Each enabled
/// flip is applied with probability 1/2 per sample and epoch; rotation and
/// intensity ranges come from `spec`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalDa {
    pub scope: ClassicalScope,
    pub spec: ClassicalAugSpec,
}

impl Default for ClassicalDa {
    fn default() -> Self {
        ClassicalDa {
            scope: ClassicalScope::All,
            spec: ClassicalAugSpec::flips(true, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coord: 5.0,
            obj: 1.0,
            noobj: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_resolution: usize,
    /// Cells per side; `None` means `input_resolution / 8`.
    pub grid_size: Option<usize>,
    pub boxes_per_cell: usize,
    pub confidence_threshold: f64,
    pub nms_iou: f64,
    pub loss_weights: LossWeights,
    /// Feature widths: one per stride-2 stage plus the final feature layer.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub classical_da: ClassicalDa,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_resolution: 64,
            grid_size: None,
            boxes_per_cell: 1,
            confidence_threshold: 0.001,
            nms_iou: 0.45,
            loss_weights: LossWeights::default(),
            widths: vec![8, 16, 32, 32],
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            classical_da: ClassicalDa::default(),
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.grid_size.unwrap_or(self.input_resolution / 8)
    }

    pub fn cell_size(&self) -> f64 {
        self.input_resolution as f64 / self.grid() as f64
    }

    /// Number of stride-2 stages between the input and the grid.
    pub fn downsamplings(&self) -> usize {
        (self.input_resolution / self.grid()).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let s = self.grid();
        if s == 0 || !self.input_resolution.is_multiple_of(s) || !(self.input_resolution / s).is_power_of_two() {
            return bad(format!(
                "grid size {s} must divide input resolution {} by a power of two",
                self.input_resolution
            ));
        }
        if self.boxes_per_cell == 0 {
            return bad("boxes_per_cell must be >= 1".into());
        }
        for (name, v) in [("confidence_threshold", self.confidence_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.widths.len() != self.downsamplings() + 1 || self.widths.contains(&0) {
            return bad(format!(
                "widths needs {} positive entries for a {}px input and {s}x{s} grid",
                self.downsamplings() + 1,
                self.input_resolution
            ));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive".into());
        }
        self.classical_da.spec.validate()
    }
}

/// A scored box on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
    pub confidence: f64,
}

/// Grid tensor `[S, S, B, 5]`, row-major over (row, col, slot, field) with
/// fields `(cx offset, cy offset, w, h, objectness)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub grid: usize,
    pub boxes_per_cell: usize,
    pub data: Vec<f64>,
}

pub type TargetTensor = GridTensor;
pub type Predictions = GridTensor;

impl GridTensor {
    pub fn zeros(grid: usize, boxes_per_cell: usize) -> Self {
        GridTensor {
            grid,
            boxes_per_cell,
            data: vec![0.0; grid * grid * boxes_per_cell * SLOT],
        }
    }

    pub fn index(&self, row: usize, col: usize, slot: usize) -> usize {
        ((row * self.grid + col) * self.boxes_per_cell + slot) * SLOT
    }

    pub fn slot(&self, row: usize, col: usize, slot: usize) -> &[f64] {
        let i = self.index(row, col, slot);
        &self.data[i..i + SLOT]
    }

    pub fn slot_mut(&mut self, row: usize, col: usize, slot: usize) -> &mut [f64] {
        let i = self.index(row, col, slot);
        &mut self.data[i..i + SLOT]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.grid, self.grid, self.boxes_per_cell, SLOT]
    }
}

/// Larger area first; equal areas by lower `y_min`, then lower `x_min`.
fn ownership_order(a: &BBox, b: &BBox) -> Ordering {
    b.area()
        .cmp(&a.area())
        .then(a.y_min.cmp(&b.y_min))
        .then(a.x_min.cmp(&b.x_min))
}

/// Encode boxes on a `resolution` image. Each box belongs to the cell
/// holding its centre; when more boxes than slots share a cell the
/// ownership order decides which are kept.
pub fn encode_targets(boxes: &[BBox], resolution: usize, config: &DetectorConfig) -> TargetTensor {
    let s = config.grid();
    let b = config.boxes_per_cell;
    let cell = resolution as f64 / s as f64;
    let mut sorted = boxes.to_vec();
    sorted.sort_by(ownership_order);
    let mut t = GridTensor::zeros(s, b);
    let mut used = vec![0usize; s * s];
    for bx in sorted {
        let (cx, cy) = bx.center();
        let col = ((cx / cell).floor() as usize).min(s - 1);
        let row = ((cy / cell).floor() as usize).min(s - 1);
        let k = &mut used[row * s + col];
        if *k >= b {
            continue;
        }
        let v = t.slot_mut(row, col, *k);
        v[0] = cx / cell - col as f64;
        v[1] = cy / cell - row as f64;
        v[2] = f64::from(bx.width()) / resolution as f64;
        v[3] = f64::from(bx.height()) / resolution as f64;
        v[4] = 1.0;
        *k += 1;
    }
    t
}

/// Pixel box for one slot, clipped to the frame and at least 1 px wide.
pub fn decode_slot(v: &[f64], row: usize, col: usize, resolution: usize, grid: usize) -> BBox {
    let res = resolution as f64;
    let cell = res / grid as f64;
    let cx = (col as f64 + v[0]) * cell;
    let cy = (row as f64 + v[1]) * cell;
    let (w, h) = (v[2] * res, v[3] * res);
    let clamp = |x: f64| x.round().clamp(0.0, res) as i32;
    let (mut x0, mut x1) = (clamp(cx - w / 2.0), clamp(cx + w / 2.0));
    let (mut y0, mut y1) = (clamp(cy - h / 2.0), clamp(cy + h / 2.0));
    let r = resolution as i32;
    if x1 <= x0 {
        x1 = (x0 + 1).min(r);
        x0 = x1 - 1;
    }
    if y1 <= y0 {
        y1 = (y0 + 1).min(r);
        y0 = y1 - 1;
    }
    BBox::new(x0, y0, x1, y1)
}

/// Every slot with objectness at or above the threshold, in grid order.
pub fn decode_predictions(pred: &Predictions, config: &DetectorConfig, image_id: &str) -> Vec<Detection> {
    let mut out = Vec::new();
    for row in 0..pred.grid {
        for col in 0..pred.grid {
            for k in 0..pred.boxes_per_cell {
                let v = pred.slot(row, col, k);
                if v[4] >= config.confidence_threshold {
                    out.push(Detection {
                        image_id: image_id.to_string(),
                        bbox: decode_slot(v, row, col, config.input_resolution, pred.grid),
                        confidence: v[4],
                    });
                }
            }
        }
    }
    out
}

/// Greedy suppression per image: in descending confidence (stable), keep a
/// detection iff its IoU with every kept detection of the same image is
/// below `nms_iou`.
pub fn nms(detections: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let clear = kept.iter().all(|&k| {
            let o = &detections[k];
            o.image_id != d.image_id || crate::geometry::iou(&o.bbox, &d.bbox) < nms_iou
        });
        if clear {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

const P_EPS: f64 = 1e-7;

/// Loss terms on activated predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.coord + self.obj + self.noobj
    }
}

/// Weighted loss of one image: squared error on the four box fields of
/// object slots, binary cross-entropy on objectness split into object and
/// no-object slots. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
pub fn detector_loss_terms(pred: &Predictions, target: &TargetTensor, w: &LossWeights) -> LossTerms {
    assert_eq!(pred.shape(), target.shape(), "prediction and target grids differ");
    let mut t = LossTerms {
        coord: 0.0,
        obj: 0.0,
        noobj: 0.0,
    };
    for (p, g) in pred.data.chunks(SLOT).zip(target.data.chunks(SLOT)) {
        let po = p[4].clamp(P_EPS, 1.0 - P_EPS);
        if g[4] == 1.0 {
            t.coord += (0..4).map(|i| (p[i] - g[i]).powi(2)).sum::<f64>();
            t.obj -= po.ln();
        } else {
            t.noobj -= (1.0 - po).ln();
        }
    }
    t.coord *= w.coord;
    t.obj *= w.obj;
    t.noobj *= w.noobj;
    t
}

pub fn detector_loss(pred: &Predictions, target: &TargetTensor, weights: &LossWeights) -> f64 {
    detector_loss_terms(pred, target, weights).total()
}

/// Write detections as JSON lines `{image_id, x_min, y_min, x_max, y_max, confidence}`.
pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in detections {
        let line = serde_json::to_string(d).expect("detection serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::MalformedEntry(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
