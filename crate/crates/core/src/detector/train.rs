use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::network::{images_tensor, init_detector, logits, raw_to_predictions};
use super::{decode_predictions, encode_targets, nms, ClassicalScope, DetectorConfig, Detection, SLOT};
use crate::dataio::{DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::nn::{Adam, AdamConfig, Archive, Graph, ParamSet, Tensor};
use crate::preproc::{classical_augment, ClassicalAugSpec};
use crate::rng::{derive, rng, rng_for};

pub const DETECTOR_KIND: &str = "detector";
const SALT_INIT: u64 = 0x696e_6974;
const SALT_EPOCH: u64 = 0x6570_6f63;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-image loss over the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

/// Per-element weights and targets of the graph loss for a batch.
struct BatchTargets {
    target: Tensor,
    coord_weight: Tensor,
    bce_weight: Tensor,
    obj: Tensor,
}

fn batch_targets(boxes: &[Vec<BBox>], config: &DetectorConfig) -> BatchTargets {
    let s = config.grid();
    let b = config.boxes_per_cell;
    let c = b * SLOT;
    let n = boxes.len();
    let shape = [n, c, s, s];
    let mut target = Tensor::zeros(&shape);
    let mut coord_weight = Tensor::zeros(&shape);
    let mut bce_weight = Tensor::zeros(&shape);
    let mut obj = Tensor::zeros(&shape);
    let w = config.loss_weights;
    for (ni, bx) in boxes.iter().enumerate() {
        let t = encode_targets(bx, config.input_resolution, config);
        for row in 0..s {
            for col in 0..s {
                for k in 0..b {
                    let v = t.slot(row, col, k);
                    let at = |f: usize| ((ni * c + k * SLOT + f) * s + row) * s + col;
                    let is_obj = v[4] == 1.0;
                    for f in 0..4 {
                        target.data_mut()[at(f)] = v[f];
                        coord_weight.data_mut()[at(f)] = if is_obj { w.coord } else { 0.0 };
                    }
                    bce_weight.data_mut()[at(4)] = if is_obj { w.obj } else { w.noobj };
                    obj.data_mut()[at(4)] = v[4];
                }
            }
        }
    }
    BatchTargets {
        target,
        coord_weight,
        bce_weight,
        obj,
    }
}

/// One training sample after optional classical augmentation.
fn training_sample(
    record: &crate::dataio::ImageRecord,
    boxes: &[BBox],
    config: &DetectorConfig,
    seed: u64,
) -> Result<(GrayImage, Vec<BBox>)> {
    let da = &config.classical_da;
    let applies = match da.scope {
        ClassicalScope::None => false,
        ClassicalScope::RealOnly => record.provenance == Provenance::Real,
        ClassicalScope::All => true,
    };
    if !applies {
        return Ok((record.pixels.clone(), boxes.to_vec()));
    }
    let mut r = rng(seed);
    let spec = ClassicalAugSpec {
        hflip: da.spec.hflip && r.random_bool(0.5),
        vflip: da.spec.vflip && r.random_bool(0.5),
        seed: r.random(),
        ..da.spec
    };
    let out = classical_augment(&record.pixels, boxes, &spec)?;
    Ok((out.image, out.boxes))
}

/// Mini-batch Adam on the composite grid loss. The per-epoch log holds the
/// mean per-image loss.
pub fn train_detector(manifest: &DatasetManifest, config: &DetectorConfig) -> Result<(DetectorModel, TrainingLog)> {
    config.validate()?;
    if manifest.records.is_empty() {
        return Err(Error::EmptyPool("detector training set is empty".into()));
    }
    let mut params = init_detector(config, &mut rng_for(config.seed, SALT_INIT))?;
    let samples = manifest.samples();
    let mut opt = Adam::new();
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        let epoch_seed = derive(derive(config.seed, SALT_EPOCH), epoch as u64);
        order.shuffle(&mut rng(epoch_seed));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut boxes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (rec, bx) = &samples[i];
                let (img, b) = training_sample(rec, bx, config, derive(epoch_seed, i as u64))?;
                imgs.push(img);
                boxes.push(b);
            }
            let refs: Vec<&GrayImage> = imgs.iter().collect();
            let x = images_tensor(&refs, config.input_resolution)?;
            let bt = batch_targets(&boxes, config);
            let g = Graph::new();
            let p = params.bind(&g, true);
            let z = logits(&p, config, g.constant(x));
            let diff = z.sigmoid() - g.constant(bt.target);
            let coord = diff.square().mul_const(bt.coord_weight).sum_all();
            let bce = (z.softplus() - z.mul_const(bt.obj)).mul_const(bt.bce_weight).sum_all();
            let batch_loss = coord + bce;
            let value = batch_loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "detector_loss",
                    value,
                });
            }
            total += value;
            let loss = batch_loss.scale(1.0 / chunk.len() as f64);
            let grads = p.grads(&g, loss);
            opt.step(&adam, &mut params, &grads);
        }
        log.epochs.push(EpochLog {
            epoch,
            loss: total / samples.len() as f64,
        });
    }
    Ok((
        DetectorModel {
            config: config.clone(),
            params,
        },
        log,
    ))
}

/// Thresholded, non-maximum-suppressed detections for every record.
pub fn predict(model: &DetectorModel, manifest: &DatasetManifest) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in manifest.records.chunks(32) {
        let refs: Vec<&GrayImage> = chunk.iter().map(|r| &r.pixels).collect();
        let x = images_tensor(&refs, model.config.input_resolution)?;
        let g = Graph::new();
        let p = model.params.bind(&g, false);
        let raw = logits(&p, &model.config, g.constant(x)).value();
        for (rec, pred) in chunk.iter().zip(raw_to_predictions(&raw, &model.config)) {
            let dets = decode_predictions(&pred, &model.config, &rec.image_id);
            out.extend(nms(&dets, model.config.nms_iou));
        }
    }
    Ok(out)
}

pub fn save_detector(model: &DetectorModel, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "config": model.config });
    let mut a = Archive::new(DETECTOR_KIND, meta);
    a.push_params("", &model.params);
    a.save(path)
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let a = Archive::load(path)?;
    if a.kind != DETECTOR_KIND {
        return Err(Error::CorruptArchive(format!(
            "expected a {DETECTOR_KIND} checkpoint, found {}",
            a.kind
        )));
    }
    let config: DetectorConfig = serde_json::from_value(a.meta["config"].clone())
        .map_err(|e| Error::CorruptArchive(format!("detector metadata: {e}")))?;
    config.validate()?;
    Ok(DetectorModel {
        params: a.params(""),
        config,
    })
}
