//! Detection metrics at the IoU thresholds of the evaluation protocol,
//! report assembly and t-SNE embeddings of detector features.

mod tsne;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::BoxAnnotation;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use crate::geometry::iou;
pub use tsne::{nearest_neighbor_purity, tsne_embed, TsneConfig, TsneResult};

pub const MATCHING_PROTOCOL: &str = "greedy-confidence";

/// Matches on one image. Indices refer to the detection and ground-truth
/// slices passed to [`match_detections`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection, ground truth, IoU)` triples.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn matched(&self) -> usize {
        self.pairs.len()
    }
}

/// Detection indices by descending confidence; equal confidences keep input order.
fn confidence_order(detections: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    order
}

/// Greedy one-to-one matching on a single image: in descending confidence
/// each detection takes the unmatched ground truth of highest IoU, provided
/// it reaches `iou_threshold`; equal IoUs go to the earlier ground truth.
pub fn match_detections(detections: &[Detection], ground_truths: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; ground_truths.len()];
    let mut pairs = Vec::new();
    let mut unmatched_detections = Vec::new();
    for d in confidence_order(detections) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&detections[d].bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                taken[g] = true;
                pairs.push((d, g, v));
            }
            None => unmatched_detections.push(d),
        }
    }
    MatchResult {
        pairs,
        unmatched_detections,
        unmatched_ground_truths: (0..ground_truths.len()).filter(|&g| !taken[g]).collect(),
        iou_threshold,
    }
}

/// Matched ground truths over all ground truths (0 when there are none).
pub fn sensitivity(results: &[MatchResult], n_ground_truths: usize) -> f64 {
    if n_ground_truths == 0 {
        return 0.0;
    }
    results.iter().map(MatchResult::matched).sum::<usize>() as f64 / n_ground_truths as f64
}

/// Unmatched detections per evaluated slice (0 when there are no slices).
pub fn fps_per_slice(results: &[MatchResult], n_slices: usize) -> f64 {
    if n_slices == 0 {
        return 0.0;
    }
    results.iter().map(|r| r.unmatched_detections.len()).sum::<usize>() as f64 / n_slices as f64
}

/// Group detections and ground truths by slice. Every detection and
/// annotation must belong to one of `slices`.
pub struct Scene<'a> {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<BBox>,
    pub image_id: &'a str,
}

pub fn group_by_slice<'a>(
    detections: &[Detection],
    ground_truths: &[BoxAnnotation],
    slices: &'a [String],
) -> Result<Vec<Scene<'a>>> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut scenes: Vec<Scene<'a>> = Vec::with_capacity(slices.len());
    for s in slices {
        if index.insert(s.as_str(), scenes.len()).is_some() {
            return Err(Error::DuplicateImageId(s.clone()));
        }
        scenes.push(Scene {
            detections: Vec::new(),
            ground_truths: Vec::new(),
            image_id: s,
        });
    }
    for d in detections {
        let &i = index
            .get(d.image_id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("detection on unknown slice {}", d.image_id)))?;
        scenes[i].detections.push(d.clone());
    }
    for a in ground_truths {
        let &i = index
            .get(a.image_id.as_str())
            .ok_or_else(|| Error::DanglingAnnotation(a.image_id.clone()))?;
        scenes[i].ground_truths.push(a.bbox());
    }
    Ok(scenes)
}

pub fn match_scenes(scenes: &[Scene<'_>], iou_threshold: f64) -> Vec<MatchResult> {
    scenes
        .iter()
        .map(|s| match_detections(&s.detections, &s.ground_truths, iou_threshold))
        .collect()
}

/// Single-class average precision. Detections from all images are ranked
/// by confidence, each marked TP or FP by the per-image greedy matching,
/// and the area under the precision-recall curve is taken after making
/// precision non-increasing from the right (all-points interpolation).
pub fn average_precision(detections: &[Detection], ground_truths: &[BoxAnnotation], iou_threshold: f64) -> f64 {
    if ground_truths.is_empty() || detections.is_empty() {
        return 0.0;
    }
    let mut gts: BTreeMap<&str, Vec<BBox>> = BTreeMap::new();
    for a in ground_truths {
        gts.entry(a.image_id.as_str()).or_default().push(a.bbox());
    }
    let mut taken: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut precision = Vec::with_capacity(detections.len());
    let mut recall = Vec::with_capacity(detections.len());
    let mut tp = 0usize;
    for (rank, d) in confidence_order(detections).into_iter().enumerate() {
        let det = &detections[d];
        if let (Some(g), Some(t)) = (gts.get(det.image_id.as_str()), taken.get_mut(det.image_id.as_str())) {
            let mut best: Option<(usize, f64)> = None;
            for (i, gt) in g.iter().enumerate() {
                if t[i] {
                    continue;
                }
                let v = iou(&det.bbox, gt);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, _)) = best {
                t[i] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / ground_truths.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub sensitivity: f64,
    pub fps_per_slice: f64,
}

/// Evaluation summary laid out like the comparison table: mAP, then
/// sensitivity and FPs per slice at IoU 0.5 and 0.25.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_05: f64,
    pub iou_050: ThresholdMetrics,
    pub iou_025: ThresholdMetrics,
    pub n_slices: usize,
    pub n_ground_truths: usize,
    pub matching: String,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold of the AP column.
    pub ap_iou: f64,
    pub iou_thresholds: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ap_iou: 0.5,
            iou_thresholds: (0.5, 0.25),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.ap_iou, self.iou_thresholds.0, self.iou_thresholds.1] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!("IoU threshold {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Metrics over the evaluated `slices` (every slice counts towards FPs per
/// slice, including those without detections or lesions).
pub fn build_report(
    detections: &[Detection],
    ground_truths: &[BoxAnnotation],
    slices: &[String],
    config: &EvalConfig,
    echo: serde_json::Value,
) -> Result<EvalReport> {
    config.validate()?;
    let scenes = group_by_slice(detections, ground_truths, slices)?;
    let at = |t: f64| {
        let r = match_scenes(&scenes, t);
        ThresholdMetrics {
            sensitivity: sensitivity(&r, ground_truths.len()),
            fps_per_slice: fps_per_slice(&r, slices.len()),
        }
    };
    let mut cfg = serde_json::json!({
        "ap_iou": config.ap_iou,
        "iou_thresholds": [config.iou_thresholds.0, config.iou_thresholds.1],
    });
    if let (Some(obj), serde_json::Value::Object(extra)) = (cfg.as_object_mut(), echo) {
        obj.extend(extra);
    }
    Ok(EvalReport {
        map_at_05: average_precision(detections, ground_truths, config.ap_iou),
        iou_050: at(config.iou_thresholds.0),
        iou_025: at(config.iou_thresholds.1),
        n_slices: slices.len(),
        n_ground_truths: ground_truths.len(),
        matching: MATCHING_PROTOCOL.to_string(),
        config: cfg,
    })
}

/// 2-D embedding of labelled feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub image_ids: Vec<String>,
    pub perplexity: f64,
    pub seed: u64,
    pub final_objective: f64,
}

impl EmbeddingResult {
    pub fn new(t: TsneResult, labels: Vec<String>, image_ids: Vec<String>) -> Result<Self> {
        if labels.len() != t.points.len() || image_ids.len() != t.points.len() {
            return Err(Error::InvalidInput("labels and ids must match the embedded points".into()));
        }
        Ok(EmbeddingResult {
            final_objective: t.final_objective(),
            points: t.points,
            labels,
            image_ids,
            perplexity: t.perplexity,
            seed: t.seed,
        })
    }

    /// CSV with header `x,y,label,image_id`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(f, "x,y,label,image_id")?;
            for ((p, l), id) in self.points.iter().zip(&self.labels).zip(&self.image_ids) {
                writeln!(f, "{},{},{l},{id}", p[0], p[1])?;
            }
            f.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn label_set(&self) -> BTreeSet<&str> {
        self.labels.iter().map(String::as_str).collect()
    }
}
