use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lesionaug_core::augment::{
    apply_exclusion_list, mix_real_synthetic, sample_conditions, synthesize_augmentation, ExclusionList,
};
use lesionaug_core::cpggan::{load_checkpoint, save_checkpoint, train_gan, TrainState, TrainingPool};
use lesionaug_core::dataio::{
    generate_phantom_dataset, load_manifest, outside_head_envelope, roughen_boxes, save_manifest, split_by_patient,
    BoxAnnotation, DatasetManifest, ImageRecord, Split,
};
use lesionaug_core::detector::{
    extract_features, load_detector, predict, save_detector, train_detector, write_detections, DetectorConfig,
};
use lesionaug_core::evalkit::{build_report, nearest_neighbor_purity, tsne_embed, EmbeddingResult, EvalReport};
use lesionaug_core::preproc::{foreground_crop, resize_pow2, CropRect};
use lesionaug_core::rng;
use lesionaug_core::BBox;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compare::{compare, render_table, ArmSummary, Metrics};
use crate::error::{CliError, CliResult};
use crate::run::{Run, Stage, StageOutcome};

pub const PHANTOM_DIR: &str = "data/phantom";
pub const SYNTH_DIR: &str = "data/synth";
pub const GAN_CHECKPOINT: &str = "gan/checkpoint.bin";
pub const GAN_LOSSES: &str = "gan/losses.jsonl";
pub const CONDITION_CHECK: &str = "reports/condition_check.json";
pub const BASELINE_ARM: &str = "real_only";
pub const AUGMENTED_ARM: &str = "real_plus_synth";
pub const ARMS: [&str; 2] = [BASELINE_ARM, AUGMENTED_ARM];
pub const TSNE_CSV: &str = "reports/tsne.csv";
pub const TSNE_SUMMARY: &str = "reports/tsne.json";
pub const COMPARISON_JSON: &str = "reports/comparison.json";
pub const COMPARISON_TXT: &str = "reports/comparison.txt";

pub fn split_dir(split: &str) -> String {
    format!("data/{split}")
}

fn manifest_rel(dir: &str) -> String {
    format!("{dir}/manifest.json")
}

pub fn model_rel(arm: &str, k: usize) -> String {
    format!("detectors/{arm}/seed{k}/model.bin")
}

fn train_log_rel(arm: &str, k: usize) -> String {
    format!("detectors/{arm}/seed{k}/training_log.json")
}

fn detections_rel(arm: &str, k: usize) -> String {
    format!("detections/{arm}/seed{k}.jsonl")
}

fn seed_report_rel(arm: &str, k: usize) -> String {
    format!("reports/{arm}/seed{k}.json")
}

pub fn arm_report_rel(arm: &str) -> String {
    format!("reports/{arm}.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn load(run: &Run, dir: &str) -> CliResult<DatasetManifest> {
    Ok(load_manifest(&run.path(&manifest_rel(dir)))?)
}

pub fn phantom(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Phantom, |r| {
        let c = &r.config;
        let ds = generate_phantom_dataset(&c.phantom)?;
        let mut m = ds.manifest;
        let res = c.phantom.resolution;
        m.annotations = roughen_boxes(&m.annotations, (res, res), c.roughen, c.roughen_seed());
        save_manifest(&m, &r.path(PHANTOM_DIR))?;
        let truth = format!("{PHANTOM_DIR}/truth.json");
        write_json(&r.path(&truth), &ds.truth)?;
        log::info!("phantom: {} patients, {} slices, {} boxes", m.counts().patients, m.records.len(), m.annotations.len());
        Ok(vec![manifest_rel(PHANTOM_DIR), truth])
    })
}

/// Crop (optionally) and resize one slice, carrying its boxes along.
fn preprocess_record(
    rec: &ImageRecord,
    boxes: &[BBox],
    crop: Option<f32>,
    resolution: usize,
) -> CliResult<(ImageRecord, Vec<BBox>)> {
    let (img, rect) = match crop {
        Some(t) => foreground_crop(&rec.pixels, t),
        None => (rec.pixels.clone(), CropRect::full(&rec.pixels)),
    };
    let cropped: Vec<BBox> = boxes.iter().filter_map(|&b| rect.apply(b)).collect();
    let (pixels, out_boxes) = resize_pow2(&img, resolution, &cropped)?;
    Ok((
        ImageRecord {
            pixels,
            ..rec.clone()
        },
        out_boxes,
    ))
}

pub fn preprocess(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Preprocess, |r| {
        let c = &r.config;
        let raw = load(r, PHANTOM_DIR)?;
        let crop = c.preprocess.foreground_crop.then_some(c.preprocess.crop_threshold);
        let mut out = DatasetManifest::new("preprocessed", Split::None);
        for (rec, boxes) in raw.samples() {
            let (rec, boxes) = preprocess_record(rec, &boxes, crop, c.preprocess.resolution)?;
            out.annotations
                .extend(boxes.into_iter().map(|b| BoxAnnotation::new(rec.image_id.clone(), b)));
            out.records.push(rec);
        }
        let (train, val, test) = split_by_patient(&out, c.split, c.split_seed())?;
        let mut artifacts = Vec::new();
        for (name, m) in [("train", train), ("val", val), ("test", test)] {
            log::info!("preprocess: {name} {} patients, {} slices", m.counts().patients, m.records.len());
            let dir = split_dir(name);
            save_manifest(&m, &r.path(&dir))?;
            artifacts.push(manifest_rel(&dir));
        }
        Ok(artifacts)
    })
}

pub fn train_gan_stage(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::TrainGan, |r| {
        let cfg = &r.config.gan;
        let train = load(r, &split_dir("train"))?;
        let pool = TrainingPool::from_manifest(&train, cfg)?;
        let mut state = TrainState::new(cfg)?;
        let losses_path = r.path(GAN_LOSSES);
        std::fs::create_dir_all(losses_path.parent().expect("has parent")).map_err(|e| CliError::io(&losses_path, e))?;
        let file = std::fs::File::create(&losses_path).map_err(|e| CliError::io(&losses_path, e))?;
        let mut out = BufWriter::new(file);
        let started = std::time::Instant::now();
        let io_err = |e: std::io::Error| lesionaug_core::Error::Io {
            path: losses_path.clone(),
            source: e,
        };
        train_gan(&mut state, &pool, cfg, |l, s| {
            let line = serde_json::to_string(l).expect("losses serialise");
            writeln!(out, "{line}").map_err(io_err)?;
            if l.global_step % 25 == 0 {
                log::info!(
                    "train-gan: step {} res {} alpha {:.2} critic {:.3} generator {:.3} ({:.0}s)",
                    l.global_step,
                    s.resolution(),
                    l.alpha,
                    l.critic_loss,
                    l.generator_loss,
                    started.elapsed().as_secs_f64()
                );
            }
            Ok(())
        })?;
        out.flush().map_err(|e| CliError::io(&losses_path, e))?;
        drop(out);
        save_checkpoint(&state, cfg, &r.path(GAN_CHECKPOINT))?;
        Ok(vec![GAN_CHECKPOINT.into(), GAN_LOSSES.into()])
    })
}

/// Outcome of the trained-generator conditioning check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub n_samples: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub min_pass_rate: f64,
    pub ok: bool,
    pub mean_inside_boxes: f64,
    pub mean_background: f64,
}

/// For up to `n` annotated images: is the mean intensity inside the union of
/// their boxes above the mean of the background outside the head envelope?
pub fn condition_check(manifest: &DatasetManifest, n: usize, min_pass_rate: f64) -> ConditionCheck {
    let by_image = manifest.boxes_by_image();
    let mut n_samples = 0;
    let mut passed = 0;
    let (mut sum_in, mut sum_bg) = (0.0, 0.0);
    for rec in &manifest.records {
        if n_samples == n {
            break;
        }
        let Some(boxes) = by_image.get(rec.image_id.as_str()).filter(|b| !b.is_empty()) else {
            continue;
        };
        let img = &rec.pixels;
        let (w, h) = (img.width(), img.height());
        let (mut inside, mut n_in, mut bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = img.get(x, y) as f64;
                if boxes.iter().any(|b| b.contains_pixel(x as i32, y as i32)) {
                    inside += v;
                    n_in += 1;
                } else if outside_head_envelope(x, y, w) {
                    bg += v;
                    n_bg += 1;
                }
            }
        }
        let mean_in = inside / n_in.max(1) as f64;
        let mean_bg = bg / n_bg.max(1) as f64;
        n_samples += 1;
        passed += (mean_in > mean_bg) as usize;
        sum_in += mean_in;
        sum_bg += mean_bg;
    }
    let rate = if n_samples == 0 { 0.0 } else { passed as f64 / n_samples as f64 };
    ConditionCheck {
        n_samples,
        passed,
        pass_rate: rate,
        min_pass_rate,
        ok: n_samples > 0 && rate >= min_pass_rate,
        mean_inside_boxes: sum_in / n_samples.max(1) as f64,
        mean_background: sum_bg / n_samples.max(1) as f64,
    }
}

pub fn synth(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Synth, |r| {
        let c = &r.config;
        let (state, gan_cfg) = load_checkpoint(&r.path(GAN_CHECKPOINT))?;
        let train = load(r, &split_dir("train"))?;
        let n_real = train.records.len();
        let needed = c.mix.ratio.synthetic_count(n_real);
        let n = c.synth.n_images.unwrap_or(2 * n_real);
        if n < needed {
            return Err(CliError::Config(format!(
                "synth.n_images {n} is below the {needed} images mix.ratio needs for {n_real} real images"
            )));
        }
        let conditions = sample_conditions(&train.annotations, n, &c.jitter, gan_cfg.target_resolution)?;
        log::info!("synth: generating {n} images");
        let mut synth = synthesize_augmentation(&state, &gan_cfg, &conditions, c.synth_seed(), None)?;
        if let Some(list) = &c.synth.exclusion_list {
            synth = apply_exclusion_list(&synth, &ExclusionList::load(list)?)?;
            log::info!("synth: {} images left after exclusions", synth.records.len());
        }
        save_manifest(&synth, &r.path(SYNTH_DIR))?;
        let check = condition_check(&synth, c.condition_check.n_samples, c.condition_check.min_pass_rate);
        log::info!("synth: condition check {}/{} passed", check.passed, check.n_samples);
        write_json(&r.path(CONDITION_CHECK), &check)?;
        Ok(vec![manifest_rel(SYNTH_DIR), CONDITION_CHECK.into()])
    })
}

fn arm_data(r: &Run, arm: &str) -> CliResult<DatasetManifest> {
    let train = load(r, &split_dir("train"))?;
    if arm == BASELINE_ARM {
        return Ok(train);
    }
    let synth = load(r, SYNTH_DIR)?;
    Ok(mix_real_synthetic(&train, &synth, &r.config.mix)?)
}

fn replicate_config(r: &Run, k: usize) -> DetectorConfig {
    DetectorConfig {
        seed: r.config.detector_seed(k),
        ..r.config.detector.clone()
    }
}

pub fn train_detectors(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::TrainDetector, |r| {
        let mut artifacts = Vec::new();
        for arm in ARMS {
            let data = arm_data(r, arm)?;
            for k in 0..r.config.detector_seeds {
                let cfg = replicate_config(r, k);
                log::info!("train-detector: {arm} seed {k} on {} images", data.records.len());
                let (model, log) = train_detector(&data, &cfg)?;
                let rel = model_rel(arm, k);
                let path = r.path(&rel);
                std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| CliError::io(&path, e))?;
                save_detector(&model, &path)?;
                write_json(&r.path(&train_log_rel(arm, k)), &log)?;
                artifacts.push(rel);
                artifacts.push(train_log_rel(arm, k));
            }
        }
        Ok(artifacts)
    })
}

pub fn evaluate(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Evaluate, |r| {
        let test = load(r, &split_dir("test"))?;
        let slices: Vec<String> = test.records.iter().map(|x| x.image_id.clone()).collect();
        let mut artifacts = Vec::new();
        for arm in ARMS {
            let data = arm_data(r, arm)?;
            let n_synthetic = data
                .records
                .iter()
                .filter(|x| x.provenance == lesionaug_core::dataio::Provenance::Synthetic)
                .count();
            let mut reports: Vec<EvalReport> = Vec::new();
            let mut seeds = Vec::new();
            for k in 0..r.config.detector_seeds {
                let model = load_detector(&r.path(&model_rel(arm, k)))?;
                let dets = predict(&model, &test)?;
                let det_rel = detections_rel(arm, k);
                let det_path = r.path(&det_rel);
                std::fs::create_dir_all(det_path.parent().expect("has parent")).map_err(|e| CliError::io(&det_path, e))?;
                write_detections(&det_path, &dets)?;
                let echo = serde_json::json!({ "arm": arm, "detector_seed": model.config.seed, "replicate": k });
                let report = build_report(&dets, &test.annotations, &slices, &r.config.eval, echo)?;
                write_json(&r.path(&seed_report_rel(arm, k)), &report)?;
                artifacts.extend([det_rel, seed_report_rel(arm, k)]);
                seeds.push(model.config.seed);
                reports.push(report);
            }
            let summary = ArmSummary {
                arm: arm.to_string(),
                n_real: data.records.len() - n_synthetic,
                n_synthetic,
                detector_seeds: seeds,
                mean: Metrics::mean(&reports),
                std: Metrics::std(&reports),
                replicates: reports,
            };
            log::info!(
                "evaluate: {arm} mAP {:.3} sensitivity@0.5 {:.3}",
                summary.mean.map_at_05,
                summary.mean.iou_050.sensitivity
            );
            write_json(&r.path(&arm_report_rel(arm)), &summary)?;
            artifacts.push(arm_report_rel(arm));
        }
        Ok(artifacts)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneSummary {
    pub n_points: usize,
    pub perplexity: f64,
    pub seed: u64,
    pub final_objective: f64,
    pub nearest_neighbor_purity: f64,
    pub feature_model: String,
}

pub fn tsne(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Tsne, |r| {
        let c = &r.config.tsne;
        let model_path = model_rel(BASELINE_ARM, 0);
        let model = load_detector(&r.path(&model_path))?;
        let train = load(r, &split_dir("train"))?;
        let synth = load(r, SYNTH_DIR)?;
        let mut rng = rng::rng(c.embed.seed);
        let mut pick = |m: &DatasetManifest| {
            let mut idx: Vec<usize> = (0..m.records.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(c.n_per_class);
            idx.sort_unstable();
            idx
        };
        let real_idx = pick(&train);
        let synth_idx = pick(&synth);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (m, idx, label) in [(&train, &real_idx, "real"), (&synth, &synth_idx, "synthetic")] {
            for &i in idx {
                images.push(&m.records[i].pixels);
                labels.push(label.to_string());
                ids.push(m.records[i].image_id.clone());
            }
        }
        let features = extract_features(&model.params, &model.config, &images)?;
        let result = tsne_embed(&features, &c.embed)?;
        let purity = nearest_neighbor_purity(&result.points, &labels);
        let emb = EmbeddingResult::new(result, labels, ids)?;
        emb.write_csv(&r.path(TSNE_CSV))?;
        let summary = TsneSummary {
            n_points: emb.points.len(),
            perplexity: emb.perplexity,
            seed: emb.seed,
            final_objective: emb.final_objective,
            nearest_neighbor_purity: purity,
            feature_model: model_path,
        };
        write_json(&r.path(TSNE_SUMMARY), &summary)?;
        Ok(vec![TSNE_CSV.into(), TSNE_SUMMARY.into()])
    })
}

pub fn compare_stage(run: &mut Run) -> CliResult<StageOutcome> {
    run.stage(Stage::Compare, |r| {
        let base: ArmSummary = read_json(&r.path(&arm_report_rel(BASELINE_ARM)))?;
        let aug: ArmSummary = read_json(&r.path(&arm_report_rel(AUGMENTED_ARM)))?;
        let cmp = compare(&base, &aug);
        write_json(&r.path(COMPARISON_JSON), &cmp)?;
        let table = render_table(&cmp);
        std::fs::write(r.path(COMPARISON_TXT), &table).map_err(|e| CliError::io(r.path(COMPARISON_TXT), e))?;
        Ok(vec![COMPARISON_JSON.into(), COMPARISON_TXT.into()])
    })
}

/// Every stage in order.
pub fn pipeline(run: &mut Run) -> CliResult<Vec<StageOutcome>> {
    let steps: [fn(&mut Run) -> CliResult<StageOutcome>; 8] = [
        phantom,
        preprocess,
        train_gan_stage,
        synth,
        train_detectors,
        evaluate,
        tsne,
        compare_stage,
    ];
    steps.iter().map(|f| f(run)).collect()
}

/// Arm summary from a report file or from a run directory.
pub fn load_arm(path: &Path, arm: &str) -> CliResult<ArmSummary> {
    let file: PathBuf = if path.is_dir() {
        path.join(arm_report_rel(arm))
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(CliError::Missing {
            what: format!("evaluation report {}", file.display()),
            hint: "run evaluate first".into(),
        });
    }
    read_json(&file)
}
