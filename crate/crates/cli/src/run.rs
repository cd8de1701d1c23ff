use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const RUN_MANIFEST: &str = "run.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Phantom,
    Preprocess,
    TrainGan,
    Synth,
    TrainDetector,
    Evaluate,
    Tsne,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Phantom,
        Stage::Preprocess,
        Stage::TrainGan,
        Stage::Synth,
        Stage::TrainDetector,
        Stage::Evaluate,
        Stage::Tsne,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Phantom => "phantom",
            Stage::Preprocess => "preprocess",
            Stage::TrainGan => "train-gan",
            Stage::Synth => "synth",
            Stage::TrainDetector => "train-detector",
            Stage::Evaluate => "evaluate",
            Stage::Tsne => "tsne",
            Stage::Compare => "compare",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Phantom => &[],
            Stage::Preprocess => &[Stage::Phantom],
            Stage::TrainGan => &[Stage::Preprocess],
            Stage::Synth => &[Stage::TrainGan],
            Stage::TrainDetector => &[Stage::Synth],
            Stage::Evaluate => &[Stage::TrainDetector],
            Stage::Tsne => &[Stage::TrainDetector],
            Stage::Compare => &[Stage::Evaluate],
        }
    }

    /// Config sections this stage reads.
    fn sections(self, c: &ExperimentConfig) -> serde_json::Value {
        use serde_json::json;
        match self {
            Stage::Phantom => json!({ "phantom": c.phantom, "roughen": c.roughen, "roughen_seed": c.roughen_seed() }),
            Stage::Preprocess => json!({ "preprocess": c.preprocess, "split": c.split, "split_seed": c.split_seed() }),
            Stage::TrainGan => json!({ "gan": c.gan }),
            Stage::Synth => json!({
                "jitter": c.jitter,
                "synth": c.synth,
                "mix": c.mix,
                "condition_check": c.condition_check,
                "synth_seed": c.synth_seed(),
            }),
            Stage::TrainDetector => json!({ "detector": c.detector, "detector_seeds": c.detector_seeds, "mix": c.mix }),
            Stage::Evaluate => json!({ "eval": c.eval }),
            Stage::Tsne => json!({ "tsne": c.tsne }),
            Stage::Compare => json!({}),
        }
    }

    fn downstream(self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != self && s.depends_on(self))
            .collect()
    }

    fn depends_on(self, other: Stage) -> bool {
        self.upstream().iter().any(|&u| u == other || u.depends_on(other))
    }
}

/// Chained per-stage hashes: each covers the stage's own sections and the
/// hashes of everything upstream.
pub fn stage_hash(stage: Stage, config: &ExperimentConfig) -> String {
    let up: Vec<String> = stage.upstream().iter().map(|&u| stage_hash(u, config)).collect();
    config_hash(&serde_json::json!({
        "stage": stage.name(),
        "upstream": up,
        "config": stage.sections(config),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub completed_at: DateTime<Utc>,
    pub elapsed_s: f64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Option<Self>> {
        let path = dir.join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| CliError::ConfigFile {
            path,
            message: e.to_string(),
        })
    }

    pub fn stage(&self, s: Stage) -> Option<&StageRecord> {
        self.stages.get(s.name())
    }
}

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub status: StageStatus,
    pub artifacts: Vec<String>,
}

/// An opened run directory with its resolved config.
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
    pub force: bool,
    _lock: RunLock,
}

impl Run {
    pub fn open(config: &ExperimentConfig, dir: &Path, force: bool) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        let config = config.resolved();
        let now = Utc::now();
        let manifest = match RunManifest::load(dir)? {
            Some(m) => m,
            None => RunManifest {
                run_id: format!("{}-{}", config.name, now.format("%Y%m%dT%H%M%S")),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: config_hash(&config),
                created_at: now,
                updated_at: now,
                stages: BTreeMap::new(),
            },
        };
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            manifest,
            force,
            _lock: lock,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> CliResult<()> {
        let path = self.dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("run manifest serialises");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    fn check_upstream(&self, stage: Stage) -> CliResult<()> {
        for &u in stage.upstream() {
            match self.manifest.stage(u) {
                None => {
                    return Err(CliError::MissingStage {
                        stage: stage.name(),
                        required: u.name(),
                    })
                }
                Some(r) if r.config_hash != stage_hash(u, &self.config) => {
                    return Err(CliError::StaleStage {
                        stage: stage.name(),
                        required: u.name(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Run `body` for `stage` unless it already completed under the same
    /// config. `body` returns artifact paths relative to the run directory.
    pub fn stage(&mut self, stage: Stage, body: impl FnOnce(&Run) -> CliResult<Vec<String>>) -> CliResult<StageOutcome> {
        self.check_upstream(stage)?;
        let hash = stage_hash(stage, &self.config);
        if let Some(r) = self.manifest.stage(stage) {
            let intact = r.artifacts.iter().all(|a| self.dir.join(a).exists());
            if r.config_hash == hash && intact && !self.force {
                log::info!("{}: already complete, nothing to do", stage.name());
                return Ok(StageOutcome {
                    stage: stage.name(),
                    status: StageStatus::Skipped,
                    artifacts: r.artifacts.clone(),
                });
            }
            if r.config_hash != hash && !self.force {
                return Err(CliError::ConfigChanged {
                    stage: stage.name(),
                    recorded: r.config_hash[..12].to_string(),
                    current: hash[..12].to_string(),
                });
            }
            for s in std::iter::once(stage).chain(stage.downstream()) {
                self.manifest.stages.remove(s.name());
            }
            self.save_manifest()?;
        }
        log::info!("{}: running", stage.name());
        let start = Instant::now();
        let artifacts = body(self)?;
        for a in &artifacts {
            if !self.dir.join(a).exists() {
                return Err(CliError::Missing {
                    what: format!("artifact {a} after stage {}", stage.name()),
                    hint: "the stage did not write it".into(),
                });
            }
        }
        let now = Utc::now();
        self.manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_hash: hash,
                completed_at: now,
                elapsed_s: start.elapsed().as_secs_f64(),
                artifacts: artifacts.clone(),
            },
        );
        self.manifest.updated_at = now;
        self.manifest.config_hash = config_hash(&self.config);
        self.save_manifest()?;
        let cfg_path = self.dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serialises");
        std::fs::write(&cfg_path, text).map_err(|e| CliError::io(&cfg_path, e))?;
        Ok(StageOutcome {
            stage: stage.name(),
            status: StageStatus::Completed,
            artifacts,
        })
    }
}
