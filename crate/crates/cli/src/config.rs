use std::path::{Path, PathBuf};

use lesionaug_core::augment::{ConditionJitterSpec, MixRatio, MixSpec};
use lesionaug_core::cpggan::GanConfig;
use lesionaug_core::dataio::{PhantomConfig, RoughenSpec, SplitFractions};
use lesionaug_core::detector::DetectorConfig;
use lesionaug_core::evalkit::{EvalConfig, TsneConfig};
use lesionaug_core::rng::derive;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Crop each slice to the tight box of pixels above `crop_threshold`.
    pub foreground_crop: bool,
    pub crop_threshold: f32,
    pub resolution: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            foreground_crop: true,
            crop_threshold: 0.05,
            resolution: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Images to synthesize; `None` makes twice the real training count.
    pub n_images: Option<usize>,
    /// JSON list of `{image_id, reason}` removed from the synthetic pool.
    pub exclusion_list: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionCheckConfig {
    pub n_samples: usize,
    pub min_pass_rate: f64,
}

impl Default for ConditionCheckConfig {
    fn default() -> Self {
        ConditionCheckConfig {
            n_samples: 100,
            min_pass_rate: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneStageConfig {
    /// Points drawn from each of the real and synthetic training pools.
    pub n_per_class: usize,
    pub embed: TsneConfig,
}

impl Default for TsneStageConfig {
    fn default() -> Self {
        TsneStageConfig {
            n_per_class: 100,
            embed: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VttConfig {
    pub bind: String,
    /// Pool of real images offered to raters.
    pub real_split: String,
}

impl Default for VttConfig {
    fn default() -> Self {
        VttConfig {
            bind: "127.0.0.1:8080".into(),
            real_split: "test".into(),
        }
    }
}

fn default_seeds() -> usize {
    3
}

fn default_mix() -> MixSpec {
    MixSpec {
        ratio: MixRatio::OneToOne,
        shuffle_seed: 0,
    }
}

/// One experiment: every module config plus a global seed from which all
/// module seeds are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub roughen: RoughenSpec,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub gan: GanConfig,
    #[serde(default)]
    pub jitter: ConditionJitterSpec,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub condition_check: ConditionCheckConfig,
    /// Real/synthetic mix of the augmented arm; the baseline arm is real only.
    #[serde(default = "default_mix")]
    pub mix: MixSpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default = "default_seeds")]
    pub detector_seeds: usize,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub tsne: TsneStageConfig,
    #[serde(default)]
    pub vtt: VttConfig,
}

pub const SALT_PHANTOM: u64 = 1;
pub const SALT_ROUGHEN: u64 = 2;
pub const SALT_SPLIT: u64 = 3;
pub const SALT_GAN: u64 = 4;
pub const SALT_JITTER: u64 = 5;
pub const SALT_SYNTH: u64 = 6;
pub const SALT_MIX: u64 = 7;
pub const SALT_DETECTOR: u64 = 8;
pub const SALT_TSNE: u64 = 9;

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let module_seeds = [
            ("phantom.seed", self.phantom.seed),
            ("gan.seed", self.gan.seed),
            ("jitter.seed", self.jitter.seed),
            ("mix.shuffle_seed", self.mix.shuffle_seed),
            ("detector.seed", self.detector.seed),
            ("tsne.seed", self.tsne.embed.seed),
        ];
        for (key, v) in module_seeds {
            if v != 0 {
                return Err(CliError::Config(format!(
                    "{key} is derived from the top-level seed and must not be set"
                )));
            }
        }
        if self.name.trim().is_empty() {
            return Err(CliError::Config("name must not be empty".into()));
        }
        self.phantom.validate()?;
        self.split.validate()?;
        self.gan.validate()?;
        self.jitter.validate()?;
        self.detector.validate()?;
        self.eval.validate()?;
        if self.preprocess.resolution != self.gan.target_resolution
            || self.preprocess.resolution != self.detector.input_resolution
        {
            return Err(CliError::Config(format!(
                "preprocess.resolution {}, gan.target_resolution {} and detector.input_resolution {} must agree",
                self.preprocess.resolution, self.gan.target_resolution, self.detector.input_resolution
            )));
        }
        if self.mix.ratio == MixRatio::RealOnly {
            return Err(CliError::Config("mix.ratio of the augmented arm must add synthetic images".into()));
        }
        if self.detector_seeds == 0 {
            return Err(CliError::Config("detector_seeds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_check.min_pass_rate) {
            return Err(CliError::Config("condition_check.min_pass_rate must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Copy with every module seed derived from `seed`.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let s = self.seed;
        c.phantom.seed = derive(s, SALT_PHANTOM);
        c.gan.seed = derive(s, SALT_GAN);
        c.jitter.seed = derive(s, SALT_JITTER);
        c.mix.shuffle_seed = derive(s, SALT_MIX);
        c.detector.seed = derive(s, SALT_DETECTOR);
        c.tsne.embed.seed = derive(s, SALT_TSNE);
        c
    }

    pub fn roughen_seed(&self) -> u64 {
        derive(self.seed, SALT_ROUGHEN)
    }

    pub fn split_seed(&self) -> u64 {
        derive(self.seed, SALT_SPLIT)
    }

    pub fn synth_seed(&self) -> u64 {
        derive(self.seed, SALT_SYNTH)
    }

    /// Seed of the `k`-th detector replicate.
    pub fn detector_seed(&self, k: usize) -> u64 {
        derive(derive(self.seed, SALT_DETECTOR), k as u64)
    }
}

fn write_canonical(v: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_canonical(&m[k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Canonical JSON text: object keys sorted, no whitespace.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serialises");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out
}

/// SHA-256 of the canonical JSON form, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}
