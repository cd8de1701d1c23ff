use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use lesionaug_vtt::{pool_from_manifest, VttStore};
use serde_json::{json, Value};

use crate::compare::{compare, render_table};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{Run, RunManifest, Stage};
use crate::stages::{self, load_arm, AUGMENTED_ARM, BASELINE_ARM, SYNTH_DIR};

#[derive(Debug, Parser)]
#[command(name = "lesionaug", version, about = "Box-conditioned GAN augmentation experiments for lesion detection")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to the config's run_dir, then runs/<name>.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Redo the stage (and invalidate its downstream stages) even if it completed.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset and its roughened boxes.
    Phantom,
    /// Crop, resize and split by patient.
    Preprocess,
    /// Train the progressive conditional GAN.
    TrainGan,
    /// Generate the synthetic pool and run the condition check.
    Synth,
    /// Train real-only and real+synthetic detectors for every seed.
    TrainDetector,
    /// Score all detectors on the test split.
    Evaluate,
    /// Embed real and synthetic detector features with t-SNE.
    Tsne,
    /// Tabulate baseline against augmented results.
    Compare {
        /// Baseline arm report or run directory (instead of the current run).
        #[arg(long, requires = "augmented")]
        baseline: Option<PathBuf>,
        /// Augmented arm report or run directory.
        #[arg(long, requires = "baseline")]
        augmented: Option<PathBuf>,
    },
    /// Serve the visual Turing test API over the run's images.
    VttServe {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Run every stage in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Missing {
        what: "experiment config".into(),
        hint: "pass --config <file>".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.run_dir
        .clone()
        .or_else(|| cfg.run_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn open_run(cli: &Cli) -> CliResult<Run> {
    let cfg = load_config(cli)?;
    let dir = run_dir(cli, &cfg);
    Run::open(&cfg, &dir, cli.force)
}

fn outcome_json<T: serde::Serialize>(run: &Run, outcome: T) -> Value {
    json!({ "run_dir": run.dir, "result": outcome })
}

/// Execute one command; the returned JSON goes to stdout.
pub fn execute(cli: &Cli) -> CliResult<Value> {
    let stage_fn: fn(&mut Run) -> CliResult<crate::run::StageOutcome> = match &cli.command {
        Command::Phantom => stages::phantom,
        Command::Preprocess => stages::preprocess,
        Command::TrainGan => stages::train_gan_stage,
        Command::Synth => stages::synth,
        Command::TrainDetector => stages::train_detectors,
        Command::Evaluate => stages::evaluate,
        Command::Tsne => stages::tsne,
        Command::Compare {
            baseline: Some(b),
            augmented: Some(a),
        } => {
            let cmp = compare(&load_arm(b, BASELINE_ARM)?, &load_arm(a, AUGMENTED_ARM)?);
            return Ok(json!({ "comparison": cmp, "table": render_table(&cmp) }));
        }
        Command::Compare { .. } => stages::compare_stage,
        Command::Pipeline => {
            let mut run = open_run(cli)?;
            let outcomes = stages::pipeline(&mut run)?;
            return Ok(outcome_json(&run, outcomes));
        }
        Command::VttServe { bind } => return vtt_serve(cli, bind.as_deref()),
    };
    let mut run = open_run(cli)?;
    let outcome = stage_fn(&mut run)?;
    Ok(outcome_json(&run, outcome))
}

/// Build the rating store over a completed run without taking its lock.
pub fn vtt_store(dir: &Path, cfg: &ExperimentConfig) -> CliResult<VttStore> {
    let manifest = RunManifest::load(dir)?.ok_or_else(|| CliError::Missing {
        what: format!("run manifest in {}", dir.display()),
        hint: "run synth first".into(),
    })?;
    if manifest.stage(Stage::Synth).is_none() {
        return Err(CliError::MissingStage {
            stage: "vtt-serve",
            required: Stage::Synth.name(),
        });
    }
    let real = pool_from_manifest(&dir.join(stages::split_dir(&cfg.vtt.real_split)))?;
    let synthetic = pool_from_manifest(&dir.join(SYNTH_DIR))?;
    Ok(VttStore::open(&dir.join("vtt"), real, synthetic)?)
}

fn vtt_serve(cli: &Cli, bind: Option<&str>) -> CliResult<Value> {
    let cfg = load_config(cli)?;
    let dir = run_dir(cli, &cfg);
    let store = Arc::new(vtt_store(&dir, &cfg)?);
    let bind = bind.unwrap_or(&cfg.vtt.bind);
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| CliError::Config(format!("vtt bind address {bind:?}: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io(&dir, e))?;
    println!("{}", json!({ "listening": addr.to_string(), "run_dir": dir }));
    rt.block_on(lesionaug_vtt::serve(store, addr))
        .map_err(|e| CliError::io(&dir, e))?;
    Ok(json!({ "stopped": addr.to_string() }))
}
