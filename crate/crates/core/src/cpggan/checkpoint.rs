//! GAN checkpoints in the shared parameter archive format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::GanConfig;
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::nn::{Adam, Archive};

pub const CHECKPOINT_KIND: &str = "cpggan";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: GanConfig,
    stage: usize,
    alpha: f64,
    step_in_stage: usize,
    global_step: u64,
    adam_steps_generator: BTreeMap<String, u64>,
    adam_steps_critic: BTreeMap<String, u64>,
}

pub fn checkpoint_archive(state: &TrainState, config: &GanConfig) -> Archive {
    let meta = Meta {
        config: config.clone(),
        stage: state.stage,
        alpha: state.alpha,
        step_in_stage: state.step_in_stage,
        global_step: state.global_step,
        adam_steps_generator: state.opt_generator.steps.clone(),
        adam_steps_critic: state.opt_critic.steps.clone(),
    };
    let mut a = Archive::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialises"));
    a.push_params("g.", &state.generator);
    a.push_params("d.", &state.critic);
    a.push_params("opt.g.m.", &state.opt_generator.first);
    a.push_params("opt.g.v.", &state.opt_generator.second);
    a.push_params("opt.d.m.", &state.opt_critic.first);
    a.push_params("opt.d.v.", &state.opt_critic.second);
    a
}

pub fn state_from_archive(archive: &Archive) -> Result<(TrainState, GanConfig)> {
    if archive.kind != CHECKPOINT_KIND {
        return Err(Error::CorruptArchive(format!(
            "expected a {CHECKPOINT_KIND} checkpoint, found {}",
            archive.kind
        )));
    }
    let meta: Meta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::CorruptArchive(format!("checkpoint metadata: {e}")))?;
    meta.config.validate()?;
    let state = TrainState {
        generator: archive.params("g."),
        critic: archive.params("d."),
        stage: meta.stage,
        alpha: meta.alpha,
        step_in_stage: meta.step_in_stage,
        global_step: meta.global_step,
        opt_generator: Adam {
            first: archive.params("opt.g.m."),
            second: archive.params("opt.g.v."),
            steps: meta.adam_steps_generator,
        },
        opt_critic: Adam {
            first: archive.params("opt.d.m."),
            second: archive.params("opt.d.v."),
            steps: meta.adam_steps_critic,
        },
    };
    if state.stage > meta.config.final_stage() {
        return Err(Error::CorruptArchive(format!("stage {} beyond config", state.stage)));
    }
    Ok((state, meta.config))
}

pub fn save_checkpoint(state: &TrainState, config: &GanConfig, path: &Path) -> Result<()> {
    checkpoint_archive(state, config).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, GanConfig)> {
    state_from_archive(&Archive::load(path)?)
}
