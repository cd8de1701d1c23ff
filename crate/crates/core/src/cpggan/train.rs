//! Wasserstein training with gradient penalty and progressive growth.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{resolution, GanConfig, LatentDist};
use super::mask::mask_pyramid;
use super::network::{discriminator_forward, generator_forward, init_critic_stage, init_generator_stage};
use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::kernels;
use crate::nn::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use crate::rng::{derive, rng_for, Rng};

const SALT_STEP: u64 = 0x7374_6570;
const SALT_GROW: u64 = 0x6772_6f77;
const SALT_BATCH: u64 = 0x6261_7463;
const GRAD_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

fn draw(dist: LatentDist, rng: &mut Rng) -> f64 {
    match dist {
        LatentDist::Normal => StandardNormal.sample(rng),
        LatentDist::Uniform => rng.random_range(-1.0..=1.0),
    }
}

/// `n` latent vectors, i.i.d. N(0, 1) or U[-1, 1] per `config.latent_dist`.
pub fn sample_latent(n: usize, config: &GanConfig, seed: u64) -> Vec<LatentVector> {
    let mut rng = crate::rng::rng(seed);
    (0..n)
        .map(|_| LatentVector {
            z: (0..config.latent_dim).map(|_| draw(config.latent_dist, &mut rng)).collect(),
        })
        .collect()
}

pub fn latent_tensor(zs: &[LatentVector]) -> Tensor {
    let dim = zs.first().map_or(0, |z| z.z.len());
    let data = zs.iter().flat_map(|z| z.z.iter().copied()).collect();
    Tensor::new(&[zs.len(), dim], data)
}

fn latent_batch(n: usize, config: &GanConfig, rng: &mut Rng) -> Tensor {
    let data = (0..n * config.latent_dim).map(|_| draw(config.latent_dist, rng)).collect();
    Tensor::new(&[n, config.latent_dim], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: ParamSet,
    pub critic: ParamSet,
    pub stage: usize,
    pub alpha: f64,
    pub step_in_stage: usize,
    pub global_step: u64,
    pub opt_generator: Adam,
    pub opt_critic: Adam,
}

impl TrainState {
    /// Fresh networks at stage 0.
    pub fn new(config: &GanConfig) -> Result<Self> {
        Self::at_stage(config, 0)
    }

    /// Fresh networks with every block up to `stage` initialised and
    /// `alpha = 1`. Useful for inspecting a particular resolution.
    pub fn at_stage(config: &GanConfig, stage: usize) -> Result<Self> {
        config.validate()?;
        if stage > config.final_stage() {
            return Err(Error::InvalidInput(format!(
                "stage {stage} exceeds final stage {}",
                config.final_stage()
            )));
        }
        let mut state = TrainState {
            generator: ParamSet::new(),
            critic: ParamSet::new(),
            stage,
            alpha: 1.0,
            step_in_stage: 0,
            global_step: 0,
            opt_generator: Adam::new(),
            opt_critic: Adam::new(),
        };
        for s in 0..=stage {
            state.init_stage(config, s);
        }
        Ok(state)
    }

    fn init_stage(&mut self, config: &GanConfig, stage: usize) {
        let mut rng = rng_for(derive(config.seed, SALT_GROW), stage as u64);
        init_generator_stage(&mut self.generator, config, stage, &mut rng);
        init_critic_stage(&mut self.critic, config, stage, &mut rng);
    }

    pub fn resolution(&self) -> usize {
        resolution(self.stage)
    }
}

/// Fade-in weight after `step_in_stage` steps of a stage.
pub fn alpha_schedule(config: &GanConfig, stage: usize, step_in_stage: usize) -> f64 {
    if stage == 0 {
        return 1.0;
    }
    let window = config.steps_for_stage(stage) as f64 * config.fade_fraction;
    if window <= 0.0 {
        return 1.0;
    }
    (step_in_stage as f64 / window).min(1.0)
}

/// Move to the next resolution: new blocks are initialised, existing
/// parameters are left untouched and alpha restarts at 0.
pub fn grow(state: &mut TrainState, config: &GanConfig) -> Result<()> {
    if state.stage >= config.final_stage() {
        return Err(Error::FinalStage(state.stage));
    }
    state.stage += 1;
    state.init_stage(config, state.stage);
    state.alpha = 0.0;
    state.step_in_stage = 0;
    Ok(())
}

/// Per-sample interpolation `eps * real + (1 - eps) * fake`.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Tensor {
    assert_eq!(real.shape(), fake.shape());
    let n = real.shape()[0];
    assert_eq!(eps.len(), n);
    let per = real.len() / n.max(1);
    let data = real
        .data()
        .iter()
        .zip(fake.data())
        .enumerate()
        .map(|(i, (r, f))| {
            let e = eps[i / per];
            e * r + (1.0 - e) * f
        })
        .collect();
    Tensor::new(real.shape(), data)
}

/// `lambda * mean_i (||grad_x D(x_i)|| - 1)^2` at `x_hat = interpolate(real, fake, eps)`,
/// built in `graph` so it can be differentiated again with respect to the
/// critic parameters. `critic` maps `[N, ...]` inputs to `[N, 1]` scores.
pub fn gradient_penalty_with_eps<'g>(
    graph: &'g Graph,
    critic: impl Fn(Var<'g>) -> Result<Var<'g>>,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<Var<'g>> {
    if real.shape() != fake.shape() {
        return Err(Error::InvalidInput(format!(
            "real {:?} and fake {:?} batches differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    let x_hat = graph.leaf(interpolate(real, fake, eps));
    let score = critic(x_hat)?;
    let g = graph.grad(score.sum_all(), &[x_hat])[0];
    let mut reduced = vec![1; g.shape().len()];
    reduced[0] = n;
    let norm = g.square().sum_to(&reduced).add_scalar(GRAD_NORM_EPS).powf(0.5);
    Ok(norm.add_scalar(-1.0).square().mean_all().scale(lambda))
}

/// Per-sample interpolation weights `eps ~ U[0, 1]`.
pub fn sample_eps(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Gradient penalty with `eps` drawn from `seed`.
pub fn gradient_penalty<'g>(
    graph: &'g Graph,
    critic: impl Fn(Var<'g>) -> Result<Var<'g>>,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    seed: u64,
) -> Result<Var<'g>> {
    let eps = sample_eps(real.shape()[0], &mut crate::rng::rng(seed));
    gradient_penalty_with_eps(graph, critic, real, fake, &eps, lambda)
}

/// Loss terms recorded for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub global_step: u64,
    pub stage: usize,
    pub alpha: f64,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub gradient_penalty: f64,
    /// `mean D(real) - mean D(fake)`.
    pub wasserstein: f64,
}

fn finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

/// Average-pool full-resolution images down to `stage`, blending with the
/// previous resolution while the stage fades in.
pub fn real_at_stage(images: &Tensor, stage: usize, alpha: f64) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4();
    let r = resolution(stage);
    if h != w || h < r || !h.is_power_of_two() {
        return Err(Error::InvalidInput(format!("images {h}x{w} cannot be pooled to {r}")));
    }
    let mut x = images.clone();
    while x.shape()[2] > r {
        x = kernels::avg_pool2(&x);
    }
    if stage > 0 && alpha < 1.0 {
        let low = kernels::upsample2(&kernels::avg_pool2(&x));
        x = x.zip_map(&low, |a, b| alpha * a + (1.0 - alpha) * b);
    }
    Ok(x)
}

fn mask_vars<'g>(graph: &'g Graph, masks: &[Tensor]) -> Vec<Var<'g>> {
    masks.iter().map(|m| graph.constant(m.clone())).collect()
}

/// One round of `n_critic` critic updates followed by one generator update.
///
/// `images` are `[N, 1, R, R]` in `[-1, 1]` at the target resolution and
/// `boxes` their annotations; fakes are conditioned on the same boxes.
pub fn train_step(
    state: &mut TrainState,
    images: &Tensor,
    boxes: &[Vec<BBox>],
    config: &GanConfig,
) -> Result<StepLosses> {
    let (n, _, full, _) = images.dims4();
    if boxes.len() != n {
        return Err(Error::InvalidInput(format!("{n} images but {} box sets", boxes.len())));
    }
    if full != config.target_resolution {
        return Err(Error::InvalidInput(format!(
            "images are {full}px, config targets {}px",
            config.target_resolution
        )));
    }
    let stage = state.stage;
    let alpha = state.alpha;
    let mut rng = rng_for(derive(config.seed, SALT_STEP), state.global_step);
    let masks = mask_pyramid(boxes, full, stage)?;
    let real = real_at_stage(images, stage, alpha)?;
    let adam_d = AdamConfig {
        lr: config.lr_critic,
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: 1e-8,
    };
    let adam_g = AdamConfig {
        lr: config.lr_generator,
        ..adam_d
    };

    let mut critic_loss = 0.0;
    let mut gp_value = 0.0;
    let mut wasserstein = 0.0;
    for _ in 0..config.n_critic {
        let z = latent_batch(n, config, &mut rng);
        let fake = {
            let g = Graph::new();
            let gp = state.generator.bind(&g, false);
            let mv = mask_vars(&g, &masks);
            let out = generator_forward(&gp, config, g.constant(z), &mv, stage, alpha)?;
            out.value().as_ref().clone()
        };
        let eps = sample_eps(n, &mut rng);
        let g = Graph::new();
        let dp = state.critic.bind(&g, true);
        let mv = mask_vars(&g, &masks);
        let d_real = discriminator_forward(&dp, g.constant(real.clone()), &mv, stage, alpha)?.mean_all();
        let d_fake = discriminator_forward(&dp, g.constant(fake.clone()), &mv, stage, alpha)?.mean_all();
        let gp = gradient_penalty_with_eps(
            &g,
            |x| discriminator_forward(&dp, x, &mv, stage, alpha),
            &real,
            &fake,
            &eps,
            config.gp_lambda,
        )?;
        let loss = d_fake - d_real + gp;
        wasserstein = finite("wasserstein", d_real.item() - d_fake.item())?;
        gp_value = finite("gradient_penalty", gp.item())?;
        critic_loss = finite("critic_loss", loss.item())?;
        let grads = dp.grads(&g, loss);
        state.opt_critic.step(&adam_d, &mut state.critic, &grads);
    }

    let z = latent_batch(n, config, &mut rng);
    let g = Graph::new();
    let gp = state.generator.bind(&g, true);
    let dp = state.critic.bind(&g, false);
    let mv = mask_vars(&g, &masks);
    let fake = generator_forward(&gp, config, g.constant(z), &mv, stage, alpha)?;
    let loss = -discriminator_forward(&dp, fake, &mv, stage, alpha)?.mean_all();
    let generator_loss = finite("generator_loss", loss.item())?;
    let grads = gp.grads(&g, loss);
    state.opt_generator.step(&adam_g, &mut state.generator, &grads);

    let out = StepLosses {
        global_step: state.global_step,
        stage,
        alpha,
        critic_loss,
        generator_loss,
        gradient_penalty: gp_value,
        wasserstein,
    };
    state.global_step += 1;
    state.step_in_stage += 1;
    state.alpha = alpha_schedule(config, stage, state.step_in_stage);
    Ok(out)
}

/// Normalised training images and their boxes.
#[derive(Debug, Clone)]
pub struct TrainingPool {
    pub images: Vec<Tensor>,
    pub boxes: Vec<Vec<BBox>>,
}

impl TrainingPool {
    /// Images are mapped from `[0, 1]` to `[-1, 1]`; slices without boxes are
    /// dropped unless `include_empty_slices` is set.
    pub fn from_manifest(manifest: &DatasetManifest, config: &GanConfig) -> Result<Self> {
        let by_image = manifest.boxes_by_image();
        let mut images = Vec::new();
        let mut boxes = Vec::new();
        for rec in &manifest.records {
            let b: Vec<BBox> = by_image
                .get(rec.image_id.as_str())
                .cloned()
                .unwrap_or_default();
            if b.is_empty() && !config.include_empty_slices {
                continue;
            }
            let r = config.target_resolution;
            if rec.pixels.width() != r || rec.pixels.height() != r {
                return Err(Error::InvalidInput(format!(
                    "image {} is {}x{}, expected {r}x{r}",
                    rec.image_id,
                    rec.pixels.width(),
                    rec.pixels.height()
                )));
            }
            let data = rec.pixels.pixels().iter().map(|&v| f64::from(v) * 2.0 - 1.0).collect();
            images.push(Tensor::new(&[1, 1, r, r], data));
            boxes.push(b);
        }
        if images.is_empty() {
            return Err(Error::EmptyPool("no training images for the GAN".into()));
        }
        Ok(TrainingPool { images, boxes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Minibatch for `step`, sampled with replacement.
    pub fn batch(&self, size: usize, seed: u64, step: u64) -> (Tensor, Vec<Vec<BBox>>) {
        let mut rng = rng_for(derive(seed, SALT_BATCH), step);
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        let parts: Vec<Tensor> = idx.iter().map(|&i| self.images[i].clone()).collect();
        (Tensor::concat0(&parts), idx.iter().map(|&i| self.boxes[i].clone()).collect())
    }
}

/// Total number of steps over all stages.
pub fn total_steps(config: &GanConfig) -> u64 {
    (0..config.n_stages()).map(|s| config.steps_for_stage(s) as u64).sum()
}

/// Run (or resume) training until the final stage's step budget is spent.
/// `on_step` sees every step's losses and the updated state.
pub fn train_gan(
    state: &mut TrainState,
    pool: &TrainingPool,
    config: &GanConfig,
    mut on_step: impl FnMut(&StepLosses, &TrainState) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    loop {
        if state.step_in_stage >= config.steps_for_stage(state.stage) {
            if state.stage == config.final_stage() {
                return Ok(());
            }
            grow(state, config)?;
            continue;
        }
        let (x, b) = pool.batch(config.batch_size, config.seed, state.global_step);
        let losses = train_step(state, &x, &b, config)?;
        on_step(&losses, state)?;
    }
}
