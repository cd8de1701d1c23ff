//! Generator and critic for the box-conditioned progressive GAN.
//!
//! Each stage doubles the resolution. The condition mask at a stage's
//! resolution is concatenated as an extra channel in front of that stage's
//! first convolution, in both networks. Weights are stored with unit
//! variance and scaled at run time by the He constant (equalised learning
//! rate).

use rand::Rng;

use super::config::{resolution, GanConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamSet, Var};

const LEAK: f64 = 0.2;
const PIXEL_NORM_EPS: f64 = 1e-8;

fn he(fan_in: usize, gain: f64) -> f64 {
    gain * (1.0 / fan_in as f64).sqrt()
}

fn init_conv(p: &mut ParamSet, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) {
    p.init_normal(&format!("{name}.w"), &[out_c, in_c, k, k], rng);
    p.init_zeros(&format!("{name}.b"), &[1, out_c, 1, 1]);
}

fn init_dense(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
    p.init_normal(&format!("{name}.w"), &[fan_in, fan_out], rng);
    if bias {
        p.init_zeros(&format!("{name}.b"), &[1, fan_out]);
    }
}

/// Add the generator parameters of `stage` (no-op for existing names).
pub fn init_generator_stage(p: &mut ParamSet, cfg: &GanConfig, stage: usize, rng: &mut impl Rng) {
    let c = cfg.channels(stage);
    if stage == 0 {
        init_dense(p, "dense", cfg.latent_dim, c * 16, true, rng);
        init_conv(p, "s0.conv1", c, c + 1, 3, rng);
    } else {
        init_conv(p, &format!("s{stage}.conv1"), c, cfg.channels(stage - 1) + 1, 3, rng);
    }
    init_conv(p, &format!("s{stage}.conv2"), c, c, 3, rng);
    init_conv(p, &format!("s{stage}.rgb"), 1, c, 1, rng);
}

/// Add the critic parameters of `stage`.
pub fn init_critic_stage(p: &mut ParamSet, cfg: &GanConfig, stage: usize, rng: &mut impl Rng) {
    let c = cfg.channels(stage);
    init_conv(p, &format!("s{stage}.rgb"), c, 2, 1, rng);
    if stage == 0 {
        // minibatch-stddev feature + mask
        init_conv(p, "s0.conv1", c, c + 2, 3, rng);
        init_dense(p, "s0.dense", c * 16, c, true, rng);
        init_dense(p, "head", c, 1, false, rng);
    } else {
        init_conv(p, &format!("s{stage}.conv1"), c, c + 1, 3, rng);
        init_conv(p, &format!("s{stage}.conv2"), cfg.channels(stage - 1), c, 3, rng);
    }
}

fn conv<'g>(p: &Bound<'g>, name: &str, x: Var<'g>, gain: f64) -> Var<'g> {
    let w = p.get(&format!("{name}.w"));
    let ws = w.shape();
    let scaled = w.scale(he(ws[1] * ws[2] * ws[3], gain));
    let y = x.conv2d(scaled);
    let b = p.get(&format!("{name}.b")).expand(&y.shape());
    y + b
}

fn dense<'g>(p: &Bound<'g>, name: &str, x: Var<'g>, gain: f64) -> Var<'g> {
    let w = p.get(&format!("{name}.w"));
    let fan_in = w.shape()[0];
    let y = x.matmul(w.scale(he(fan_in, gain)));
    let bname = format!("{name}.b");
    if p.has(&bname) {
        let b = p.get(&bname).expand(&y.shape());
        y + b
    } else {
        y
    }
}

fn pixel_norm(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let inv = x
        .square()
        .sum_to(&[n, 1, h, w])
        .scale(1.0 / c as f64)
        .add_scalar(PIXEL_NORM_EPS)
        .powf(-0.5);
    x * inv.expand(&s)
}

/// Append the batch-averaged feature standard deviation as one channel.
fn minibatch_stddev(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mean = x.sum_to(&[1, c, h, w]).scale(1.0 / n as f64).expand(&s);
    let var = (x - mean).square().sum_to(&[1, c, h, w]).scale(1.0 / n as f64);
    let std = var.add_scalar(1e-8).powf(0.5);
    let avg = std.sum_all().scale(1.0 / (c * h * w) as f64);
    let feat = avg.expand(&[n, 1, h, w]);
    x.graph().concat_channels(&[x, feat])
}

fn check_masks(masks: &[Var<'_>], stage: usize) -> Result<()> {
    for s in 0..=stage {
        let r = resolution(s);
        match masks.get(s) {
            Some(m) if m.shape()[2] == r && m.shape()[3] == r => {}
            _ => return Err(Error::MissingMaskResolution(r)),
        }
    }
    Ok(())
}

fn gen_block<'g>(p: &Bound<'g>, stage: usize, h: Var<'g>, mask: Var<'g>) -> Var<'g> {
    let g = h.graph();
    let x = g.concat_channels(&[h, mask]);
    let x = pixel_norm(conv(p, &format!("s{stage}.conv1"), x, 2f64.sqrt()).leaky_relu(LEAK));
    pixel_norm(conv(p, &format!("s{stage}.conv2"), x, 2f64.sqrt()).leaky_relu(LEAK))
}

fn to_image<'g>(p: &Bound<'g>, stage: usize, h: Var<'g>) -> Var<'g> {
    conv(p, &format!("s{stage}.rgb"), h, 1.0).tanh()
}

/// Generator features at `stage` (before the image head).
fn gen_features<'g>(p: &Bound<'g>, cfg: &GanConfig, z: Var<'g>, masks: &[Var<'g>], stage: usize) -> Var<'g> {
    let n = z.shape()[0];
    let c0 = cfg.channels(0);
    let h = dense(p, "dense", z, 2f64.sqrt() / 4.0)
        .reshape(&[n, c0, 4, 4])
        .leaky_relu(LEAK);
    let mut h = gen_block(p, 0, pixel_norm(h), masks[0]);
    for s in 1..=stage {
        h = gen_block(p, s, h.upsample2(), masks[s]);
    }
    h
}

/// Both fade-in branches at `stage >= 1`: the new highest-resolution output
/// and the 2x nearest-upsampled output of the previous stage.
pub fn generator_paths<'g>(
    p: &Bound<'g>,
    cfg: &GanConfig,
    z: Var<'g>,
    masks: &[Var<'g>],
    stage: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    if stage == 0 {
        return Err(Error::InvalidInput("stage 0 has no previous stage".into()));
    }
    check_masks(masks, stage)?;
    let prev_h = gen_features(p, cfg, z, masks, stage - 1);
    let old = to_image(p, stage - 1, prev_h).upsample2();
    let new = to_image(p, stage, gen_block(p, stage, prev_h.upsample2(), masks[stage]));
    Ok((new, old))
}

/// Generated images `[N, 1, r, r]` in `[-1, 1]`, `r = 4 * 2^stage`:
/// `alpha * new + (1 - alpha) * upsample(previous)`.
pub fn generator_forward<'g>(
    p: &Bound<'g>,
    cfg: &GanConfig,
    z: Var<'g>,
    masks: &[Var<'g>],
    stage: usize,
    alpha: f64,
) -> Result<Var<'g>> {
    check_masks(masks, stage)?;
    if stage == 0 {
        return Ok(to_image(p, 0, gen_features(p, cfg, z, masks, 0)));
    }
    let (new, old) = generator_paths(p, cfg, z, masks, stage)?;
    Ok(new.scale(alpha) + old.scale(1.0 - alpha))
}

fn from_image<'g>(p: &Bound<'g>, stage: usize, x: Var<'g>, mask: Var<'g>) -> Var<'g> {
    let g = x.graph();
    conv(p, &format!("s{stage}.rgb"), g.concat_channels(&[x, mask]), 2f64.sqrt()).leaky_relu(LEAK)
}

fn critic_block<'g>(p: &Bound<'g>, stage: usize, h: Var<'g>, mask: Var<'g>) -> Var<'g> {
    let g = h.graph();
    let x = g.concat_channels(&[h, mask]);
    let x = conv(p, &format!("s{stage}.conv1"), x, 2f64.sqrt()).leaky_relu(LEAK);
    conv(p, &format!("s{stage}.conv2"), x, 2f64.sqrt())
        .leaky_relu(LEAK)
        .avg_pool2()
}

fn critic_tail<'g>(p: &Bound<'g>, h: Var<'g>, mask: Var<'g>) -> Var<'g> {
    let g = h.graph();
    let n = h.shape()[0];
    let x = g.concat_channels(&[minibatch_stddev(h), mask]);
    let x = conv(p, "s0.conv1", x, 2f64.sqrt()).leaky_relu(LEAK);
    let c = x.shape()[1];
    let x = dense(p, "s0.dense", x.reshape(&[n, c * 16]), 2f64.sqrt()).leaky_relu(LEAK);
    dense(p, "head", x, 1.0)
}

/// Critic input-pathway branches at `stage >= 1`, both at the previous
/// stage's feature resolution: the new block applied to the full-resolution
/// input, and the previous stage's input layer applied to the 2x average-pooled
/// input.
pub fn critic_paths<'g>(
    p: &Bound<'g>,
    x: Var<'g>,
    masks: &[Var<'g>],
    stage: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    check_masks(masks, stage)?;
    if stage == 0 {
        return Err(Error::InvalidInput("stage 0 has no previous stage".into()));
    }
    let new = critic_block(p, stage, from_image(p, stage, x, masks[stage]), masks[stage]);
    let old = from_image(p, stage - 1, x.avg_pool2(), masks[stage - 1]);
    Ok((new, old))
}

/// Critic scores `[N, 1]` (unbounded) for images at `stage` resolution.
pub fn discriminator_forward<'g>(
    p: &Bound<'g>,
    x: Var<'g>,
    masks: &[Var<'g>],
    stage: usize,
    alpha: f64,
) -> Result<Var<'g>> {
    check_masks(masks, stage)?;
    let r = resolution(stage);
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != r || s[3] != r {
        return Err(Error::InvalidInput(format!(
            "critic at stage {stage} expects [N, 1, {r}, {r}], got {s:?}"
        )));
    }
    let mut h = if stage == 0 {
        from_image(p, 0, x, masks[0])
    } else {
        let (new, old) = critic_paths(p, x, masks, stage)?;
        new.scale(alpha) + old.scale(1.0 - alpha)
    };
    for st in (1..stage).rev() {
        h = critic_block(p, st, h, masks[st]);
    }
    Ok(critic_tail(p, h, masks[0]))
}

/// Score the previous stage's pathway from a given feature map, used to
/// check the fade-in identity.
pub fn critic_from_features<'g>(p: &Bound<'g>, h: Var<'g>, masks: &[Var<'g>], feature_stage: usize) -> Var<'g> {
    let mut h = h;
    for st in (1..=feature_stage).rev() {
        h = critic_block(p, st, h, masks[st]);
    }
    critic_tail(p, h, masks[0])
}

/// Convenience for evaluating a generator without gradients.
pub fn bind_frozen<'g>(graph: &'g Graph, params: &ParamSet) -> Bound<'g> {
    params.bind(graph, false)
}
