use lesionaug_core::cpggan::checkpoint::{checkpoint_archive, state_from_archive};
use lesionaug_core::cpggan::network::{critic_from_features, critic_paths, generator_paths};
use lesionaug_core::cpggan::train::{gradient_penalty_with_eps, interpolate, real_at_stage, total_steps};
use lesionaug_core::cpggan::*;
use lesionaug_core::dataio::{generate_phantom_dataset, PhantomConfig};
use lesionaug_core::nn::{kernels, Archive, Graph, Tensor, Var};
use lesionaug_core::{BBox, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> GanConfig {
    GanConfig {
        latent_dim: 16,
        base_channels: 8,
        min_channels: 4,
        target_resolution: 64,
        batch_size: 2,
        n_critic: 1,
        steps_per_stage: 4,
        ..GanConfig::default()
    }
}

fn random_boxes(rng: &mut ChaCha8Rng, res: i32) -> Vec<BBox> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let x = rng.random_range(0..res - 4);
            let y = rng.random_range(0..res - 4);
            let w = rng.random_range(2..=(res - x).min(20));
            let h = rng.random_range(2..=(res - y).min(20));
            BBox::new(x, y, x + w, y + h)
        })
        .collect()
}

fn masks<'g>(g: &'g Graph, boxes: &[Vec<BBox>], stage: usize) -> Vec<Var<'g>> {
    mask_pyramid(boxes, 64, stage).unwrap().into_iter().map(|m| g.constant(m)).collect()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn latent_sampling() {
    let mut cfg = small_config();
    assert_eq!(sample_latent(3, &cfg, 5), sample_latent(3, &cfg, 5));
    cfg.latent_dist = LatentDist::Uniform;
    for z in sample_latent(50, &cfg, 1) {
        assert!(z.z.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    cfg.latent_dist = LatentDist::Normal;
    cfg.latent_dim = 1000;
    let zs = sample_latent(100, &cfg, 2);
    let n = 100_000.0;
    let mean: f64 = zs.iter().flat_map(|z| z.z.iter()).sum::<f64>() / n;
    assert!(mean.abs() < 4.0 / f64::sqrt(n), "mean {mean}");
}

#[test]
fn generator_fade_endpoints_at_every_stage() {
    let cfg = small_config();
    let state = TrainState::at_stage(&cfg, cfg.final_stage()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let boxes: Vec<Vec<BBox>> = (0..2).map(|_| random_boxes(&mut rng, 64)).collect();
    let z = randn(&[2, cfg.latent_dim], 4);
    for stage in 1..=cfg.final_stage() {
        let g = Graph::new();
        let p = state.generator.bind(&g, false);
        let m = masks(&g, &boxes, stage);
        let zv = g.constant(z.clone());
        let at0 = generator_forward(&p, &cfg, zv, &m, stage, 0.0).unwrap().value();
        let at1 = generator_forward(&p, &cfg, zv, &m, stage, 1.0).unwrap().value();
        let prev = generator_forward(&p, &cfg, zv, &m[..stage], stage - 1, 1.0).unwrap().value();
        let (new, _) = generator_paths(&p, &cfg, zv, &m, stage).unwrap();
        assert!(at0.max_abs_diff(&kernels::upsample2(&prev)) <= 1e-6);
        assert!(at1.max_abs_diff(&new.value()) <= 1e-6);
        assert_eq!(at1.shape(), &[2, 1, resolution(stage), resolution(stage)]);
        assert!(at1.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn critic_fade_endpoints_at_every_stage() {
    let cfg = small_config();
    let state = TrainState::at_stage(&cfg, cfg.final_stage()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let boxes: Vec<Vec<BBox>> = (0..3).map(|_| random_boxes(&mut rng, 64)).collect();
    for stage in 1..=cfg.final_stage() {
        let r = resolution(stage);
        let x = randn(&[3, 1, r, r], stage as u64);
        let g = Graph::new();
        let p = state.critic.bind(&g, false);
        let m = masks(&g, &boxes, stage);
        let xv = g.constant(x.clone());
        let at0 = discriminator_forward(&p, xv, &m, stage, 0.0).unwrap().value();
        let at1 = discriminator_forward(&p, xv, &m, stage, 1.0).unwrap().value();
        let pooled = g.constant(kernels::avg_pool2(&x));
        let prev = discriminator_forward(&p, pooled, &m[..stage], stage - 1, 1.0).unwrap().value();
        let (new, _) = critic_paths(&p, xv, &m, stage).unwrap();
        let new_score = critic_from_features(&p, new, &m, stage - 1).value();
        assert!(at0.max_abs_diff(&prev) <= 1e-6, "stage {stage}");
        assert!(at1.max_abs_diff(&new_score) <= 1e-6, "stage {stage}");
        assert_eq!(at1.shape(), &[3, 1]);
        assert!(at1.all_finite());
    }
}

#[test]
fn critic_rejects_wrong_resolution_and_missing_masks() {
    let cfg = small_config();
    let state = TrainState::at_stage(&cfg, 2).unwrap();
    let g = Graph::new();
    let p = state.critic.bind(&g, false);
    let m = masks(&g, &[vec![]], 2);
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    assert!(discriminator_forward(&p, x, &m, 2, 1.0).is_err());
    let gp = state.generator.bind(&g, false);
    let z = g.constant(Tensor::zeros(&[1, cfg.latent_dim]));
    let err = generator_forward(&gp, &cfg, z, &m[..2], 2, 1.0).unwrap_err();
    assert!(matches!(err, Error::MissingMaskResolution(16)));
}

#[test]
fn conditioning_changes_output() {
    let cfg = small_config();
    let state = TrainState::at_stage(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for probe in 0..100 {
        let z = randn(&[1, cfg.latent_dim], 1000 + probe);
        let a = vec![random_boxes(&mut rng, 64)];
        let mut b = vec![random_boxes(&mut rng, 64)];
        while b == a {
            b = vec![random_boxes(&mut rng, 64)];
        }
        let g = Graph::new();
        let p = state.generator.bind(&g, false);
        let zv = g.constant(z);
        let ya = generator_forward(&p, &cfg, zv, &masks(&g, &a, 3), 3, 1.0).unwrap().value();
        let yb = generator_forward(&p, &cfg, zv, &masks(&g, &b, 3), 3, 1.0).unwrap().value();
        let l1: f64 = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 > 0.0, "probe {probe}");
    }
    let out = generate_batch(&state, &cfg, &[vec![]], 0).unwrap();
    assert_eq!(out.len(), 1);
    assert!(out[0].1.is_empty());
}

#[test]
fn critic_is_linear_in_head() {
    let cfg = small_config();
    let mut state = TrainState::at_stage(&cfg, 1).unwrap();
    let x = randn(&[2, 1, 8, 8], 1);
    let boxes = vec![vec![BBox::new(10, 10, 30, 30)], vec![]];
    let score = |s: &TrainState| {
        let g = Graph::new();
        let p = s.critic.bind(&g, false);
        let m = masks(&g, &boxes, 1);
        discriminator_forward(&p, g.constant(x.clone()), &m, 1, 0.5).unwrap().value().as_ref().clone()
    };
    let before = score(&state);
    for v in state.critic.get_mut("head.w").unwrap().data_mut() {
        *v *= 2.0;
    }
    let after = score(&state);
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn penalty_of_unit_linear_critic_is_zero() {
    let g = Graph::new();
    let mut w = randn(&[1, 1, 8, 8], 2);
    let norm = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    w = w.map(|v| v / norm);
    let wt = w.reshape(&[64, 1]);
    let wv = g.constant(wt);
    let real = randn(&[4, 1, 8, 8], 3);
    let fake = randn(&[4, 1, 8, 8], 4);
    let gp = gradient_penalty(&g, |x| Ok(x.reshape(&[4, 64]).matmul(wv)), &real, &fake, 10.0, 0).unwrap();
    assert!(gp.item().abs() < 1e-9, "{}", gp.item());
}

#[test]
fn penalty_of_constant_critic_is_lambda() {
    let g = Graph::new();
    let real = randn(&[4, 1, 8, 8], 3);
    let fake = randn(&[4, 1, 8, 8], 4);
    let c = g.constant(Tensor::full(&[4, 1], 0.3));
    let gp = gradient_penalty(&g, |_| Ok(c), &real, &fake, 10.0, 0).unwrap();
    assert!((gp.item() - 10.0).abs() < 1e-4, "{}", gp.item());
}

#[test]
fn interpolation_endpoints() {
    let a = randn(&[2, 1, 4, 4], 1);
    let b = randn(&[2, 1, 4, 4], 2);
    let x = interpolate(&a, &b, &[1.0, 0.0]);
    assert_eq!(x.sample(0), a.sample(0));
    assert_eq!(x.sample(1), b.sample(1));
}

#[test]
fn penalty_is_differentiable_in_critic_weights() {
    let g = Graph::new();
    let w = g.leaf(randn(&[3, 1, 3, 3], 9));
    let real = randn(&[2, 1, 8, 8], 1);
    let fake = randn(&[2, 1, 8, 8], 2);
    let gp = gradient_penalty_with_eps(&g, |x| Ok(x.conv2d(w).tanh().sum_to(&[2, 1, 1, 1]).reshape(&[2, 1])), &real, &fake, &[0.3, 0.7], 10.0).unwrap();
    let dw = g.grad(gp, &[w])[0].value();
    let h = 1e-5;
    let base = w.value();
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let g2 = Graph::new();
            let mut t = base.as_ref().clone();
            t.data_mut()[i] += delta;
            let w2 = g2.constant(t);
            gradient_penalty_with_eps(&g2, |x| Ok(x.conv2d(w2).tanh().sum_to(&[2, 1, 1, 1]).reshape(&[2, 1])), &real, &fake, &[0.3, 0.7], 10.0).unwrap().item()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = dw.data()[i];
        assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "{i}: {fd} vs {an}");
    }
}

fn phantom_pool(cfg: &GanConfig, n_patients: usize) -> TrainingPool {
    let ds = generate_phantom_dataset(&PhantomConfig {
        n_patients,
        ..PhantomConfig::default()
    })
    .unwrap();
    TrainingPool::from_manifest(&ds.manifest, cfg).unwrap()
}

#[test]
fn penalty_off_gives_plain_wasserstein_loss() {
    let cfg = GanConfig {
        gp_lambda: 0.0,
        ..small_config()
    };
    let pool = phantom_pool(&cfg, 2);
    let mut state = TrainState::new(&cfg).unwrap();
    let (x, b) = pool.batch(2, 0, 0);
    let l = train_step(&mut state, &x, &b, &cfg).unwrap();
    assert_eq!(l.gradient_penalty, 0.0);
    assert_eq!(l.critic_loss, -l.wasserstein);
}

#[test]
fn stage0_smoke_run_records_finite_estimates() {
    let cfg = GanConfig {
        steps_per_stage: 200,
        batch_size: 4,
        n_critic: 2,
        target_resolution: 64,
        ..small_config()
    };
    let mut pool = phantom_pool(&cfg, 4);
    pool.images.truncate(20);
    pool.boxes.truncate(20);
    let mut state = TrainState::new(&cfg).unwrap();
    let mut log = Vec::new();
    for step in 0..200 {
        let (x, b) = pool.batch(cfg.batch_size, cfg.seed, step);
        log.push(train_step(&mut state, &x, &b, &cfg).unwrap());
    }
    assert_eq!(log.len(), 200);
    assert!(log.iter().all(|l| l.wasserstein.is_finite() && l.critic_loss.is_finite()));
    assert_eq!(state.global_step, 200);
}

#[test]
fn alpha_reaches_one_after_fade_window() {
    let cfg = GanConfig {
        steps_per_stage: 6,
        fade_fraction: 0.5,
        ..small_config()
    };
    assert_eq!(alpha_schedule(&cfg, 0, 0), 1.0);
    assert_eq!(alpha_schedule(&cfg, 2, 0), 0.0);
    assert_eq!(alpha_schedule(&cfg, 2, 1), 1.0 / 3.0);
    assert_eq!(alpha_schedule(&cfg, 2, 3), 1.0);
    assert_eq!(alpha_schedule(&cfg, 2, 5), 1.0);

    let pool = phantom_pool(&cfg, 2);
    let mut state = TrainState::new(&cfg).unwrap();
    grow(&mut state, &cfg).unwrap();
    assert_eq!(state.alpha, 0.0);
    for step in 0..3 {
        let (x, b) = pool.batch(2, 0, step);
        train_step(&mut state, &x, &b, &cfg).unwrap();
    }
    assert_eq!(state.alpha, 1.0);
}

#[test]
fn growth_preserves_parameters_and_stops_at_target() {
    let cfg = small_config();
    let mut state = TrainState::new(&cfg).unwrap();
    let mut seen = vec![state.resolution()];
    while state.stage < cfg.final_stage() {
        let before_g = state.generator.clone();
        let before_d = state.critic.clone();
        grow(&mut state, &cfg).unwrap();
        for (k, v) in before_g.iter() {
            assert_eq!(state.generator.get(k), Some(v));
        }
        for (k, v) in before_d.iter() {
            assert_eq!(state.critic.get(k), Some(v));
        }
        assert!(state.generator.len() > before_g.len());
        seen.push(state.resolution());
    }
    assert_eq!(seen, vec![4, 8, 16, 32, 64]);
    assert!(matches!(grow(&mut state, &cfg), Err(Error::FinalStage(4))));

    let big = GanConfig {
        target_resolution: 256,
        ..cfg
    };
    assert_eq!(resolution(big.final_stage()), 256);
}

#[test]
fn full_run_is_deterministic() {
    let cfg = GanConfig {
        target_resolution: 16,
        steps_per_stage: 2,
        ..small_config()
    };
    let pool = phantom_pool(
        &GanConfig {
            target_resolution: 64,
            ..cfg.clone()
        },
        2,
    );
    let pool = TrainingPool {
        images: pool.images.iter().map(|t| kernels::avg_pool2(&kernels::avg_pool2(t))).collect(),
        boxes: pool
            .boxes
            .iter()
            .map(|bs| bs.iter().map(|b| BBox::new(b.x_min / 4, b.y_min / 4, (b.x_max + 3) / 4, (b.y_max + 3) / 4)).collect())
            .collect(),
    };
    let run = || {
        let mut state = TrainState::new(&cfg).unwrap();
        let mut last = None;
        train_gan(&mut state, &pool, &cfg, |l, _| {
            last = Some(*l);
            Ok(())
        })
        .unwrap();
        (state, last.unwrap())
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(s1.global_step, total_steps(&cfg));
    assert_eq!(s1.stage, cfg.final_stage());
    assert!((l1.critic_loss - l2.critic_loss).abs() <= 1e-5);
    assert!((l1.generator_loss - l2.generator_loss).abs() <= 1e-5);
    assert_eq!(s1, s2);
}

#[test]
fn checkpoint_round_trip_reproduces_generation() {
    let cfg = small_config();
    let pool = phantom_pool(&cfg, 2);
    let mut state = TrainState::at_stage(&cfg, 1).unwrap();
    state.alpha = 0.25;
    let (x, b) = pool.batch(2, 0, 0);
    train_step(&mut state, &x, &b, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gan.ckpt");
    save_checkpoint(&state, &cfg, &path).unwrap();
    let (loaded, lcfg) = load_checkpoint(&path).unwrap();
    assert_eq!(lcfg, cfg);
    assert_eq!(loaded, state);
    let conds = vec![vec![BBox::new(20, 20, 40, 36)], vec![]];
    let a = generate_batch(&state, &cfg, &conds, 7).unwrap();
    let c = generate_batch(&loaded, &lcfg, &conds, 7).unwrap();
    for ((ia, _), (ic, _)) in a.iter().zip(&c) {
        let d = ia.pixels().iter().zip(ic.pixels()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(d <= 1e-6);
    }
}

#[test]
fn checkpoint_rejects_truncation_and_version() {
    let cfg = small_config();
    let state = TrainState::new(&cfg).unwrap();
    let bytes = checkpoint_archive(&state, &cfg).to_bytes();
    for cut in [0, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Archive::from_bytes(&bytes[..cut]).is_err());
    }
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(Archive::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.ckpt");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let wrong = Archive::new("detector", serde_json::json!({}));
    assert!(state_from_archive(&wrong).is_err());
}

#[test]
fn generation_arity_boxes_and_determinism() {
    let cfg = small_config();
    let state = TrainState::at_stage(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let conds: Vec<Vec<BBox>> = (0..20).map(|_| random_boxes(&mut rng, 64)).collect();
    let a = generate_batch(&state, &cfg, &conds, 3).unwrap();
    let b = generate_batch(&state, &cfg, &conds, 3).unwrap();
    assert_eq!(a.len(), 20);
    for ((img, boxes), cond) in a.iter().zip(&conds) {
        assert_eq!(boxes, cond);
        assert_eq!((img.width(), img.height()), (64, 64));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(a, b);
}

#[test]
fn real_images_fade_between_resolutions() {
    let x = randn(&[1, 1, 16, 16], 1);
    assert_eq!(real_at_stage(&x, 2, 1.0).unwrap(), x);
    let full = real_at_stage(&x, 1, 1.0).unwrap();
    let faded = real_at_stage(&x, 1, 0.0).unwrap();
    let down = kernels::avg_pool2(&x);
    assert!(full.max_abs_diff(&down) < 1e-15);
    assert!(faded.max_abs_diff(&kernels::upsample2(&kernels::avg_pool2(&down))) < 1e-15);
}
