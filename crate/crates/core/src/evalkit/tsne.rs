//! Exact t-SNE: Gaussian input affinities calibrated to a perplexity by
//! bisection, Student-t output affinities, gradient descent on KL(P || Q)
//! with early exaggeration, momentum and adaptive gains.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    /// Step size; `None` picks `max(N / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iterations between recorded objective values.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            n_iter: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            log_every: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    pub perplexity: f64,
    pub seed: u64,
    /// `(iteration, KL(P || Q))` at the logging interval and at the end of
    /// every phase; P is never exaggerated here.
    pub objective_trace: Vec<(usize, f64)>,
    /// Objective right after the exaggeration phase.
    pub objective_after_exaggeration: Option<f64>,
}

impl TsneResult {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().map_or(f64::NAN, |&(_, v)| v)
    }
}

const BISECTION_TOL: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;
const P_FLOOR: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities of row `i` for precision `beta`, and their
/// Shannon entropy in nats.
fn row_affinities(dist: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let n = row.len();
    // Shift by the smallest off-diagonal distance for numerical range.
    let dmin = (0..n).filter(|&j| j != i).map(|j| dist[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i { 0.0 } else { (-(dist[j] - dmin) * beta).exp() };
        sum += row[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        row[j] /= sum;
        if row[j] > 0.0 {
            h -= row[j] * row[j].ln();
        }
    }
    h
}

/// Symmetrised joint affinities `P = (P_j|i + P_i|j) / 2N`, each conditional
/// row calibrated so its entropy equals `ln(perplexity)`.
pub(crate) fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let dist = &d[i * n..(i + 1) * n];
        let row = &mut cond[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut beta = 1.0;
        for _ in 0..BISECTION_STEPS {
            let h = row_affinities(dist, i, beta, row);
            if (h - target).abs() < BISECTION_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    p
}

/// Student-t kernel values `(1 + |yi - yj|^2)^-1` and their sum.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

pub(crate) fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, sum) = student_t(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[i * n + j] / sum).max(P_FLOOR);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

/// Embed `features` (N rows of equal length) into two dimensions.
pub fn tsne_embed(features: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("feature vectors must be finite and of equal length".into()));
    }
    let max_perp = (n - 1) as f64 / 3.0;
    if !(config.perplexity >= 1.0 && config.perplexity <= max_perp) {
        return Err(Error::InvalidInput(format!(
            "perplexity {} outside [1, {max_perp}] for {n} points",
            config.perplexity
        )));
    }
    if config.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
        return Err(Error::InvalidConfig("t-SNE learning rate must be positive".into()));
    }
    let learning_rate = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / config.early_exaggeration / 4.0).max(50.0));
    let p = joint_affinities(features, config.perplexity);
    let mut r = rng::rng(config.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut r), init.sample(&mut r)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut trace = Vec::new();
    let mut after_exaggeration = None;
    let log_every = config.log_every.max(1);

    for it in 0..config.n_iter {
        let exaggerating = it < config.exaggeration_iters;
        let ex = if exaggerating { config.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (num, sum) = student_t(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = 4.0 * (ex * p[i * n + j] - w / sum) * w;
                g[0] += coeff * (y[i][0] - y[j][0]);
                g[1] += coeff * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                gains[i][d] = if (g[d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8f64).max(MIN_GAIN)
                };
                update[i][d] = momentum * update[i][d] - learning_rate * gains[i][d] * g[d];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for yi in y.iter_mut() {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
        let done = it + 1;
        let phase_end = done == config.exaggeration_iters || done == config.n_iter;
        if done % log_every == 0 || phase_end {
            let kl = kl_divergence(&p, &y);
            trace.push((done, kl));
            if done == config.exaggeration_iters {
                after_exaggeration = Some(kl);
            }
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::NonFiniteLoss {
            term: "tsne_embedding",
            value: f64::NAN,
        });
    }
    Ok(TsneResult {
        points: y,
        perplexity: config.perplexity,
        seed: config.seed,
        objective_trace: trace,
        objective_after_exaggeration: after_exaggeration,
    })
}

/// Fraction of points whose nearest other point carries the same label.
pub fn nearest_neighbor_purity<L: PartialEq>(points: &[[f64; 2]], labels: &[L]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let same = (0..n)
        .filter(|&i| {
            let nn = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (points[a][0] - points[i][0]).powi(2) + (points[a][1] - points[i][1]).powi(2);
                    let db = (points[b][0] - points[i][0]).powi(2) + (points[b][1] - points[i][1]).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least two points");
            labels[nn] == labels[i]
        })
        .count();
    same as f64 / n as f64
}
