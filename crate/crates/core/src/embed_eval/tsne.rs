//! Exact t-SNE with early exaggeration, momentum and per-coordinate gains.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numkit::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// N x 2.
    pub coords: Tensor,
    pub initial_kl: f64,
    pub final_kl: f64,
}

const PERPLEXITY_TOL: f64 = 1e-4;
const MAX_SEARCH: usize = 200;
const MIN_GAIN: f64 = 0.01;
const FLOOR: f64 = 1e-12;

fn sq_distances(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row_slice(i).iter().zip(x.row_slice(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional row `i` at precision `beta`, returning its entropy (nats).
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = out.len();
    let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for j in 0..n {
        if j == i {
            out[j] = 0.0;
            continue;
        }
        let shifted = d[j] - dmin;
        let p = (-shifted * beta).exp();
        out[j] = p;
        sum += p;
        weighted += shifted * p;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Symmetrized affinities: each row's Gaussian width is searched so that
/// its perplexity matches `perplexity`, then `P = (P + Pᵀ) / 2N`.
pub fn joint_probabilities(points: &Tensor, perplexity: f64) -> Tensor {
    let n = points.rows();
    let d = sq_distances(points);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row_d = &d[i * n..(i + 1) * n];
        let row = &mut cond[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..MAX_SEARCH {
            let h = conditional_row(row_d, i, beta, row);
            let diff = h - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Tensor::new(vec![n, n], p).expect("square")
}

/// Student-t kernel values (diagonal zero) and their sum.
fn kernel(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// KL(P || Q) for a layout `coords` (N x 2).
pub fn kl_divergence(p: &Tensor, coords: &Tensor) -> f64 {
    let n = p.rows();
    let (num, sum) = kernel(coords.data(), n);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i != j && pij > 0.0 {
                let q = (num[i * n + j] / sum).max(FLOOR);
                kl += pij * (pij.max(FLOOR) / q).ln();
            }
        }
    }
    kl
}

/// Projects the rows of `points` to two dimensions.
pub fn tsne_project(points: &Tensor, cfg: &TsneConfig) -> Result<TsneResult, EvalError> {
    let n = points.rows();
    let needed = (3.0 * cfg.perplexity).ceil() as usize;
    if n < needed || n < 2 {
        return Err(EvalError::TooFewPoints { needed: needed.max(2), got: n });
    }
    let p = joint_probabilities(points, cfg.perplexity);
    let mut r = rng::stream(cfg.seed, "tsne-init");
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut r)).collect();
    let initial_kl = kl_divergence(&p, &Tensor::new(vec![n, 2], y.clone()).expect("n x 2"));
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    for iter in 0..cfg.iterations {
        let (exag, momentum) = if iter < cfg.exaggeration_iters {
            (cfg.exaggeration, cfg.momentum)
        } else {
            (1.0, cfg.final_momentum)
        };
        let (num, sum) = kernel(&y, n);
        grad.fill(0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p.get(i, j) - w / sum) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) { gains[k] + 0.2 } else { gains[k] * 0.8 };
            gains[k] = gains[k].max(MIN_GAIN);
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    let coords = Tensor::new(vec![n, 2], y).expect("n x 2");
    let final_kl = kl_divergence(&p, &coords);
    Ok(TsneResult { coords, initial_kl, final_kl })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(per: usize, dim: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let centre = if c == 0 { 5.0 } else { -5.0 };
            for _ in 0..per {
                data.extend((0..dim).map(|_| centre + normal.sample(&mut r)));
                labels.push(c);
            }
        }
        (Tensor::new(vec![2 * per, dim], data).unwrap(), labels)
    }

    fn row_perplexity(x: &Tensor, i: usize, perplexity: f64) -> f64 {
        // the joint matrix hides the conditional rows, so redo the search
        let n = x.rows();
        let d = sq_distances(x);
        let mut row = vec![0.0; n];
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        let mut h = 0.0;
        for _ in 0..MAX_SEARCH {
            h = conditional_row(&d[i * n..(i + 1) * n], i, beta, &mut row);
            if (h - perplexity.ln()).abs() < PERPLEXITY_TOL {
                break;
            }
            if h > perplexity.ln() {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        // entropy from the row itself, independent of the shifted formula
        let direct: f64 = -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        assert!((direct - h).abs() < 1e-9);
        direct.exp()
    }

    #[test]
    fn affinities_are_a_symmetric_distribution() {
        let (x, _) = clusters(20, 5, 1);
        let p = joint_probabilities(&x, 10.0);
        let mut total = 0.0;
        for i in 0..40 {
            assert_eq!(p.get(i, i), 0.0);
            for j in 0..40 {
                assert!(p.get(i, j) >= 0.0);
                assert_eq!(p.get(i, j), p.get(j, i));
                total += p.get(i, j);
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        for i in [0, 17, 39] {
            let perp = row_perplexity(&x, i, 10.0);
            assert!((perp.ln() - 10f64.ln()).abs() < PERPLEXITY_TOL);
        }
    }

    #[test]
    fn identical_points_give_uniform_rows() {
        let x = Tensor::filled(12, 3, 0.5);
        let p = joint_probabilities(&x, 3.0);
        for j in 1..12 {
            assert!((p.get(0, j) - 1.0 / (12.0 * 11.0)).abs() < 1e-15);
        }
        let cfg = TsneConfig { perplexity: 3.0, iterations: 50, ..Default::default() };
        let res = tsne_project(&x, &cfg).unwrap();
        assert!(res.coords.is_finite());
    }

    #[test]
    fn too_few_points() {
        let (x, _) = clusters(10, 3, 2);
        assert!(matches!(
            tsne_project(&x, &TsneConfig::default()),
            Err(EvalError::TooFewPoints { needed: 90, got: 20 })
        ));
    }

    #[test]
    fn recovers_two_clusters() {
        let (x, labels) = clusters(100, 10, 3);
        let cfg = TsneConfig { seed: 3, ..Default::default() };
        let res = tsne_project(&x, &cfg).unwrap();
        assert!(res.final_kl < res.initial_kl);
        let y = &res.coords;
        let mut correct = 0;
        for i in 0..200 {
            let nn = (0..200)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| (y.get(i, 0) - y.get(j, 0)).powi(2) + (y.get(i, 1) - y.get(j, 1)).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            correct += usize::from(labels[nn] == labels[i]);
        }
        assert!(correct as f64 / 200.0 >= 0.95, "{correct}/200");
        assert_eq!(tsne_project(&x, &cfg).unwrap().coords, res.coords);
    }
}
