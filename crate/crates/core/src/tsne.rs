//! Exact O(N^2) t-SNE: perplexity calibration by per-row binary search,
//! KL(P||Q) gradient descent with a Student-t low-dimensional kernel and
//! early exaggeration.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTPUT_DIM: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 100.0,
            early_exaggeration: 4.0,
            exaggeration_iters: 50,
            seed: 1,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.perplexity > 1.0 && self.perplexity < (n as f64) - 1.0) {
            return Err(Error::Config(format!(
                "perplexity {} out of range (1, {}) for N={n}",
                self.perplexity,
                n - 1
            )));
        }
        Ok(())
    }
}

const PERPLEXITY_TOL_LOG2: f64 = 1e-3;
const MAX_BISECT_ITERS: usize = 100;

fn squared_distances(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i][j] = d;
            d2[j][i] = d;
        }
    }
    d2
}

/// Conditional distribution of row i at precision beta, plus its Shannon
/// entropy in bits.
fn row_distribution(d2_row: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = d2_row.len();
    let mut p = vec![0.0; n];
    let min_d2 = d2_row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        if j == i {
            continue;
        }
        *v = (-beta * (d2_row[j] - min_d2)).exp();
        sum += *v;
    }
    let mut entropy_bits = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        if j == i {
            continue;
        }
        *v /= sum;
        if *v > 0.0 {
            entropy_bits -= *v * v.log2();
        }
    }
    (p, entropy_bits)
}

/// Per-row conditional distributions with perplexity matched to the target
/// within |log2 error| <= 1e-3 by bisection on the kernel precision.
pub fn calibrate_conditionals(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let d2 = squared_distances(points);
    let target = perplexity.log2();
    let mut cond = vec![vec![0.0; n]; n];
    for i in 0..n {
        if (0..n).all(|j| j == i || d2[i][j] == 0.0) {
            return Err(Error::DegenerateDistances(i));
        }
        let mut beta = 1.0;
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut row = Vec::new();
        for _ in 0..MAX_BISECT_ITERS {
            let (p, h) = row_distribution(&d2[i], i, beta);
            row = p;
            let err = h - target;
            if err.abs() <= PERPLEXITY_TOL_LOG2 {
                break;
            }
            if err > 0.0 {
                // entropy too high: sharpen
                lo = beta;
                beta = if hi.is_finite() { (lo + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (lo + hi) / 2.0;
            }
        }
        cond[i] = row;
    }
    Ok(cond)
}

/// Symmetrised joint affinities P built from the calibrated conditionals.
pub fn calibrate_affinities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let cond = calibrate_conditionals(points, perplexity)?;
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = (cond[i][j] + cond[j][i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t affinities of a layout: unnormalised kernel matrix and its sum.
fn q_kernel(layout: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = layout.len();
    let mut num = vec![vec![0.0; n]; n];
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = layout[i]
                .iter()
                .zip(&layout[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = 1.0 / (1.0 + d2);
            num[i][j] = v;
            num[j][i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

/// KL(P || Q) for a layout, in nats.
pub fn kl_divergence(p: &[Vec<f64>], layout: &[Vec<f64>]) -> f64 {
    let (num, z) = q_kernel(layout);
    let n = layout.len();
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || p[i][j] <= 0.0 {
                continue;
            }
            let q = (num[i][j] / z).max(1e-300);
            kl += p[i][j] * (p[i][j] / q).ln();
        }
    }
    kl
}

/// Analytic t-SNE gradient dKL/dY.
pub fn kl_gradient(p: &[Vec<f64>], layout: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = layout.len();
    let (num, z) = q_kernel(layout);
    let mut grad = vec![vec![0.0; OUTPUT_DIM]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = num[i][j] / z;
            let mult = 4.0 * (p[i][j] - q) * num[i][j];
            for d in 0..OUTPUT_DIM {
                grad[i][d] += mult * (layout[i][d] - layout[j][d]);
            }
        }
    }
    grad
}

/// Run t-SNE; returns the 2-D layout and the per-iteration KL trace
/// (entry 0 is the KL of the initial layout, then one entry per iteration).
pub fn tsne(points: &[Vec<f64>], cfg: &TsneConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Config(format!("t-SNE needs at least 3 points, got {n}")));
    }
    cfg.validate(n)?;
    let p = calibrate_affinities(points, cfg.perplexity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layout: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..OUTPUT_DIM)
                .map(|_| 1e-4 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(kl_divergence(&p, &layout));
    let exaggerated: Vec<Vec<f64>> = p
        .iter()
        .map(|row| row.iter().map(|v| v * cfg.early_exaggeration).collect())
        .collect();
    for it in 0..cfg.iterations {
        let p_eff = if it < cfg.exaggeration_iters {
            &exaggerated
        } else {
            &p
        };
        let grad = kl_gradient(p_eff, &layout);
        for (y, g) in layout.iter_mut().zip(&grad) {
            for d in 0..OUTPUT_DIM {
                y[d] -= cfg.learning_rate * g[d];
            }
        }
        trace.push(kl_divergence(&p, &layout));
    }
    Ok((layout, trace))
}

/// CSV `x,y,label`, coordinates printed with 12 significant digits.
pub fn export_layout(layout: &[Vec<f64>], labels: &[usize], path: &Path) -> Result<()> {
    if layout.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "export_layout",
            detail: format!("{} rows vs {} labels", layout.len(), labels.len()),
        });
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "x,y,label")?;
    for (row, label) in layout.iter().zip(labels) {
        writeln!(f, "{:.11e},{:.11e},{}", row[0], row[1], label)?;
    }
    Ok(())
}

/// CSV `iteration,kl`.
pub fn export_kl_trace(trace: &[f64], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,kl")?;
    for (i, kl) in trace.iter().enumerate() {
        writeln!(f, "{},{:.11e}", i, kl)?;
    }
    Ok(())
}
