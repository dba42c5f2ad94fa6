//! Training objectives: standard and reciprocal triplet terms, softmax
//! cross-entropy, the hybrid loss, logit-adjusted cross-entropy,
//! class-balanced focal loss, batch-hard triplet mining and the MaxNorm
//! weight-balancing hook.
//!
//! Every loss exists twice: as a plain value function (used for reporting and
//! as an independent oracle) and as a graph builder (used for training). The
//! two routes are tested against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId, DIST_EPS};
use crate::params::{maxnorm_project, ParamStore};
use crate::tensor::{euclidean, Tensor};

pub const HEAD_WEIGHT: &str = "head.weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossFamily {
    /// Cross-entropy + standard triplet term.
    TL,
    /// Cross-entropy + reciprocal triplet term.
    RC,
    /// Logit-adjusted cross-entropy + reciprocal triplet term.
    LA,
    /// Class-balanced focal loss + reciprocal triplet term.
    CB,
    /// CB plus the MaxNorm weight-balancing hook after every step.
    WB,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub family: LossFamily,
    /// Balance between classification and metric terms.
    pub lambda: f64,
    /// Margin of the standard triplet loss.
    pub margin: f64,
    /// Logit-adjustment temperature.
    pub tau: f64,
    /// Effective-number re-weighting hyper-parameter.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// MaxNorm ball radius.
    pub delta: f64,
    /// Evaluate the focal sum with p_i = sigmoid(x_i) for every class,
    /// ignoring the label, instead of the sign-corrected convention.
    pub literal_eq5: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            family: LossFamily::RC,
            lambda: 0.1,
            margin: 0.2,
            tau: 1.0,
            beta: 0.99,
            gamma: 1.0,
            delta: 1.0,
            literal_eq5: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.margin < 0.0 || self.tau < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config(
                "lambda, margin, tau and gamma must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config("beta must be in [0,1)".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config("delta must be positive".into()));
        }
        Ok(())
    }
}

/// Training-set class frequencies and raw counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassPriors {
    pub pi: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn estimate_priors(labels: &[usize], num_classes: usize) -> Result<ClassPriors> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    let pi = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(ClassPriors { pi, counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningStrategy {
    /// Farthest positive, nearest negative per anchor; ties to the lowest index.
    BatchHard,
    /// Every valid (a,p,n) combination; used as the mining oracle.
    All,
}

pub fn mine_triplets(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    strategy: MiningStrategy,
) -> Result<Vec<Triplet>> {
    assert_eq!(embeddings.len(), labels.len());
    let n = labels.len();
    let mut out = Vec::new();
    match strategy {
        MiningStrategy::All => {
            for a in 0..n {
                for p in 0..n {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for neg in 0..n {
                        if labels[neg] != labels[a] {
                            out.push(Triplet {
                                anchor: a,
                                positive: p,
                                negative: neg,
                            });
                        }
                    }
                }
            }
        }
        MiningStrategy::BatchHard => {
            for a in 0..n {
                let mut best_p: Option<(f64, usize)> = None;
                let mut best_n: Option<(f64, usize)> = None;
                for o in 0..n {
                    if o == a {
                        continue;
                    }
                    let d = euclidean(&embeddings[a], &embeddings[o]);
                    if labels[o] == labels[a] {
                        if best_p.map_or(true, |(bd, _)| d > bd) {
                            best_p = Some((d, o));
                        }
                    } else if best_n.map_or(true, |(bd, _)| d < bd) {
                        best_n = Some((d, o));
                    }
                }
                if let (Some((_, p)), Some((_, neg))) = (best_p, best_n) {
                    out.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidTriplet);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Value-level losses
// ---------------------------------------------------------------------------

/// max(0, d_ap - d_an + margin)
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// d_ap + 1/d_an, with the distance guard in the denominator.
pub fn reciprocal_triplet_loss(d_ap: f64, d_an: f64) -> f64 {
    d_ap + 1.0 / d_an.max(DIST_EPS)
}

/// -log softmax(logits)[y] via the log-sum-exp max shift.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

pub fn hybrid_loss(logits: &[f64], y: usize, d_ap: f64, d_an: f64, lambda: f64) -> f64 {
    cross_entropy(logits, y) + lambda * reciprocal_triplet_loss(d_ap, d_an)
}

/// Cross-entropy over logits shifted by tau * ln(prior).
pub fn logit_adjusted_ce(logits: &[f64], y: usize, priors: &ClassPriors, tau: f64) -> Result<f64> {
    let adjusted = adjusted_logits(logits, priors, tau)?;
    Ok(cross_entropy(&adjusted, y))
}

fn adjusted_logits(logits: &[f64], priors: &ClassPriors, tau: f64) -> Result<Vec<f64>> {
    if let Some(i) = priors.pi.iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroPrior(i));
    }
    Ok(logits
        .iter()
        .zip(&priors.pi)
        .map(|(&x, &p)| x + tau * p.ln())
        .collect())
}

/// Effective-number class weight (1-beta)/(1-beta^n).
pub fn cb_weight(beta: f64, n_y: usize) -> f64 {
    (1.0 - beta) / (1.0 - beta.powi(n_y as i32))
}

/// Class-balanced sigmoid-focal loss. The sign-corrected convention uses
/// p_t = sigmoid(x_i) for the labelled class and sigmoid(-x_i) otherwise;
/// `literal` evaluates p_i = sigmoid(x_i) for every class instead.
pub fn class_balanced_focal(
    logits: &[f64],
    y: usize,
    priors: &ClassPriors,
    beta: f64,
    gamma: f64,
    literal: bool,
) -> f64 {
    let w = cb_weight(beta, priors.counts[y].max(1));
    let sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let z = if literal || i == y { x } else { -x };
            let p = sigmoid(z);
            (1.0 - p).powf(gamma) * (-p.ln())
        })
        .sum();
    w * sum
}

/// Apply the MaxNorm projection to the classification head rows.
pub fn weight_balancing_hook(params: &mut ParamStore, delta: f64) -> Result<()> {
    if !params.contains(HEAD_WEIGHT) {
        return Err(Error::MissingHead(HEAD_WEIGHT.to_string()));
    }
    maxnorm_project(params.value_mut(HEAD_WEIGHT)?, delta)
}

// ---------------------------------------------------------------------------
// Graph-level losses (training path)
// ---------------------------------------------------------------------------

fn onehot(len: usize, y: usize) -> Tensor {
    let mut v = vec![0.0; len];
    v[y] = 1.0;
    Tensor::vector(v)
}

/// Scalar node -sum_i onehot(y)_i * log softmax(logits)_i.
pub fn graph_cross_entropy(g: &mut Graph, logits: NodeId, y: usize) -> Result<NodeId> {
    let c = g.value(logits).numel();
    let sm = g.softmax(logits)?;
    let lg = g.log(sm);
    let hot = g.constant(onehot(c, y));
    let picked = g.mul(lg, hot)?;
    let mean = g.mean_axis(picked, 0)?;
    Ok(g.scalar_mul(-(c as f64), mean))
}

pub fn graph_logit_adjusted_ce(
    g: &mut Graph,
    logits: NodeId,
    y: usize,
    priors: &ClassPriors,
    tau: f64,
) -> Result<NodeId> {
    if let Some(i) = priors.pi.iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroPrior(i));
    }
    let offsets: Vec<f64> = priors.pi.iter().map(|p| tau * p.ln()).collect();
    let off = g.constant(Tensor::vector(offsets));
    let adjusted = g.add(logits, off)?;
    graph_cross_entropy(g, adjusted, y)
}

pub fn graph_class_balanced_focal(
    g: &mut Graph,
    logits: NodeId,
    y: usize,
    priors: &ClassPriors,
    beta: f64,
    gamma: f64,
    literal: bool,
) -> Result<NodeId> {
    let c = g.value(logits).numel();
    let w = cb_weight(beta, priors.counts[y].max(1));
    let signs: Vec<f64> = (0..c)
        .map(|i| if literal || i == y { 1.0 } else { -1.0 })
        .collect();
    let sv = g.constant(Tensor::vector(signs));
    let z = g.mul(logits, sv)?;
    let p = g.sigmoid(z);
    let neg_z = g.scalar_mul(-1.0, z);
    let q = g.sigmoid(neg_z); // 1 - p, computed stably
    let log_q = g.log(q);
    let focal = {
        let scaled = g.scalar_mul(gamma, log_q);
        g.exp(scaled) // (1-p)^gamma
    };
    let log_p = g.log(p);
    let neg_log_p = g.scalar_mul(-1.0, log_p);
    let terms = g.mul(focal, neg_log_p)?;
    let mean = g.mean_axis(terms, 0)?;
    Ok(g.scalar_mul(w * c as f64, mean))
}

/// relu(d_ap - d_an + margin) from two scalar distance nodes.
pub fn graph_triplet(g: &mut Graph, d_ap: NodeId, d_an: NodeId, margin: f64) -> Result<NodeId> {
    let diff = g.sub(d_ap, d_an)?;
    let m = g.constant(Tensor::scalar(margin));
    let shifted = g.add(diff, m)?;
    Ok(g.relu(shifted))
}

/// d_ap + 1/max(d_an, eps) from two scalar distance nodes.
pub fn graph_reciprocal_triplet(g: &mut Graph, d_ap: NodeId, d_an: NodeId) -> Result<NodeId> {
    let inv = g.recip_guard(d_an, DIST_EPS);
    g.add(d_ap, inv)
}
