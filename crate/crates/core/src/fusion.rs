//! Zero-shot fusion of score components.
//!
//! Each component's raw scores over the videos of one query become a softmax
//! distribution `P_i` with entropy `H(P_i)`. The default rule weights each
//! distribution by `1 / H(P_i)` and sums, so confident (peaked) components
//! dominate flat ones. Mean, max, reciprocal-rank and `exp(-H)` weighting are
//! provided for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rank_descending, FusedRanking, ScoreComponentMatrix};

/// Lower bound on entropy before taking its reciprocal. A one-hot
/// distribution would otherwise get an infinite weight.
pub const ENTROPY_FLOOR: f64 = 1e-12;

/// A probability distribution over the videos of one query, with its
/// natural-log entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDistribution {
    pub probs: Vec<f64>,
    pub entropy: f64,
}

impl ComponentDistribution {
    /// Wraps an existing distribution. Probabilities must be non-negative and
    /// sum to 1 within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("distribution is empty"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        let entropy = entropy(&probs);
        Ok(ComponentDistribution { probs, entropy })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// Numerically stable softmax over one component's scores.
pub fn softmax_over_videos(scores: &[f64]) -> Result<ComponentDistribution> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax input contains NaN or infinity"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.into_iter().map(|e| e / total).collect();
    let entropy = entropy(&probs);
    Ok(ComponentDistribution { probs, entropy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    /// `sum_i P_i / max(H(P_i), eps)`
    InvEntropy,
    /// `(1/n) sum_i P_i`
    Mean,
    /// `max_i P_i`, per video
    Max,
    /// `sum_i 1 / (k + rank_i)` with 1-based ranks; `k = 0` by default
    Rrf,
    /// `sum_i exp(-H(P_i)) P_i`
    NegExpEntropy,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::InvEntropy,
        FusionMethod::Mean,
        FusionMethod::Max,
        FusionMethod::Rrf,
        FusionMethod::NegExpEntropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::InvEntropy => "inv_entropy",
            FusionMethod::Mean => "mean",
            FusionMethod::Max => "max",
            FusionMethod::Rrf => "rrf",
            FusionMethod::NegExpEntropy => "neg_exp_entropy",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown fusion method `{s}` (expected one of inv_entropy, mean, max, rrf, neg_exp_entropy)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Additive rank constant for RRF. Zero gives plain reciprocal ranks.
    #[serde(default)]
    pub rrf_k: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::InvEntropy,
            rrf_k: 0.0,
        }
    }
}

impl From<FusionMethod> for FusionConfig {
    fn from(method: FusionMethod) -> Self {
        FusionConfig { method, rrf_k: 0.0 }
    }
}

fn check_inputs(dists: &[ComponentDistribution], video_order: &[String]) -> Result<()> {
    if dists.is_empty() {
        return Err(Error::invalid("no distributions to fuse"));
    }
    for (i, d) in dists.iter().enumerate() {
        if d.len() != video_order.len() {
            return Err(Error::invalid(format!(
                "distribution {i} covers {} videos, expected {}",
                d.len(),
                video_order.len()
            )));
        }
    }
    Ok(())
}

fn weighted_sum(dists: &[ComponentDistribution], weight: impl Fn(&ComponentDistribution) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; dists[0].len()];
    for d in dists {
        let w = weight(d);
        out.iter_mut().zip(&d.probs).for_each(|(o, p)| *o += w * p);
    }
    out
}

/// Fused scores for `config.method`, aligned with `video_order`.
pub fn fused_scores(
    dists: &[ComponentDistribution],
    video_order: &[String],
    config: &FusionConfig,
) -> Result<Vec<f64>> {
    check_inputs(dists, video_order)?;
    Ok(match config.method {
        FusionMethod::InvEntropy => weighted_sum(dists, |d| 1.0 / d.entropy.max(ENTROPY_FLOOR)),
        FusionMethod::NegExpEntropy => weighted_sum(dists, |d| (-d.entropy).exp()),
        FusionMethod::Mean => {
            let n = dists.len() as f64;
            let mut s = weighted_sum(dists, |_| 1.0);
            s.iter_mut().for_each(|x| *x /= n);
            s
        }
        FusionMethod::Max => {
            let mut s = vec![f64::NEG_INFINITY; video_order.len()];
            for d in dists {
                s.iter_mut().zip(&d.probs).for_each(|(o, p)| *o = o.max(*p));
            }
            s
        }
        FusionMethod::Rrf => {
            let mut s = vec![0.0; video_order.len()];
            for d in dists {
                for (rank0, &v) in rank_descending(&d.probs, video_order).iter().enumerate() {
                    s[v] += 1.0 / (config.rrf_k + (rank0 + 1) as f64);
                }
            }
            s
        }
    })
}

pub fn fuse(
    query_id: &str,
    dists: &[ComponentDistribution],
    video_order: &[String],
    config: &FusionConfig,
) -> Result<FusedRanking> {
    let scores = fused_scores(dists, video_order, config)?;
    FusedRanking::from_scores(query_id, scores, video_order)
}

pub fn fuse_inverse_entropy(query_id: &str, dists: &[ComponentDistribution], video_order: &[String]) -> Result<FusedRanking> {
    fuse(query_id, dists, video_order, &FusionMethod::InvEntropy.into())
}

pub fn fuse_mean(query_id: &str, dists: &[ComponentDistribution], video_order: &[String]) -> Result<FusedRanking> {
    fuse(query_id, dists, video_order, &FusionMethod::Mean.into())
}

pub fn fuse_max(query_id: &str, dists: &[ComponentDistribution], video_order: &[String]) -> Result<FusedRanking> {
    fuse(query_id, dists, video_order, &FusionMethod::Max.into())
}

pub fn fuse_rrf(query_id: &str, dists: &[ComponentDistribution], video_order: &[String]) -> Result<FusedRanking> {
    fuse(query_id, dists, video_order, &FusionMethod::Rrf.into())
}

pub fn fuse_neg_exp_entropy(query_id: &str, dists: &[ComponentDistribution], video_order: &[String]) -> Result<FusedRanking> {
    fuse(query_id, dists, video_order, &FusionMethod::NegExpEntropy.into())
}

/// Softmax of every component in the matrix, in component order.
pub fn matrix_distributions(matrix: &ScoreComponentMatrix) -> Result<Vec<ComponentDistribution>> {
    matrix
        .components
        .values()
        .map(|s| softmax_over_videos(s))
        .collect()
}

/// Softmax each component of the matrix and fuse.
pub fn fuse_matrix(matrix: &ScoreComponentMatrix, config: &FusionConfig) -> Result<FusedRanking> {
    let dists = matrix_distributions(matrix)?;
    fuse(&matrix.query_id, &dists, &matrix.video_order, config)
}
