//! Per-query uncertainty estimators computed from retrieval output.
//!
//! * [`score_l2`] and [`score_pa`] use only feature-space distances.
//! * [`sue_score`] fits a weighted Gaussian to the poses of the top-K
//!   references and reports the trace of its covariance.
//! * [`sue_score_density_compensated`] reweighs each reference by the squared
//!   pose-space distance to its k-th neighbour, which imposes a uniform spatial
//!   prior on where queries occur.
//!
//! Weights are exponentials of feature distance. They are always evaluated
//! relative to the largest log-weight so `alpha = 350` with distances near 1
//! does not underflow; the shift cancels on normalization.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PoseSet, RankedMatches};
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("query {0} has no neighbors")]
    EmptyMatches(String),
    #[error("query {0} needs at least two neighbors")]
    NeedTwoNeighbors(String),
    #[error("no pose density for reference {0}")]
    MissingDensity(String),
    #[error("density k={k} needs more than {k} references, got {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("prior has {found} entries for {expected} neighbors")]
    PriorLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Exponential,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SueConfig {
    /// Decay of weight with feature distance, in 1/feature-distance.
    pub alpha: f64,
    /// Number of retrieved neighbours whose poses enter the fit.
    pub k: usize,
    pub weighting: Weighting,
}

impl Default for SueConfig {
    fn default() -> Self {
        Self {
            alpha: 350.0,
            k: 10,
            weighting: Weighting::Exponential,
        }
    }
}

impl SueConfig {
    pub fn uniform(k: usize) -> Self {
        Self {
            alpha: 0.0,
            k,
            weighting: Weighting::Uniform,
        }
    }

    fn effective_alpha(&self) -> f64 {
        match self.weighting {
            Weighting::Exponential => self.alpha,
            Weighting::Uniform => 0.0,
        }
    }
}

/// Weighted Gaussian fit over neighbour poses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPoseSummary {
    pub weights: Vec<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Total spatial variance, in square meters. This is the SUE score.
    pub trace: f64,
}

pub fn score_l2(matches: &RankedMatches) -> Result<f64, UncertaintyError> {
    matches
        .best()
        .map(|n| n.distance)
        .ok_or_else(|| UncertaintyError::EmptyMatches(matches.query_id.clone()))
}

/// Ratio of the best to the second-best distance. Two exact matches at
/// distance zero count as fully ambiguous (1.0).
pub fn score_pa(matches: &RankedMatches) -> Result<f64, UncertaintyError> {
    let [first, second, ..] = matches.neighbors.as_slice() else {
        return Err(UncertaintyError::NeedTwoNeighbors(matches.query_id.clone()));
    };
    if second.distance == 0.0 {
        return Ok(1.0);
    }
    Ok(first.distance / second.distance)
}

/// Normalized neighbour weights, `w_i ∝ exp(-alpha * (d_i - d_min))`.
pub fn sue_weights(distances: &[f64], config: &SueConfig) -> Vec<f64> {
    if distances.is_empty() {
        return Vec::new();
    }
    let alpha = config.effective_alpha();
    if alpha == 0.0 {
        return vec![1.0 / distances.len() as f64; distances.len()];
    }
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = distances.iter().map(|d| (-alpha * (d - d_min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Normalizes log-weights after shifting by their maximum. `None` when every
/// entry is `-inf`.
fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    Some(raw.into_iter().map(|w| w / total).collect())
}

/// Posterior over which neighbour is the true match.
///
/// Without a prior this is exactly [`sue_weights`]. A prior multiplies each
/// likelihood before normalization; zero prior entries get zero mass. If the
/// prior removes all mass the unweighted likelihood is returned.
pub fn posterior_match_belief(
    matches: &RankedMatches,
    config: &SueConfig,
    prior: Option<&[f64]>,
) -> Result<Vec<f64>, UncertaintyError> {
    let distances: Vec<f64> = matches.neighbors.iter().take(config.k).map(|n| n.distance).collect();
    if distances.is_empty() {
        return Err(UncertaintyError::EmptyMatches(matches.query_id.clone()));
    }
    let Some(prior) = prior else {
        return Ok(sue_weights(&distances, config));
    };
    if prior.len() != distances.len() {
        return Err(UncertaintyError::PriorLength {
            expected: distances.len(),
            found: prior.len(),
        });
    }
    let alpha = config.effective_alpha();
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let log_w: Vec<f64> = distances
        .iter()
        .zip(prior)
        .map(|(d, p)| -alpha * (d - d_min) + p.ln())
        .collect();
    Ok(normalize_log_weights(&log_w).unwrap_or_else(|| sue_weights(&distances, config)))
}

/// Weighted mean and population covariance (normalizer `Σw`) of `points`.
pub(crate) fn weighted_moments(points: &[&[f64]], weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = points.first().map_or(0, |p| p.len());
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(dim);
    for (p, &w) in points.iter().zip(weights) {
        for j in 0..dim {
            mean[j] += w * p[j];
        }
    }
    mean /= total;

    let mut cov = DMatrix::zeros(dim, dim);
    for (p, &w) in points.iter().zip(weights) {
        for a in 0..dim {
            let da = p[a] - mean[a];
            for b in a..dim {
                cov[(a, b)] += w * da * (p[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / total;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

fn summarize(matches: &RankedMatches, k: usize, weights: Vec<f64>) -> WeightedPoseSummary {
    let points: Vec<&[f64]> = matches
        .neighbors
        .iter()
        .take(k)
        .map(|n| n.pose.coords.as_slice())
        .collect();
    let (mean, covariance) = weighted_moments(&points, &weights);
    let trace = covariance.trace().max(0.0);
    WeightedPoseSummary {
        weights,
        mean,
        covariance,
        trace,
    }
}

/// Spatial spread of the top `config.k` neighbour poses. Uses all neighbours
/// when fewer than `config.k` are present.
pub fn sue_score(matches: &RankedMatches, config: &SueConfig) -> Result<WeightedPoseSummary, UncertaintyError> {
    let weights = posterior_match_belief(matches, config, None)?;
    Ok(summarize(matches, config.k, weights))
}

/// Distance from each reference to its k-th nearest other reference in pose
/// space. Small `z` means densely mapped.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseDensity {
    pub k: usize,
    z: Vec<f64>,
    index: HashMap<String, usize>,
}

impl PoseDensity {
    pub fn get(&self, reference_id: &str) -> Option<f64> {
        self.index.get(reference_id).map(|&i| self.z[i])
    }

    /// `z` for each pose, in the order of the input set.
    pub fn values(&self) -> &[f64] {
        &self.z
    }
}

pub fn pose_density(poses: &PoseSet, k: usize) -> Result<PoseDensity, UncertaintyError> {
    pose_density_with(poses, k, Execution::default())
}

pub fn pose_density_with(poses: &PoseSet, k: usize, exec: Execution) -> Result<PoseDensity, UncertaintyError> {
    let n = poses.len();
    if k == 0 || n <= k {
        return Err(UncertaintyError::KTooLarge { k, n });
    }
    let pts = poses.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].coords[0].total_cmp(&pts[b].coords[0]));
    let xs: Vec<f64> = order.iter().map(|&i| pts[i].coords[0]).collect();

    // Sweep outward along x from each point; stop once the x gap alone
    // exceeds the current k-th distance.
    let by_sorted = par::map_range(n, exec, |pos| {
        let me = &pts[order[pos]].coords;
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let (mut lo, mut hi) = (pos, pos + 1);
        loop {
            let left_gap = if lo > 0 { xs[pos] - xs[lo - 1] } else { f64::INFINITY };
            let right_gap = if hi < n { xs[hi] - xs[pos] } else { f64::INFINITY };
            let gap = left_gap.min(right_gap);
            if gap == f64::INFINITY {
                break;
            }
            if best.len() == k && gap > best[k - 1] * (1.0 + 1e-12) {
                break;
            }
            let other = if left_gap <= right_gap {
                lo -= 1;
                lo
            } else {
                hi += 1;
                hi - 1
            };
            let d = crate::model::euclidean(me, &pts[order[other]].coords);
            if best.len() < k || d < best[k - 1] {
                let at = best.partition_point(|&b| b <= d);
                best.insert(at, d);
                best.truncate(k);
            }
        }
        best[k - 1]
    });

    let mut z = vec![0.0; n];
    for (pos, &i) in order.iter().enumerate() {
        z[i] = by_sorted[pos];
    }
    let index = pts.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
    Ok(PoseDensity { k, z, index })
}

/// SUE with each neighbour's weight multiplied by `z²` before normalization.
pub fn sue_score_density_compensated(
    matches: &RankedMatches,
    density: &PoseDensity,
    config: &SueConfig,
) -> Result<WeightedPoseSummary, UncertaintyError> {
    let prior = matches
        .neighbors
        .iter()
        .take(config.k)
        .map(|n| {
            density
                .get(&n.reference_id)
                .map(|z| z * z)
                .ok_or_else(|| UncertaintyError::MissingDensity(n.reference_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let weights = posterior_match_belief(matches, config, Some(&prior))?;
    Ok(summarize(matches, config.k, weights))
}
