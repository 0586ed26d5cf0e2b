//! Ground-truth labelling and precision-recall evaluation of uncertainty
//! scores.
//!
//! Queries are accepted in order of increasing uncertainty. All queries that
//! share a score enter together, so a curve has one point per distinct score
//! and is unaffected by how ties are ordered in the input. The area is the
//! average-precision sum: each correct query contributes the precision of the
//! block it was accepted in, divided by the number of correct queries.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::model::{GroundTruthLabel, PoseSet, RankedMatches, UncertaintyRecord};
use crate::par::{self, Execution};

/// Default correctness radius in meters.
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no correct queries; precision-recall is undefined")]
    NoPositives,
    #[error("score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no ground-truth pose for query {0}")]
    MissingQueryPose(String),
    #[error("query {0} has no retrieved match")]
    EmptyMatches(String),
    #[error("method {method} does not cover the labelled queries (missing [{}], unexpected [{}])", .missing.join(", "), .unexpected.join(", "))]
    QueryCoverageMismatch {
        method: String,
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
}

/// Marks each query correct when its best match is within `threshold_m`
/// meters (inclusive).
pub fn label_retrievals(
    query_poses: &PoseSet,
    best_matches: &[RankedMatches],
    threshold_m: f64,
) -> Result<Vec<GroundTruthLabel>, EvalError> {
    best_matches
        .iter()
        .map(|m| {
            let query_pose = query_poses
                .get(&m.query_id)
                .ok_or_else(|| EvalError::MissingQueryPose(m.query_id.clone()))?;
            let best = m.best().ok_or_else(|| EvalError::EmptyMatches(m.query_id.clone()))?;
            Ok(GroundTruthLabel::new(
                m.query_id.clone(),
                query_pose.clone(),
                best.pose.clone(),
                threshold_m,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// One point per distinct score, from strictest to loosest threshold.
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore { index });
    }
    match labels.iter().filter(|&&l| l).count() {
        0 => Err(EvalError::NoPositives),
        n => Ok(n),
    }
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve, EvalError> {
    let positives = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    let mut ap_sum = 0.0;
    let (mut accepted, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut block_correct = 0usize;
        while i < order.len() && scores[order[i]] == threshold {
            accepted += 1;
            if labels[order[i]] {
                block_correct += 1;
            }
            i += 1;
        }
        correct += block_correct;
        let precision = correct as f64 / accepted as f64;
        ap_sum += block_correct as f64 * precision;
        points.push(PrPoint {
            threshold,
            precision,
            recall: correct as f64 / positives as f64,
        });
    }
    Ok(PrCurve {
        points,
        auc: ap_sum / positives as f64,
    })
}

pub fn auc_pr(curve: &PrCurve) -> f64 {
    curve.auc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodAuc {
    pub method: String,
    pub auc_pr: f64,
}

/// Scores aligned to label order, or a coverage error.
pub fn align_scores(
    method: &str,
    records: &[UncertaintyRecord],
    labels: &[GroundTruthLabel],
) -> Result<Vec<f64>, EvalError> {
    let by_id: HashMap<&str, f64> = records.iter().map(|r| (r.query_id.as_str(), r.score)).collect();
    let label_ids: BTreeSet<&str> = labels.iter().map(|l| l.query_id.as_str()).collect();
    let record_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if label_ids != record_ids || records.len() != by_id.len() {
        return Err(EvalError::QueryCoverageMismatch {
            method: method.to_string(),
            missing: label_ids.difference(&record_ids).map(|s| s.to_string()).collect(),
            unexpected: record_ids.difference(&label_ids).map(|s| s.to_string()).collect(),
        });
    }
    Ok(labels.iter().map(|l| by_id[l.query_id.as_str()]).collect())
}

/// AUC-PR per method, best first; equal areas are ordered by name.
pub fn compare_methods(
    records: &[(String, Vec<UncertaintyRecord>)],
    labels: &[GroundTruthLabel],
) -> Result<Vec<MethodAuc>, EvalError> {
    compare_methods_with(records, labels, Execution::default())
}

pub fn compare_methods_with(
    records: &[(String, Vec<UncertaintyRecord>)],
    labels: &[GroundTruthLabel],
    exec: Execution,
) -> Result<Vec<MethodAuc>, EvalError> {
    let correct: Vec<bool> = labels.iter().map(|l| l.correct).collect();
    let mut table = par::try_map(records, exec, |(name, recs)| {
        let scores = align_scores(name, recs, labels)?;
        Ok::<_, EvalError>(MethodAuc {
            method: name.clone(),
            auc_pr: pr_curve(&scores, &correct)?.auc,
        })
    })?;
    table.sort_by(|a, b| b.auc_pr.total_cmp(&a.auc_pr).then_with(|| a.method.cmp(&b.method)));
    Ok(table)
}

pub fn write_auc_csv<W: Write>(mut w: W, table: &[MethodAuc]) -> io::Result<()> {
    writeln!(w, "method,auc_pr")?;
    for row in table {
        writeln!(w, "{},{}", row.method, row.auc_pr)?;
    }
    Ok(())
}

pub fn write_auc_json<W: Write>(mut w: W, table: &[MethodAuc]) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut w, table)?;
    writeln!(w)
}

pub fn write_curve_csv<W: Write>(mut w: W, curve: &PrCurve) -> io::Result<()> {
    writeln!(w, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}
