//! Domain types shared across the crate.
//!
//! Everything here is immutable once built and carries only validation logic.
//! Descriptor components are held as `f64` in memory regardless of the on-disk
//! precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A global image descriptor with a stable string identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub id: String,
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        Self { id: id.into(), values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A spatial pose: 2 or 3 coordinates in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub id: String,
    pub coords: Vec<f64>,
}

impl Pose {
    pub fn new(id: impl Into<String>, coords: Vec<f64>) -> Self {
        Self { id: id.into(), coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Euclidean distance between the coordinates of two poses.
    pub fn distance(&self, other: &Pose) -> f64 {
        euclidean(&self.coords, &other.coords)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("duplicate ids: {}", .0.join(", "))]
    DuplicateId(Vec<String>),
    #[error("id mismatch: descriptors only [{}], poses only [{}]", .descriptors_only.join(", "), .poses_only.join(", "))]
    IdMismatch {
        descriptors_only: Vec<String>,
        poses_only: Vec<String>,
    },
    #[error("dimension mismatch: expected {expected}, got {} for [{}]", .found, .ids.join(", "))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        ids: Vec<String>,
    },
    #[error("pose dimension must be 2 or 3, got {0}")]
    PoseDimension(usize),
    #[error("non-finite value in [{}]", .0.join(", "))]
    NonFiniteValue(Vec<String>),
    /// Several independent problems found in one pass.
    #[error("{}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Multiple(Vec<ModelError>),
}

impl ModelError {
    fn collect(mut errors: Vec<ModelError>) -> Result<(), ModelError> {
        match errors.len() {
            0 => Ok(()),
            1 => Err(errors.pop().unwrap()),
            _ => Err(ModelError::Multiple(errors)),
        }
    }
}

fn duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dups.insert(id.to_string());
        }
    }
    dups.into_iter().collect()
}

/// Groups ids whose length differs from `expected` by the offending length.
fn dimension_errors<'a>(expected: usize, items: impl Iterator<Item = (&'a str, usize)>) -> Vec<ModelError> {
    let mut by_dim: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, dim) in items {
        if dim != expected {
            by_dim.entry(dim).or_default().push(id.to_string());
        }
    }
    by_dim
        .into_iter()
        .map(|(found, mut ids)| {
            ids.sort();
            ModelError::DimensionMismatch { expected, found, ids }
        })
        .collect()
}

/// An ordered collection of descriptors sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Vec<Descriptor>,
    dim: usize,
}

impl DescriptorSet {
    pub fn new(descriptors: Vec<Descriptor>) -> Result<Self, ModelError> {
        let dim = descriptors.first().map(Descriptor::dim).unwrap_or(0);
        let mut errors = Vec::new();
        if dim == 0 && !descriptors.is_empty() {
            errors.push(ModelError::DimensionMismatch {
                expected: 1,
                found: 0,
                ids: vec![descriptors[0].id.clone()],
            });
        }
        let dups = duplicates(descriptors.iter().map(|d| d.id.as_str()));
        if !dups.is_empty() {
            errors.push(ModelError::DuplicateId(dups));
        }
        errors.extend(dimension_errors(
            dim,
            descriptors.iter().map(|d| (d.id.as_str(), d.dim())),
        ));
        let mut non_finite: Vec<String> = descriptors
            .iter()
            .filter(|d| d.values.iter().any(|v| !v.is_finite()))
            .map(|d| d.id.clone())
            .collect();
        if !non_finite.is_empty() {
            non_finite.sort();
            errors.push(ModelError::NonFiniteValue(non_finite));
        }
        ModelError::collect(errors)?;
        Ok(Self { descriptors, dim })
    }

    pub fn empty() -> Self {
        Self {
            descriptors: Vec::new(),
            dim: 0,
        }
    }

    /// Descriptor dimension; 0 for an empty set.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Descriptor> {
        self.descriptors.iter()
    }

    pub fn as_slice(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn get(&self, index: usize) -> Option<&Descriptor> {
        self.descriptors.get(index)
    }

    /// Applies `f` to every descriptor's values, keeping ids and order.
    pub fn map_values(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self, ModelError> {
        Self::new(
            self.descriptors
                .iter()
                .map(|d| Descriptor::new(d.id.clone(), f(&d.values)))
                .collect(),
        )
    }
}

impl<'a> IntoIterator for &'a DescriptorSet {
    type Item = &'a Descriptor;
    type IntoIter = std::slice::Iter<'a, Descriptor>;

    fn into_iter(self) -> Self::IntoIter {
        self.descriptors.iter()
    }
}

/// An ordered collection of poses sharing one dimensionality (2 or 3).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    poses: Vec<Pose>,
    dim: usize,
    index: BTreeMap<String, usize>,
}

impl PoseSet {
    pub fn new(poses: Vec<Pose>) -> Result<Self, ModelError> {
        let dim = poses.first().map(Pose::dim).unwrap_or(2);
        let mut errors = Vec::new();
        if !(2..=3).contains(&dim) {
            errors.push(ModelError::PoseDimension(dim));
        }
        let dups = duplicates(poses.iter().map(|p| p.id.as_str()));
        if !dups.is_empty() {
            errors.push(ModelError::DuplicateId(dups));
        }
        errors.extend(dimension_errors(dim, poses.iter().map(|p| (p.id.as_str(), p.dim()))));
        let mut non_finite: Vec<String> = poses
            .iter()
            .filter(|p| p.coords.iter().any(|v| !v.is_finite()))
            .map(|p| p.id.clone())
            .collect();
        if !non_finite.is_empty() {
            non_finite.sort();
            errors.push(ModelError::NonFiniteValue(non_finite));
        }
        ModelError::collect(errors)?;
        let index = poses.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
        Ok(Self { poses, dim, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pose> {
        self.poses.iter()
    }

    pub fn as_slice(&self) -> &[Pose] {
        &self.poses
    }

    pub fn get(&self, id: &str) -> Option<&Pose> {
        self.index.get(id).map(|&i| &self.poses[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

impl<'a> IntoIterator for &'a PoseSet {
    type Item = &'a Pose;
    type IntoIter = std::slice::Iter<'a, Pose>;

    fn into_iter(self) -> Self::IntoIter {
        self.poses.iter()
    }
}

/// Reference descriptors joined with their poses. Pose `i` belongs to
/// descriptor `i` after construction.
#[derive(Debug, Clone)]
pub struct VprMap {
    descriptors: DescriptorSet,
    poses: PoseSet,
}

impl VprMap {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &DescriptorSet {
        &self.descriptors
    }

    pub fn poses(&self) -> &PoseSet {
        &self.poses
    }

    pub fn pose_dim(&self) -> usize {
        self.poses.dim()
    }

    /// Pose of the reference at descriptor position `i`.
    pub fn pose_at(&self, i: usize) -> &Pose {
        &self.poses.as_slice()[i]
    }
}

/// Joins descriptors and poses into a map, reporting every inconsistency
/// found (sorted by id) rather than stopping at the first.
pub fn validate_map(descriptors: DescriptorSet, poses: PoseSet) -> Result<VprMap, ModelError> {
    if descriptors.is_empty() {
        return Err(ModelError::Empty("descriptor"));
    }
    if poses.is_empty() {
        return Err(ModelError::Empty("pose"));
    }
    let desc_ids: BTreeSet<&str> = descriptors.iter().map(|d| d.id.as_str()).collect();
    let pose_ids: BTreeSet<&str> = poses.iter().map(|p| p.id.as_str()).collect();
    if desc_ids != pose_ids {
        return Err(ModelError::IdMismatch {
            descriptors_only: desc_ids.difference(&pose_ids).map(|s| s.to_string()).collect(),
            poses_only: pose_ids.difference(&desc_ids).map(|s| s.to_string()).collect(),
        });
    }
    // Reorder poses to follow descriptor order.
    let ordered = descriptors
        .iter()
        .map(|d| poses.get(&d.id).cloned().expect("id sets checked equal"))
        .collect();
    let poses = PoseSet::new(ordered)?;
    Ok(VprMap { descriptors, poses })
}

/// One retrieved reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub reference_id: String,
    pub distance: f64,
    pub pose: Pose,
}

/// Top-K references for one query, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatches {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl RankedMatches {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.neighbors.iter().map(|n| n.distance).collect()
    }

    pub fn best(&self) -> Option<&Neighbor> {
        self.neighbors.first()
    }

    /// The first `k` neighbors as a new list. Since ordering is total, this
    /// equals a fresh top-`k` query.
    pub fn truncated(&self, k: usize) -> RankedMatches {
        RankedMatches {
            query_id: self.query_id.clone(),
            neighbors: self.neighbors.iter().take(k).cloned().collect(),
        }
    }
}

/// Which estimator produced a score.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    L2,
    Pa,
    Sue,
    SueDc,
    External(String),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::L2 => f.write_str("l2"),
            Method::Pa => f.write_str("pa"),
            Method::Sue => f.write_str("sue"),
            Method::SueDc => f.write_str("sue_dc"),
            Method::External(name) => write!(f, "ext:{name}"),
        }
    }
}

/// A per-query uncertainty score; higher means less trustworthy.
///
/// For confidence channels (geometric verification inlier counts) the raw
/// count is kept in `gv_confidence` and `score` holds its negation.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRecord {
    pub query_id: String,
    pub method: Method,
    pub score: f64,
    pub gv_confidence: Option<f64>,
}

impl UncertaintyRecord {
    pub fn new(query_id: impl Into<String>, method: Method, score: f64) -> Self {
        Self {
            query_id: query_id.into(),
            method,
            score,
            gv_confidence: None,
        }
    }
}

/// Whether a query's best match lies within `threshold` meters of the query.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLabel {
    pub query_id: String,
    pub correct: bool,
    pub query_pose: Pose,
    pub matched_pose: Pose,
    pub threshold: f64,
}

impl GroundTruthLabel {
    pub fn new(query_id: impl Into<String>, query_pose: Pose, matched_pose: Pose, threshold: f64) -> Self {
        let correct = query_pose.distance(&matched_pose) <= threshold;
        Self {
            query_id: query_id.into(),
            correct,
            query_pose,
            matched_pose,
            threshold,
        }
    }
}
