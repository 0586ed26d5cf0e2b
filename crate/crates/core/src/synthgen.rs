//! Seeded synthetic worlds with controlled perceptual aliasing, and
//! brute-force oracles used to check the estimators.
//!
//! Every place belongs to exactly one aliasing group. A group owns a
//! descriptor prototype on the unit sphere; references and queries at any
//! place of the group draw descriptors around that prototype, so places in the
//! same group are indistinguishable in feature space up to noise. Poses are
//! sampled uniformly in a disc (or ball) around each place centre.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalError, PrCurve, PrPoint};
use crate::io::{self, IoError};
use crate::model::{validate_map, Descriptor, DescriptorSet, ModelError, Pose, PoseSet, VprMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid aliasing partition at place {place}: {reason}")]
    InvalidPartition { place: usize, reason: String },
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("weights sum to zero")]
    ZeroWeightSum,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySpatialMode {
    /// Queries pick a place with probability proportional to its reference count.
    #[default]
    MatchReferenceDensity,
    /// Every place is equally likely.
    Uniform,
}

fn default_extent() -> f64 {
    2000.0
}
fn default_separation() -> f64 {
    150.0
}
fn default_angle() -> f64 {
    60.0
}
fn default_pose_dim() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_places: usize,
    /// One entry per place, or a single entry applied to all places.
    pub refs_per_place: Vec<usize>,
    /// Partition of `0..n_places`; places in one group share a prototype.
    pub aliasing_groups: Vec<Vec<usize>>,
    pub descriptor_dim: usize,
    pub descriptor_noise_sigma: f64,
    /// Disc radius per place in meters; one entry or one per place.
    pub pose_spread_m: Vec<f64>,
    pub query_count: usize,
    #[serde(default)]
    pub query_spatial_mode: QuerySpatialMode,
    /// Side of the square in which place centres are drawn.
    #[serde(default = "default_extent")]
    pub world_extent_m: f64,
    #[serde(default = "default_separation")]
    pub min_place_separation_m: f64,
    #[serde(default = "default_angle")]
    pub min_prototype_angle_deg: f64,
    /// Standard deviation of a fixed per-place descriptor offset added on top
    /// of the group prototype. Zero makes aliased places identical.
    #[serde(default)]
    pub place_offset_sigma: f64,
    #[serde(default = "default_pose_dim")]
    pub pose_dim: usize,
}

impl WorldConfig {
    /// `n_places` places, each in its own group unless `groups` is given.
    pub fn simple(seed: u64, n_places: usize, refs: usize, queries: usize) -> Self {
        Self {
            seed,
            n_places,
            refs_per_place: vec![refs],
            aliasing_groups: (0..n_places).map(|p| vec![p]).collect(),
            descriptor_dim: 32,
            descriptor_noise_sigma: 0.01,
            pose_spread_m: vec![10.0],
            query_count: queries,
            query_spatial_mode: QuerySpatialMode::MatchReferenceDensity,
            world_extent_m: default_extent(),
            min_place_separation_m: default_separation(),
            min_prototype_angle_deg: default_angle(),
            place_offset_sigma: 0.0,
            pose_dim: 2,
        }
    }

    fn per_place<T: Copy>(values: &[T], n: usize, what: &str) -> Result<Vec<T>, SynthError> {
        match values.len() {
            1 => Ok(vec![values[0]; n]),
            len if len == n => Ok(values.to_vec()),
            len => Err(SynthError::InvalidConfig(format!(
                "{what} has {len} entries for {n} places"
            ))),
        }
    }

    /// Checks the config and returns the group index of every place.
    pub fn validate(&self) -> Result<Vec<usize>, SynthError> {
        if self.n_places == 0 {
            return Err(SynthError::InvalidConfig("n_places must be positive".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(SynthError::InvalidConfig("descriptor_dim must be positive".into()));
        }
        if self.query_count == 0 {
            return Err(SynthError::InvalidConfig("query_count must be positive".into()));
        }
        if !(2..=3).contains(&self.pose_dim) {
            return Err(SynthError::InvalidConfig("pose_dim must be 2 or 3".into()));
        }
        if !(self.descriptor_noise_sigma >= 0.0 && self.place_offset_sigma >= 0.0) {
            return Err(SynthError::InvalidConfig("noise levels must be nonnegative".into()));
        }
        let refs = Self::per_place(&self.refs_per_place, self.n_places, "refs_per_place")?;
        if let Some(p) = refs.iter().position(|&r| r == 0) {
            return Err(SynthError::InvalidConfig(format!("place {p} has no references")));
        }
        let spread = Self::per_place(&self.pose_spread_m, self.n_places, "pose_spread_m")?;
        if let Some(p) = spread.iter().position(|&s| s.is_nan() || s <= 0.0) {
            return Err(SynthError::InvalidConfig(format!(
                "place {p} has nonpositive pose spread"
            )));
        }

        let mut group_of = vec![usize::MAX; self.n_places];
        for (g, members) in self.aliasing_groups.iter().enumerate() {
            for &place in members {
                if place >= self.n_places {
                    return Err(SynthError::InvalidPartition {
                        place,
                        reason: format!("out of range (n_places = {})", self.n_places),
                    });
                }
                if group_of[place] != usize::MAX {
                    return Err(SynthError::InvalidPartition {
                        place,
                        reason: format!("listed in groups {} and {g}", group_of[place]),
                    });
                }
                group_of[place] = g;
            }
        }
        if let Some(place) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(SynthError::InvalidPartition {
                place,
                reason: "not assigned to any group".into(),
            });
        }
        Ok(group_of)
    }
}

/// A generated world together with the place each sample came from.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub map: VprMap,
    pub queries: DescriptorSet,
    pub query_poses: PoseSet,
    pub reference_places: Vec<usize>,
    pub query_places: Vec<usize>,
    pub place_centers: Vec<Vec<f64>>,
}

fn sample_in_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    loop {
        let offset: Vec<f64> = center.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        if offset.iter().map(|o| o * o).sum::<f64>() <= 1.0 {
            return center.iter().zip(offset).map(|(c, o)| c + radius * o).collect();
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, normal: &Normal<f64>, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const MAX_TRIES: usize = 100_000;

pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, SynthError> {
    let group_of = config.validate()?;
    let n = config.n_places;
    let refs = WorldConfig::per_place(&config.refs_per_place, n, "refs_per_place")?;
    let spread = WorldConfig::per_place(&config.pose_spread_m, n, "pose_spread_m")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    // Place centres on the ground plane, separated by a minimum distance.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    for p in 0..n {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let mut c = vec![0.0; config.pose_dim];
            c[0] = rng.random_range(0.0..config.world_extent_m);
            c[1] = rng.random_range(0.0..config.world_extent_m);
            if centers
                .iter()
                .all(|o| crate::model::euclidean(o, &c) >= config.min_place_separation_m)
            {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::InvalidConfig(format!(
                "cannot place centre {p} with separation {} in extent {}",
                config.min_place_separation_m, config.world_extent_m
            )));
        }
    }

    // Group prototypes with a minimum pairwise angle.
    let min_cos = config.min_prototype_angle_deg.to_radians().cos();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.aliasing_groups.len());
    for g in 0..config.aliasing_groups.len() {
        let mut found = false;
        for _ in 0..MAX_TRIES {
            let v = random_unit(&mut rng, &std_normal, config.descriptor_dim);
            let ok = prototypes
                .iter()
                .all(|o| o.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= min_cos);
            if ok {
                prototypes.push(v);
                found = true;
                break;
            }
        }
        if !found {
            return Err(SynthError::InvalidConfig(format!(
                "cannot draw prototype {g} at {} degrees in dimension {}",
                config.min_prototype_angle_deg, config.descriptor_dim
            )));
        }
    }

    let offsets: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..config.descriptor_dim)
                .map(|_| config.place_offset_sigma * std_normal.sample(&mut rng))
                .collect()
        })
        .collect();

    let sigma = config.descriptor_noise_sigma;
    let describe = |rng: &mut ChaCha8Rng, place: usize| -> Vec<f64> {
        prototypes[group_of[place]]
            .iter()
            .zip(&offsets[place])
            .map(|(c, o)| (c + o + sigma * std_normal.sample(rng)) as f32 as f64)
            .collect()
    };

    let mut ref_desc = Vec::new();
    let mut ref_poses = Vec::new();
    let mut reference_places = Vec::new();
    for p in 0..n {
        for _ in 0..refs[p] {
            let id = format!("r{:06}", ref_desc.len());
            ref_poses.push(Pose::new(id.clone(), sample_in_ball(&mut rng, &centers[p], spread[p])));
            ref_desc.push(Descriptor::new(id, describe(&mut rng, p)));
            reference_places.push(p);
        }
    }

    let place_weights: Vec<f64> = match config.query_spatial_mode {
        QuerySpatialMode::MatchReferenceDensity => refs.iter().map(|&r| r as f64).collect(),
        QuerySpatialMode::Uniform => vec![1.0; n],
    };
    let chooser = WeightedIndex::new(&place_weights).expect("positive weights");
    let mut query_desc = Vec::with_capacity(config.query_count);
    let mut query_poses = Vec::with_capacity(config.query_count);
    let mut query_places = Vec::with_capacity(config.query_count);
    for q in 0..config.query_count {
        let p = chooser.sample(&mut rng);
        let id = format!("q{q:06}");
        query_poses.push(Pose::new(id.clone(), sample_in_ball(&mut rng, &centers[p], spread[p])));
        query_desc.push(Descriptor::new(id, describe(&mut rng, p)));
        query_places.push(p);
    }

    let map = validate_map(DescriptorSet::new(ref_desc)?, PoseSet::new(ref_poses)?)?;
    Ok(SyntheticWorld {
        map,
        queries: DescriptorSet::new(query_desc)?,
        query_poses: PoseSet::new(query_poses)?,
        reference_places,
        query_places,
        place_centers: centers,
    })
}

pub const REF_DESCRIPTORS_FILE: &str = "ref_descriptors.bin";
pub const REF_POSES_FILE: &str = "ref_poses.csv";
pub const QUERY_DESCRIPTORS_FILE: &str = "query_descriptors.bin";
pub const QUERY_POSES_FILE: &str = "query_poses.csv";

/// Writes the four dataset files into `dir` (created if missing).
pub fn write_world(world: &SyntheticWorld, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(IoError::from)?;
    io::save_descriptors(dir.join(REF_DESCRIPTORS_FILE), world.map.descriptors())?;
    io::save_poses(dir.join(REF_POSES_FILE), world.map.poses())?;
    io::save_descriptors(dir.join(QUERY_DESCRIPTORS_FILE), &world.queries)?;
    io::save_poses(dir.join(QUERY_POSES_FILE), &world.query_poses)?;
    Ok(())
}

/// Parameters for a simulated verification confidence (e.g. inlier counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceChannel {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Draws a nonnegative confidence per query whose mean depends on correctness.
pub fn inject_confidence_channel(correct: &[bool], channel: &ConfidenceChannel) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(channel.seed);
    let normal = Normal::new(0.0, channel.sigma.max(0.0)).expect("valid normal");
    correct
        .iter()
        .map(|&c| {
            let mean = if c {
                channel.mean_correct
            } else {
                channel.mean_incorrect
            };
            (mean + normal.sample(&mut rng)).max(0.0).round()
        })
        .collect()
}

/// Error-free transformation accumulator (double-double).
#[derive(Debug, Clone, Copy, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
    }

    /// Adds `a * b` including the rounding error of the product.
    fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        self.lo += e;
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Weighted mean and population covariance by direct double loops with
/// compensated accumulation.
pub fn oracle_weighted_moments(points: &[Vec<f64>], weights: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>), SynthError> {
    let mut total = Dd::default();
    for &w in weights {
        total.add(w);
    }
    let total = total.value();
    if total.is_nan() || total <= 0.0 {
        return Err(SynthError::ZeroWeightSum);
    }
    let dim = points.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for (j, m) in mean.iter_mut().enumerate() {
        let mut acc = Dd::default();
        for (p, &w) in points.iter().zip(weights) {
            acc.add_product(w, p[j]);
        }
        *m = acc.value() / total;
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for a in 0..dim {
        for b in 0..dim {
            let mut acc = Dd::default();
            for (p, &w) in points.iter().zip(weights) {
                let da = p[a] - mean[a];
                let db = p[b] - mean[b];
                let mut prod = Dd::default();
                prod.add_product(da, db);
                acc.add_product(w, prod.hi);
                acc.add_product(w, prod.lo);
            }
            cov[a][b] = acc.value() / total;
        }
    }
    Ok((mean, cov))
}

/// Recomputes precision and recall from scratch at every distinct score.
pub fn oracle_pr(scores: &[f64], labels: &[bool]) -> Result<PrCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = Vec::new();
    let mut ap = 0.0;
    for &t in &thresholds {
        let accepted = scores.iter().filter(|&&s| s <= t).count();
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s <= t && l).count();
        let at_t = scores.iter().zip(labels).filter(|(&s, &l)| s == t && l).count();
        let precision = tp as f64 / accepted as f64;
        ap += at_t as f64 * precision;
        points.push(PrPoint {
            threshold: t,
            precision,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(PrCurve {
        points,
        auc: ap / positives as f64,
    })
}
