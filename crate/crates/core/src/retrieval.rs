//! Exact K-nearest-neighbor retrieval in descriptor space.
//!
//! Search is brute force over every reference. Distances are the unsquared
//! Euclidean norm, accumulated in dimension order, and ties are broken by
//! ascending reference id so results do not depend on insertion order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::model::{Descriptor, DescriptorSet, ModelError, Neighbor, RankedMatches, VprMap};
use crate::par::{self, Execution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("query {query_id} has dimension {found}, map has {expected}")]
    DimensionMismatch {
        query_id: String,
        expected: usize,
        found: usize,
    },
    #[error("K={k} exceeds map size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("K must be at least 1")]
    ZeroK,
}

/// Immutable search structure over a map's reference descriptors.
#[derive(Debug, Clone)]
pub struct RetrievalIndex<'a> {
    map: &'a VprMap,
    norms: Vec<f64>,
    id_rank: Vec<u32>,
}

/// Squared L2 distance accumulated left to right.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn build_index(map: &VprMap) -> RetrievalIndex<'_> {
    let descriptors = map.descriptors();
    let norms = descriptors
        .iter()
        .map(|d| d.values.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..descriptors.len()).collect();
    order.sort_by(|&a, &b| descriptors.as_slice()[a].id.cmp(&descriptors.as_slice()[b].id));
    let mut id_rank = vec![0u32; order.len()];
    for (rank, &i) in order.iter().enumerate() {
        id_rank[i] = rank as u32;
    }
    RetrievalIndex { map, norms, id_rank }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    distance: f64,
    rank: u32,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.rank.cmp(&other.rank))
    }
}

impl<'a> RetrievalIndex<'a> {
    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn map(&self) -> &'a VprMap {
        self.map
    }

    /// Euclidean norm of each reference descriptor, in map order.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn query_knn(&self, query: &Descriptor, k: usize) -> Result<RankedMatches, RetrievalError> {
        let dim = self.map.descriptors().dim();
        if query.dim() != dim {
            return Err(RetrievalError::DimensionMismatch {
                query_id: query.id.clone(),
                expected: dim,
                found: query.dim(),
            });
        }
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if k > self.len() {
            return Err(RetrievalError::KTooLarge { k, n: self.len() });
        }

        let refs = self.map.descriptors().as_slice();
        let query_norm = query.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Max-heap holding the best k so far; the top is the current worst.
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        for (i, r) in refs.iter().enumerate() {
            if heap.len() == k {
                let worst = heap.peek().expect("heap is full").distance;
                // Reverse triangle inequality; the margin absorbs rounding in
                // both the bound and the directly summed distance.
                let bound = (query_norm - self.norms[i]).abs();
                if bound > worst * (1.0 + 1e-9) + f64::MIN_POSITIVE {
                    continue;
                }
            }
            let cand = Candidate {
                distance: squared_distance(&query.values, &r.values).sqrt(),
                rank: self.id_rank[i],
                index: i,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap is full") {
                heap.pop();
                heap.push(cand);
            }
        }

        let neighbors = heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                reference_id: refs[c.index].id.clone(),
                distance: c.distance,
                pose: self.map.pose_at(c.index).clone(),
            })
            .collect();
        Ok(RankedMatches {
            query_id: query.id.clone(),
            neighbors,
        })
    }

    pub fn batch_retrieve(&self, queries: &DescriptorSet, k: usize) -> Result<Vec<RankedMatches>, RetrievalError> {
        self.batch_retrieve_with(queries, k, Execution::default())
    }

    /// Retrieval for every query, in input order, under the given execution mode.
    pub fn batch_retrieve_with(
        &self,
        queries: &DescriptorSet,
        k: usize,
        exec: Execution,
    ) -> Result<Vec<RankedMatches>, RetrievalError> {
        par::try_map(queries.as_slice(), exec, |q| self.query_knn(q, k))
    }
}

/// Scales every descriptor to unit length. Zero vectors are left unchanged.
pub fn l2_normalize(set: &DescriptorSet) -> Result<DescriptorSet, ModelError> {
    set.map_values(|v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            v.to_vec()
        }
    })
}
