//! Image-matching uncertainty for visual place recognition.
//!
//! Given reference descriptors with poses (the map) and query descriptors,
//! this crate retrieves exact nearest neighbours and scores how far each
//! query's best match can be trusted:
//!
//! * feature-distance baselines ([`uncertainty::score_l2`],
//!   [`uncertainty::score_pa`]),
//! * spatial spread of the retrieved poses ([`uncertainty::sue_score`]) and
//!   its density-compensated variant,
//! * fusion with an external verification confidence through a linear
//!   classifier ([`fusion`]),
//! * precision-recall evaluation against pose ground truth ([`evaluation`]).
//!
//! Batch work fans out over rayon when the `parallel` feature is enabled
//! (the default); see [`Execution`].

pub mod evaluation;
pub mod fusion;
pub mod io;
pub mod model;
mod par;
pub mod pipeline;
pub mod retrieval;
pub mod synthgen;
pub mod uncertainty;

pub use model::{
    validate_map, Descriptor, DescriptorSet, GroundTruthLabel, Method, ModelError, Neighbor, Pose, PoseSet,
    RankedMatches, UncertaintyRecord, VprMap,
};
pub use par::Execution;
pub use retrieval::{build_index, RetrievalIndex};
pub use uncertainty::{SueConfig, Weighting};
