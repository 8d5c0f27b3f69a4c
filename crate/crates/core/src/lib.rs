//! Hierarchical visual localization.
//!
//! The pipeline is coarse to fine: a query's global descriptor retrieves
//! prior frames from the database, the prior frames are clustered into places
//! through the covisibility graph of a sparse 3D map, and the query keypoints
//! are matched against the 3D points of each place in turn until a PnP
//! RANSAC estimate succeeds.
//!
//! Around that pipeline sit the map construction procedure ([`mapstore`]),
//! the local feature and localization metrics ([`evalbench`]), the multi-task
//! distillation loss ([`distill`]) and a synthetic scene generator ([`synth`])
//! used as an oracle for all of the above.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod distill;
pub mod evalbench;
pub mod features;
pub mod geometry;
pub mod localizer;
pub mod mapstore;
pub mod matching;
pub mod par;
pub mod pose;
pub mod retrieval;
mod simtile;
pub mod synth;
mod wire;

pub use features::{Keypoint, LocalFeatureSet};
pub use geometry::{Camera, Homography, Pose};
pub use localizer::{LocalizationResult, Localizer, LocalizerConfig};
pub use mapstore::{MapStats, SparseMap};
pub use pose::{PoseEstimate, RansacConfig};
