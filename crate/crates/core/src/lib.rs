//! Fine-to-coarse global registration of RGB-D scan sequences.
//!
//! Camera poses are refined by alternating constraint detection inside windows
//! of sequential frames that double in length every iteration with a sparse
//! nonlinear least-squares solve over all poses and planar proxies.

pub mod bench;
pub mod constraints;
pub mod features;
pub mod geom;
pub mod ingest;
pub mod pairwise;
pub mod pipeline;
pub mod solver;
