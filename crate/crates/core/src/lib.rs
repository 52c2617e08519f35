//! Fast universal agglomerative pooling.
//!
//! Given a dense per-token feature map, [`run_uniap`] coarsens the token grid
//! layer by layer under a decreasing threshold schedule and emits
//! instance-level (4-connected) and semantic-level (possibly disconnected)
//! pseudo-masks at every layer. The [`querysd`] module holds the training-side
//! math that consumes those masks: Dice-based cropped bipartite matching and a
//! query-wise self-distillation loss with its analytic gradient.
//!
//! Work inside a call is spread over the current rayon pool; use
//! [`with_workers`] to cap it. Results never depend on the worker count.

pub mod bench;
pub mod ccl;
pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod maskops;
pub mod pooling;
pub mod querysd;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Assignment, Graph, TokenMask};
pub use maskops::{CropBox, RleMask};
pub use pooling::{run_uniap, MaskKind, MaskPyramid, PseudoMask, PyramidLevel, UniapConfig};
pub use querysd::{MatchResult, QueryRow, QuerySdConfig};
pub use tensor::FeatureMap;

/// Runs `f` on a dedicated pool of `workers` threads (at least one).
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("failed to build worker pool")
        .install(f)
}
