//! Frequency-domain model merging with routed sparse task experts.
//!
//! A merged backbone is built by high-pass filtering each task vector in the
//! Fourier domain and summing the results with magnitude-proportional
//! coefficients ([`merge::fr_merge`]). Task-specific capability lost in the
//! merge is restored at inference time by sparse, rescaled experts
//! ([`expert::extract_expert`]) that a router selects per input and
//! scatter-adds into the backbone ([`expert::compose`]).
//!
//! The [`lab`] module trains tiny networks on synthetic tasks so the whole
//! pipeline can be exercised end to end on a laptop.

// `!(x > 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod expert;
pub mod lab;
pub mod merge;
pub mod numeric;
pub mod router;
pub mod select;
pub mod spectral;
pub mod store;

pub use error::{Error, Result};
pub use expert::{
    compose, extract_expert, rescale_factor, topd_select, ExpertBundle, SparseExpert,
};
pub use merge::{fr_merge, merging_coefficients, MergeReport, MergeWeights};
pub use router::{RouterMode, RouterModel, RoutingDecision};
pub use spectral::{filter_tensor, FilterMode, FilterSpec};
pub use store::{Checkpoint, TaskVector, Tensor};
