//! Local similarity-weighted aggregation for 4D matching cost volumes.
//!
//! Two operators are provided, each with a fast feature-side implementation
//! and a brute-force oracle on materialized volumes:
//!
//! * [`lsa`]: aggregates frame-2 features over a local window weighted by
//!   context similarity, which equals aggregating inside every cost map.
//! * [`slsa`]: aggregates whole neighboring cost maps, shifted so that
//!   matching positions line up.
//!
//! Kernels use rayon when the `parallel` feature (default) is enabled and run
//! sequentially otherwise. Results are bitwise identical either way.

pub mod attention;
pub mod bench;
pub mod cost_volume;
pub mod error;
pub mod flow;
pub mod harness;
pub mod io;
pub mod lsa;
pub mod parallel;
pub mod slsa;
pub mod tensor;

pub use attention::{similarity_weights, softmax_stable, AttentionWeights, LocalRegion, ProjectionParams};
pub use cost_volume::{build_cost_volume, build_pyramid, lookup, CostPyramid, CostVolume4D, FeatureMap};
pub use error::{Error, Result};
pub use flow::FlowField;
pub use lsa::{lsa_aggregate_costvol_oracle, lsa_aggregate_features, lsa_backward, lsa_param_count, LsaConfig};
pub use slsa::{slsa_aggregate, slsa_costvol_oracle, slsa_no_shift, slsa_param_count, ShiftMode, SlsaConfig};
pub use tensor::{dot, DenseTensor, Fill, Precision, Real, Rng, Shape};
