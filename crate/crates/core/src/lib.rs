//! Shape abstraction of 3D point clouds with an automatically sized set of
//! tapered superquadrics.
//!
//! Points are modelled as draws from a Dirichlet-process mixture of Gaussian
//! superquadric taper models. Inference alternates Chinese-restaurant-process
//! reassignment of points, a least-squares superquadric fit per cluster and a
//! conjugate draw of each cluster's noise variance, followed by a greedy
//! merging pass.

pub mod error;
pub mod fitting;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod merging;
pub mod metrics;

pub use error::{GeometryError, InferenceError, IoError, MetricsError};

pub use geometry::{radial_distance, SuperquadricParams, TriangleMesh};

pub use fitting::{fit_superquadric, FitOptions, FitReport};
pub use inference::{abstract_points, run_abstraction, AbstractionResult, ClusterState, GstmComponent, SamplerConfig};
pub use merging::{merge_pass, try_merge, MergeDecision};
