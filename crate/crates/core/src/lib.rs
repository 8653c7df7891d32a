//! Aw–Rascle–Zhang traffic model on a highway segment: finite-volume
//! simulation, a boundary observer that reconstructs density and speed from
//! inlet/outlet measurements, trajectory aggregation and fundamental-diagram
//! calibration.
//!
//! Everything numerical is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

// `!(x > 0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod fd;
pub mod ingest;
pub mod linearize;
pub mod metrics;
pub mod observer;
pub mod optim;
pub mod relaxation;
pub mod scalar;
pub mod solver;
pub mod units;

pub use error::{Error, Result};
pub use fd::{FundamentalDiagram, GreenshieldParams, ThreeParamFd};
pub use ingest::{AggregatedGrid, TrajectoryDataset};
pub use linearize::{GainProfile, GainVariant, ObserverDesign, ReferenceState, Regime};
pub use metrics::ErrorSeries;
pub use observer::{BoundaryMeasurements, Observer, ObserverConfig};
pub use scalar::Real;
pub use solver::{BoundarySpec, Grid, StateField, Trajectory};
pub use units::Units;

pub type Diagram = FundamentalDiagram<f64>;
pub type Diagram32 = FundamentalDiagram<f32>;
pub type Reference = ReferenceState<f64>;
pub type Design = ObserverDesign<f64>;
