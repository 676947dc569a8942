//! Regeneration-time estimators for the large deviations of a nearest-neighbour
//! random walk in a random environment.
//!
//! The pipeline runs environment model -> annealed simulation -> regeneration
//! increments -> empirical joint cumulant generating function -> Legendre
//! transforms -> rate functions and region maps, with verification against
//! exact enumeration and Monte Carlo.

pub mod cgf;
pub mod convex;
pub mod dataset;
pub mod env;
pub mod error;
mod exact_hull;
pub mod ratefn;
pub mod rng;
pub mod stats;
pub mod verify;
pub mod walk;

pub use cgf::{CgfEstimate, EmpiricalCgf, MarginalCgf, TiltPoint};
pub use convex::{Evaluation, LegendreOptions, LegendreResult, SmoothConvexFn, Wall};
pub use dataset::{SampleHeader, SampleSet, TailFit, TailStats};
pub use env::{Direction, EnvironmentModel, ModelKind, NestlingClass, NestlingLabel};
pub use error::{Error, Result};
pub use ratefn::{GammaPoint, RateI, RatePoint, RegionConstants, RegionLabel, RegionMap, TiltLabel};
pub use walk::{RegenRecord, RegenSample, Trajectory};
