//! TEAM: testing on an aggregation tree.
//!
//! The pooled sample space of two cohorts is cut into ordinal leaf bins
//! ([`partition`]); each leaf's cohort-2 count is tested against a binomial
//! null, and surviving neighbours are paired into parent nodes whose counts
//! are tested against recursively conditioned nulls ([`nulldist`], [`team`]).
//! Rejections at any layer are mapped back onto the leaves.
//!
//! Marker-side types are generic over [`Marker`] (`f32`/`f64`) and the
//! testing side over [`Probability`] (`f32`/`f64`/[`BigRational`]). The
//! aliases below fix the common `f64` instantiations.

pub mod error;
pub mod ingest;
pub mod nulldist;
pub mod partition;
pub mod scalar;
pub mod sim;
pub mod team;

pub use error::{Error, Result};
pub use scalar::{Marker, Probability};

pub use num_rational::BigRational;

pub type MarkerMatrix = ingest::MarkerMatrix<f64>;
pub type MarkerMatrix32 = ingest::MarkerMatrix<f32>;
pub type LeafBinning = partition::LeafBinning<f64>;
pub type Geometry = partition::Geometry<f64>;
pub type DiscreteDist = nulldist::DiscreteDist<f64>;
pub type ExactDist = nulldist::DiscreteDist<BigRational>;
pub type LayeredNull = nulldist::LayeredNull<f64>;
pub type TeamResult = team::TeamResult<f64>;
pub type ExactTeamResult = team::TeamResult<BigRational>;
