//! Nonstationary spatial prediction of ordinal ratings with a land-use
//! filtered latent Gaussian process.
//!
//! A `Q`-variate latent process built by a linear model of coregionalization
//! is filtered by a land-use partition: each location sees only the component
//! of its own category. Ratings are ordinal probit observations of that
//! filtered process. The crate provides
//!
//! * [`partition`]: land-use categories from parcel centroids,
//! * [`covariance`]: filtered, constrained and stationary covariances,
//! * [`ordinal`]: cut points, latent updates and per-rating likelihoods,
//! * [`mcmc`]: the data-augmented sampler for both model families,
//! * [`approx_map`]: the Gaussian approximation fitted by MAP,
//! * [`predict`]: kriging of the latent surface, WAIC and error metrics,
//! * [`simulation`]: the generative model and replication study,
//! * [`io`]: file formats (CSV inputs, draws, configs).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod approx_map;
pub mod covariance;
pub mod dataset;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod normal;
pub mod ordinal;
pub mod params;
pub mod partition;
pub mod predict;
pub mod rng;
pub mod simulation;

pub use covariance::{CovParams, Decay, FilterCovParams, ModelKind, StationaryCovParams};
pub use dataset::{Rating, RatingsDataset, Site};
pub use error::{Error, Result};
pub use ordinal::CutPoints;
pub use params::Priors;
pub use partition::{LandUsePartition, Location, Parcel};
