//! Multivariate two-level linear mixed models for assessment-style data.
//!
//! The library fits models of the form
//!
//! ```text
//! Y_mij = alpha_m + beta_m' x_mij + gamma_m' w_mj + u_mj + e_mij
//! ```
//!
//! for outcome `m` of student `i` in class `j`, where the class effects
//! `u_j = (u_1j, ..., u_Mj)` are multivariate normal with covariance `T` and
//! the student effects `e_ij` are multivariate normal with covariance `Sigma`.
//! Estimation is by maximum likelihood on the profiled covariance parameters,
//! exploiting the exchangeable block structure of the class-level marginal
//! covariance, so no dense per-class covariance matrix is ever assembled.
//!
//! On top of the fitting core the crate provides:
//!
//! - ingestion of hierarchical CSV data with covariate transforms
//!   ([`data`], [`model`]);
//! - cluster-robust (sandwich) coefficient covariances and variance
//!   decompositions ([`fit`]);
//! - weighted univariate pseudo-likelihood fits for survey weights
//!   ([`weights`]);
//! - multiple-imputation combining across plausible values, including the
//!   pooled multivariate equality test ([`mi`]);
//! - Empirical Bayes prediction of class effects with comparative and
//!   diagnostic standard errors, classification and plot data ([`eb`]);
//! - a synthetic population simulator with stratified two-stage PPS sampling
//!   and weight computation ([`sim`]);
//! - dense reference implementations used to validate the closed forms
//!   ([`dense`]).
//!
//! All numeric kernels are generic over the scalar type through the [`Real`]
//! trait (`f64` for production use, `f32` supported); concrete `f64` aliases
//! for the main types live at the crate root.

pub mod covariance;
pub mod data;
pub mod dense;
pub mod design;
pub mod dist;
pub mod eb;
pub mod error;
pub mod fit;
pub mod likelihood;
pub mod mi;
pub mod model;
pub mod optim;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod weights;

#[cfg(test)]
pub(crate) mod testutil;


pub use error::{Error, Result};
pub use scalar::{real, Real};

/// Concrete `f64` aliases for the main library types.
pub type Dataset64 = data::Dataset<f64>;
pub type StackedDesign64 = design::StackedDesign<f64>;
pub type CovarianceParams64 = covariance::CovarianceParams<f64>;
pub type FitResult64 = fit::FitResult<f64>;
pub type MiFitResult64 = mi::MiFitResult<f64>;
pub type EbResiduals64 = eb::EbResiduals<f64>;
pub type WeightSet64 = weights::WeightSet<f64>;
pub type FramePopulation64 = sim::FramePopulation<f64>;
