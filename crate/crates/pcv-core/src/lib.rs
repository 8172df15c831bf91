//! Valuation of private (unlisted) companies in a linear Gaussian state-space
//! framework.
//!
//! The model ties three observable panels together — log book-to-market-style
//! accounting ratios, macroeconomic series following a VAR, and deterministic
//! exogenous regressors — through an unobserved log price-to-book ratio that
//! follows a random walk with drift. On top of the estimated state the crate
//! prices zero-coupon bonds, European options on company value, and
//! equity-linked life insurance contracts, and derives locally risk-minimizing
//! hedging strategies, all in closed form. Every closed form is backed by a
//! Monte Carlo oracle in [`mc`] so the two routes can be cross-checked.
//!
//! Modules mirror the analysis pipeline:
//!
//! * [`model`] — parameters, panel data, dividend-recursion linearization.
//! * [`stacked`] — companion (stacked VAR) form, measure changes, propagators,
//!   and exact conditional moments of the latent state.
//! * [`kalman`] — filter, smoother, and forecasts in state-space form.
//! * [`em`] — maximum likelihood estimation via the EM algorithm.
//! * [`pricing`] — bond, option, and insurance premium closed forms.
//! * [`hedging`] — locally risk-minimizing hedge ratios.
//! * [`mc`] — simulation of the model under each measure, used as pricing and
//!   moment oracle.
//! * [`verify`] — the self-check suite wired into `pcv verify` and the
//!   acceptance tests.
//!
//! All numerical code is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` or `f64`); the aliases below fix the common `f64` instantiations.

pub mod em;
pub mod error;
pub mod hedging;
pub mod kalman;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod pricing;
pub mod scalar;
pub mod stacked;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` model parameters, the default working precision.
pub type ModelParameters = model::ModelParameters<f64>;
/// `f64` observed panel.
pub type PanelData = model::PanelData<f64>;
/// `f64` state belief (conditional mean and covariance of the stacked state).
pub type StateBelief = kalman::StateBelief<f64>;
/// `f64` filter output.
pub type FilterOutput = kalman::FilterOutput<f64>;
/// `f64` smoother output.
pub type SmootherOutput = kalman::SmootherOutput<f64>;
/// `f64` EM iteration trace.
pub type EmTrace = em::EmTrace<f64>;
/// `f64` pricing model.
pub type PricingModel = pricing::PricingModel<f64>;
/// `f64` life table.
pub type LifeTable = pricing::LifeTable<f64>;
/// `f64` hedgeable claim.
pub type ClaimSpec = hedging::ClaimSpec<f64>;
/// `f64` hedge trajectory.
pub type HedgeStrategy = hedging::HedgeStrategy<f64>;
/// Simulation request (measure, path count, seed, window).
pub use mc::SimConfig;
/// `f64` simulated path set.
pub type PathSet = mc::PathSet<f64>;
