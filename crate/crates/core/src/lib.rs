//! Inverse probability of treatment weighting for marginal structural models
//! on balanced panel data, with unit fixed effects in the propensity score.
//!
//! A marginal structural model (MSM) targets the mean of the potential
//! outcomes under a treatment history, `E[Y(d)] = g(d; gamma)`, and is fit by
//! weighting each unit with the inverse probability of its realized treatment
//! path (Robins, Hernán & Brumback 2000). This crate estimates those
//! propensity scores from a binary panel model with a separate intercept per
//! unit, so that time-constant confounding — measured or not — is absorbed by
//! the unit effect. Benchmarks without unit effects and with known
//! propensities are included, along with a seeded Monte Carlo harness that
//! compares all three on simulated panels.
//!
//! The pieces, bottom to top:
//!
//! - [`panel`] — balanced panel data model, CSV ingestion, lagged design
//!   matrices.
//! - [`link`] — logit and probit response functions.
//! - [`ps`] — conditional maximum likelihood for the propensity model, with
//!   per-unit intercepts (concentrated Newton), a pooled variant, and the
//!   marginal numerator model used for weight stabilization.
//! - [`weights`] — treatment-history weights over the last `k+1` periods,
//!   stabilization, trimming strategies, and balance/ESS diagnostics.
//! - [`msm`] — weighted least squares for linear MSMs, sandwich and HC2
//!   covariance, the nonparametric final-period estimator, and the two-step
//!   pipeline.
//! - [`sim`] — data-generating processes and the replication study harness.
//! - [`report`] — tidy CSV/JSON result files, text tables, and SVG small
//!   multiples.
//! - [`cli`] — the `iptw-fe` command line front end.
//!
//! Start with the runnable examples (`cargo run --example fit_pipeline`) for
//! end-to-end usage.

pub mod cli;
pub mod link;
pub mod msm;
pub mod panel;
pub mod ps;
pub mod report;
pub mod sim;
pub mod weights;

pub use link::Link;
pub use msm::{MsmFit, MsmSpec};
pub use panel::{DesignMatrix, LagSpec, PanelDataset};
pub use ps::{PsFit, PsSpec};
pub use sim::{SimConfig, SimResult};
pub use weights::{Trimming, WeightSet, WeightSpec};
