//! Longitudinal medication-adherence modelling.
//!
//! The crate turns drug-purchase logs into monthly categorical adherence
//! panels ([`adherence`]), fits multivariate latent Markov models with
//! covariate-dependent initial and transition probabilities by EM
//! ([`lmm`]), decodes per-patient latent trajectories into behavioural
//! profiles ([`decoding`]) and compares survival across profiles
//! ([`survival`]). [`cohort`] holds the data model, file ingestion and a
//! seeded synthetic-cohort generator; [`pipeline`] glues the stages
//! together.

// Index loops mirror the model notation; negated comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adherence;
pub mod cohort;
pub mod decoding;
mod error;
mod linalg;
pub mod lmm;
pub mod pipeline;
pub mod survival;

pub use error::{Error, ErrorKind, Result};

/// Number of monthly observation occasions in the adherence panel.
pub const MONTHS: usize = 12;
/// Days per observation month.
pub const DAYS_PER_MONTH: u32 = 30;
/// Length of the adherence panel window in days.
pub const PANEL_DAYS: u32 = MONTHS as u32 * DAYS_PER_MONTH;
/// Window in which a single purchase makes a patient a user of a drug.
pub const USER_WINDOW_DAYS: u32 = 365;
