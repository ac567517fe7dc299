//! Desk-scale simulator and library for personalized federated sequential
//! recommendation: a bidirectional selective-state-space sequence model
//! trained on simulated edge devices, personalized per round by
//! Fisher-guided parameter masking and a dynamic magnitude regularizer,
//! aggregated by weighted averaging, and evaluated with leave-one-out
//! HR@k / NDCG@k.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod vrm;

pub use error::{Error, Result};
