//! Conditional neural SDE generators for time-series forecasting, trained by
//! minimizing the closed-form truncated signature-Wasserstein-1 loss, with
//! constant-memory backpropagation through an algebraically reversible SDE
//! solver.

pub mod cnsde;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod neural;
pub mod sde;
pub mod sigmetric;
pub mod signature;
pub mod tensoralg;
pub mod training;

pub use error::SigflowError;
