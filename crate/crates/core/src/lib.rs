//! Unsupervised anomaly detection for seasonal KPIs.
//!
//! A sliding-window variational auto-encoder with diagonal Gaussian posterior
//! and likelihood is trained on a masked evidence lower bound, so labeled
//! anomalies and missing points do not contribute to the reconstruction term.
//! Points are scored by the negative reconstruction log-density of the last
//! point in their window, after MCMC imputation of known-missing points.
//!
//! Module map:
//!
//! * [`series`]: CSV ingest, standardization, sliding windows, missing-point
//!   injection, label down-sampling and chronological splits.
//! * [`net`]: network parameters, forward passes and hand-derived gradients.
//! * [`train`]: the masked ELBO objective and the training loop.
//! * [`detect`]: MCMC imputation and reconstruction / prior scores.
//! * [`metrics`]: segment-adjusted precision, recall, best F-score, AUC and
//!   alert delays.
//! * [`synth`]: labeled synthetic seasonal-KPI generator.
//! * [`diagnostics`]: latent export and the technique ablation.
//! * [`model_io`]: the text model file format.

pub mod config;
pub mod detect;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod net;
pub mod series;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
