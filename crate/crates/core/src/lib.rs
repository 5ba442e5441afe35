//! Uncertainty quantification for neural-network regression under
//! cluster-based distribution shift.
//!
//! The crate covers the whole experimental loop: table ingestion and
//! synthetic data ([`dataset`]), PCA and exact t-SNE ([`embedding`]),
//! DBSCAN and cluster-held-out splits ([`clustering`]), a dropout MLP
//! regressor ([`mlp`]), three families of uncertainty estimates
//! ([`uq`]: MC-dropout, applicability-domain scores and RIO), and the
//! analysis suite ([`evaluation`]).

pub mod clustering;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod mlp;
pub mod rng;
pub mod stats;
pub mod uq;

pub use error::{Error, ErrorKind, Result};
