//! Desk-scale micro-ultrasound prostate cancer screening pipeline.
//!
//! The library is organized around the stages of the screening study:
//!
//! - [`synthesis`]: deterministic phantom cohorts with planted lesion runs
//!   and clinical records sampled from published cohort statistics.
//! - [`dataset`]: cohort manifests, slice labels, validation, prostate
//!   volume from segmentation stacks.
//! - [`autoencoder`]: self-supervised convolutional autoencoder used as a
//!   frozen 256-dim feature extractor after training.
//! - [`forest`]: class-balanced random forest with stratified bootstrap
//!   and out-of-bag scoring.
//! - [`screening`]: slice-level probabilities aggregated into patient
//!   decisions via a consecutive-slice run rule, plus the clinical
//!   biomarker baseline.
//! - [`evaluation`]: patient-level five-fold cross-validation, AUROC and
//!   threshold metrics, ROC export.

// Link a BLAS implementation for ndarray's gemm paths.
extern crate blas_src;

pub mod autoencoder;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod rng;
pub mod screening;
pub mod synthesis;

pub use error::CoreError;
