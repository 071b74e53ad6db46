//! PPG-derived hemodynamic early-warning pipeline.
//!
//! The crate is organised along the processing chain:
//!
//! * [`ingest`] loads CSV waveform records, resamples and band-pass filters them.
//! * [`kinematics`] derives VPG/APG/jerk, segments beats and locates fiducials.
//! * [`biomarkers`] turns fiducials into the 17 hemodynamic indicators.
//! * [`labeling`] anchors feature streams to an onset and cuts labeled windows.
//! * [`selection`] screens features by effect size and prunes correlated ones.
//! * [`resnet1d`] is a self-contained 1D residual classifier with its trainer.
//! * [`evaluation`] computes the metric suite and subgroup reports.
//! * [`attribution`] computes exact Shapley attributions.
//! * [`noteanchor`] resolves stroke-onset times from clinical note text.
//! * [`synthppg`] generates synthetic cohorts with ground truth.

pub mod attribution;
pub mod biomarkers;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod kinematics;
pub mod labeling;
pub mod noteanchor;
pub mod resnet1d;
pub mod rng;
pub mod selection;
pub mod synthppg;

pub use error::{Error, Result};
