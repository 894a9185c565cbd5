//! Segmentation quality control without ground truth.
//!
//! Reverse classification accuracy (RCA) turns a predicted mask into a set of
//! agreement scores against annotated references; split conformal
//! calibration turns that score set into an interval with a marginal
//! coverage guarantee.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the CLI uses.

// `!(x >= lo)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rca;
pub mod report;
pub mod retrieval;
pub mod scalar;
pub mod segmenter;
pub mod synthval;

pub use error::{Error, Result};
pub use metrics::EvaluationMetric;
pub use raster::LabelMask;
pub use rca::PointEstimate;
pub use scalar::Scalar;

pub type GrayImage = raster::GrayImage<f64>;
pub type GrayImageF32 = raster::GrayImage<f32>;
pub type ScoreSet = rca::ScoreSet<f64>;
pub type ScoreSetF32 = rca::ScoreSet<f32>;
pub type ReferenceRecord = rca::ReferenceRecord<f64>;
pub type ReferenceDatabase = rca::ReferenceDatabase<f64>;
pub type AffineTransform2D = segmenter::AffineTransform2D<f64>;
pub type QuantilePair = conformal::QuantilePair<f64>;
pub type CalibrationRecord = conformal::CalibrationRecord<f64>;
pub type ConformalCalibration = conformal::ConformalCalibration<f64>;
pub type ConformalCalibrationF32 = conformal::ConformalCalibration<f32>;
pub type PredictionInterval = conformal::PredictionInterval<f64>;
pub type PredictionIntervalF32 = conformal::PredictionInterval<f32>;
pub type EvaluationReport = report::EvaluationReport<f64>;
pub type Case = dataset::Case<f64>;
