//! Parameter insights: one-at-a-time sensitivity per routine (the influence
//! matrix the planner consumes), Pearson correlation and random-forest
//! feature importance.

mod forest;
mod sensitivity;
mod stats;

use thiserror::Error;

pub use forest::{ForestParams, RegressionForest};
pub use sensitivity::{
    assemble_influence, design_sensitivity, run_sensitivity, InfluenceMatrix, SensitivityDesign,
    SensitivitySettings, VariationStrategy,
};
pub use stats::{
    feature_importance, insights, pearson_matrix, ImportanceReport, InsightReport, PearsonReport,
};

use crate::space::SpaceError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("baseline evaluation failed ({0})")]
    BaselineFailed(String),
    #[error("baseline metric of routine `{0}` is exactly 0; relative variability is undefined")]
    ZeroBaseline(String),
    #[error("insufficient data: {needed} ok records required, {got} available")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid sensitivity settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
}
