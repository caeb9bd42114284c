//! Planning and execution of multi-routine autotuning campaigns.
//!
//! The pipeline: measure how each routine reacts to one-at-a-time parameter
//! variations ([`analysis`]), turn the resulting influence matrix into a set
//! of staged, lower-dimensional searches ([`planner`]), and run those searches
//! with Gaussian-process Bayesian optimization ([`surrogate`], [`search`])
//! under a resumable evaluation log ([`orchestrator`]).

pub mod analysis;
pub mod objective;
pub mod orchestrator;
pub mod planner;
pub mod rng;
pub mod search;
pub mod space;
pub mod surrogate;

pub use objective::{
    EvalContext, EvaluationRecord, Evaluator, Objective, Status, SyntheticCase, PENALTY,
};
pub use space::{
    Configuration, ConstraintExpr, ParamKind, ParameterSpec, RoutineDecl, SearchSpace, SpaceError,
    Value,
};
