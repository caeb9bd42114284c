//! Objective evaluation: bundled synthetic functions and an external-process
//! adapter. Both produce an [`EvaluationRecord`] with per-routine metrics and
//! a total.

mod external;
mod synthetic;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use external::{parse_metric_line, ExternalCommandSpec, ExternalObjective, METRIC_PATTERN};
pub use synthetic::{synthetic_space, SyntheticCase, SYNTHETIC_LOG_FLOOR};

use crate::space::{Configuration, SearchSpace};

/// Objective value recorded for timed-out, crashed or invalid evaluations.
pub const PENALTY: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Timeout,
    Crash,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub search_id: String,
    pub config: Configuration,
    pub routine_metrics: BTreeMap<String, f64>,
    pub total: f64,
    pub status: Status,
    pub wall_seconds: f64,
    pub timestamp: DateTime<Utc>,
    /// Diagnostic for failed evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvaluationRecord {
    pub fn ok(config: Configuration, routine_metrics: BTreeMap<String, f64>, total: f64) -> Self {
        Self {
            search_id: String::new(),
            config,
            routine_metrics,
            total,
            status: Status::Ok,
            wall_seconds: 0.0,
            timestamp: Utc::now(),
            note: None,
        }
    }

    pub fn failed(config: Configuration, status: Status, note: impl Into<String>) -> Self {
        debug_assert_ne!(status, Status::Ok);
        Self {
            search_id: String::new(),
            config,
            routine_metrics: BTreeMap::new(),
            total: PENALTY,
            status,
            wall_seconds: 0.0,
            timestamp: Utc::now(),
            note: Some(note.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn metric(&self, routine: &str) -> Option<f64> {
        self.routine_metrics.get(routine).copied()
    }
}

/// Identifies one evaluation inside a campaign. Noise streams and other
/// per-evaluation randomness are keyed on it so replays are exact.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub search_id: &'a str,
    pub index: u64,
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord;
}

/// Either objective kind behind one type, as bound by a campaign.
#[derive(Debug, Clone)]
pub enum Objective {
    Synthetic(SyntheticCase),
    External(ExternalObjective),
}

impl Objective {
    pub fn external(spec: ExternalCommandSpec, space: SearchSpace) -> Self {
        Objective::External(ExternalObjective::new(spec, space))
    }
}

impl Evaluator for Objective {
    fn evaluate(&self, ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord {
        match self {
            Objective::Synthetic(s) => s.evaluate(ctx, config),
            Objective::External(e) => e.evaluate(ctx, config),
        }
    }
}

impl<F> Evaluator for F
where
    F: Fn(&Configuration) -> EvaluationRecord + Send + Sync,
{
    fn evaluate(&self, _ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord {
        self(config)
    }
}
