//! The five 20-dimensional synthetic benchmark functions.
//!
//! The objective is a sum of four group values, each `log(|inner| + δ)`:
//!
//! ```text
//! G1 = Σ_{i=0..3} (x_i − x_{i+1})² + Σ_{i=0..4} A_i
//! G2 = Σ_{k=5..8} (x_k − x_{k+1})⁴ + Σ_{k=5..9} A_k
//! G3 = case-specific, see below
//! G4 = Σ_{v=15..19} 1/x_v + ε
//! A_i = 10·cos(2π·(x_i − 1)) + ε
//! ```
//!
//! Group 3 per case (u = 10..14, v = 15..19, zipped pairs for cases 4-5):
//!
//! | case | inner value                         |
//! |------|-------------------------------------|
//! | 1    | Σ x_u + Σ cos(2π·x_v) + ε           |
//! | 2    | Σ x_u² + Σ x_v + ε                  |
//! | 3    | Σ x_u² + Σ x_v² + ε                 |
//! | 4    | Σ (x_u·x_v⁴)² + ε                   |
//! | 5    | Σ (x_u·x_v⁸)² + ε                   |
//!
//! Every ε is an independent Gaussian draw.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EvalContext, EvaluationRecord, Evaluator, Status};
use crate::rng::{derive_seed, hash_str, rng_from};
use crate::space::{Configuration, ParamKind, ParameterSpec, RoutineDecl, SearchSpace, Value};

pub const SYNTHETIC_LOG_FLOOR: f64 = 1e-12;
const SINGULARITY_GUARD: f64 = 1e-6;
pub const SYNTHETIC_DIM: usize = 20;
pub const SYNTHETIC_BOUND: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCase {
    pub case_id: u8,
    #[serde(default = "default_noise")]
    pub noise_stddev: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_noise() -> f64 {
    0.1
}

/// The group that owns each of the 20 variables.
pub fn synthetic_owner(i: usize) -> &'static str {
    ["G1", "G2", "G3", "G4"][i / 5]
}

/// `x_0..x_19` on [−50, 50], defaults 1.0, owned five per group. Each
/// variable has a single value everywhere, so all are sharing-constrained.
pub fn synthetic_space() -> SearchSpace {
    let routines = ["G1", "G2", "G3", "G4"]
        .iter()
        .map(|r| RoutineDecl::new(r))
        .collect();
    let parameters = (0..SYNTHETIC_DIM)
        .map(|i| ParameterSpec {
            name: format!("x_{i}"),
            kind: ParamKind::Real {
                lo: -SYNTHETIC_BOUND,
                hi: SYNTHETIC_BOUND,
            },
            default: Value::Num(1.0),
            owner: synthetic_owner(i).to_string(),
            shared_value_required: true,
            used_by: vec![],
        })
        .collect();
    SearchSpace::new(routines, parameters, vec![]).expect("synthetic space is well formed")
}

fn logabs(v: f64) -> f64 {
    (v.abs() + SYNTHETIC_LOG_FLOOR).ln()
}

impl SyntheticCase {
    pub fn new(case_id: u8, noise_stddev: f64, rng_seed: u64) -> Self {
        assert!((1..=5).contains(&case_id), "synthetic case must be 1..=5");
        Self {
            case_id,
            noise_stddev,
            rng_seed,
        }
    }

    /// Evaluates with the noise stream for evaluation number `counter`.
    pub fn evaluate_at(&self, config: &Configuration, counter: u64) -> EvaluationRecord {
        let mut x = [0.0f64; SYNTHETIC_DIM];
        for (i, slot) in x.iter_mut().enumerate() {
            match config.num(&format!("x_{i}")) {
                Some(v) if v.is_finite() && v.abs() <= SYNTHETIC_BOUND => *slot = v,
                _ => {
                    return EvaluationRecord::failed(
                        config.clone(),
                        Status::Invalid,
                        format!("x_{i} missing or outside [-50, 50]"),
                    )
                }
            }
        }
        if let Some(v) = (15..20).find(|&v| x[v].abs() < SINGULARITY_GUARD) {
            return EvaluationRecord::failed(
                config.clone(),
                Status::Invalid,
                format!("x_{v} too close to 0 (1/x singularity)"),
            );
        }

        let mut rng = rng_from(self.rng_seed, &[counter]);
        let normal = Normal::new(0.0, self.noise_stddev.max(0.0)).expect("finite stddev");
        let mut eps = || {
            if self.noise_stddev > 0.0 {
                normal.sample(&mut rng)
            } else {
                0.0
            }
        };
        let mut a = |i: usize| 10.0 * (2.0 * PI * (x[i] - 1.0)).cos() + eps();

        let g1_inner: f64 = (0..4).map(|i| (x[i] - x[i + 1]).powi(2)).sum::<f64>()
            + (0..5).map(&mut a).sum::<f64>();
        let g2_inner: f64 = (5..9).map(|k| (x[k] - x[k + 1]).powi(4)).sum::<f64>()
            + (5..10).map(&mut a).sum::<f64>();
        let g3_body: f64 = match self.case_id {
            1 => {
                (10..15).map(|u| x[u]).sum::<f64>()
                    + (15..20).map(|v| (2.0 * PI * x[v]).cos()).sum::<f64>()
            }
            2 => (10..15).map(|u| x[u] * x[u]).sum::<f64>() + (15..20).map(|v| x[v]).sum::<f64>(),
            3 => (10..20).map(|i| x[i] * x[i]).sum::<f64>(),
            4 => (0..5)
                .map(|j| (x[10 + j] * x[15 + j].powi(4)).powi(2))
                .sum::<f64>(),
            5 => (0..5)
                .map(|j| (x[10 + j] * x[15 + j].powi(8)).powi(2))
                .sum::<f64>(),
            _ => unreachable!("case id checked at construction"),
        };
        let g3_inner = g3_body + eps();
        let g4_inner = (15..20).map(|v| 1.0 / x[v]).sum::<f64>() + eps();

        let groups = [
            ("G1", logabs(g1_inner)),
            ("G2", logabs(g2_inner)),
            ("G3", logabs(g3_inner)),
            ("G4", logabs(g4_inner)),
        ];
        let total = groups.iter().map(|(_, v)| v).sum();
        let metrics: BTreeMap<String, f64> =
            groups.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        EvaluationRecord::ok(config.clone(), metrics, total)
    }
}

impl Evaluator for SyntheticCase {
    fn evaluate(&self, ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord {
        let start = Instant::now();
        let counter = derive_seed(hash_str(ctx.search_id), &[ctx.index]);
        let mut rec = self.evaluate_at(config, counter);
        rec.search_id = ctx.search_id.to_string();
        rec.wall_seconds = start.elapsed().as_secs_f64();
        rec
    }
}
