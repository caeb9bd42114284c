use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::db::EvaluationDb;
use super::execute::{Ctx, Job, RunOptions, SENSITIVITY_ID};
use super::{plan_fingerprint, Campaign, OrchestratorError};
use crate::objective::PENALTY;
use crate::planner::{emit_plan, SearchDef, SearchPlan, Target};
use crate::rng::derive_seed;
use crate::space::{Configuration, SearchSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    FullyJoint,
    FullyIndependent,
    Planned,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::FullyJoint,
        Strategy::FullyIndependent,
        Strategy::Planned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::FullyJoint => "fully-joint",
            Strategy::FullyIndependent => "fully-independent",
            Strategy::Planned => "planned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    /// Total objective of the final configuration, one per repeat.
    pub minima: Vec<f64>,
    /// Sum over stages of the longest search in the stage.
    pub wall_seconds: Vec<f64>,
    /// Search evaluations, excluding the final re-evaluation.
    pub evaluations: Vec<usize>,
    pub mean_minimum: Option<f64>,
    pub mean_wall_seconds: Option<f64>,
    pub mean_evaluations: Option<f64>,
}

impl StrategyResult {
    fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            failed: None,
            minima: vec![],
            wall_seconds: vec![],
            evaluations: vec![],
            mean_minimum: None,
            mean_wall_seconds: None,
            mean_evaluations: None,
        }
    }

    fn summarize(&mut self) {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.mean_minimum = mean(&self.minima);
        self.mean_wall_seconds = mean(&self.wall_seconds);
        self.mean_evaluations = mean(
            &self
                .evaluations
                .iter()
                .map(|&e| e as f64)
                .collect::<Vec<_>>(),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub campaign: String,
    pub digest: String,
    pub repeats: usize,
    pub sensitivity_evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<SearchPlan>,
    pub strategies: Vec<StrategyResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl StrategyComparison {
    pub fn get(&self, strategy: Strategy) -> Option<&StrategyResult> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "campaign {} ({}), {} repeats, sensitivity {} evaluations",
            self.campaign,
            &self.digest[..12.min(self.digest.len())],
            self.repeats,
            self.sensitivity_evaluations
        );
        let _ = writeln!(
            s,
            "{:<18} {:>14} {:>12} {:>10}",
            "strategy", "mean minimum", "mean time s", "mean evals"
        );
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for r in &self.strategies {
            let _ = write!(
                s,
                "{:<18} {:>14} {:>12} {:>10}",
                r.strategy.name(),
                opt(r.mean_minimum, 4),
                opt(r.mean_wall_seconds, 2),
                opt(r.mean_evaluations, 1)
            );
            if let Some(f) = &r.failed {
                let _ = write!(s, "  FAILED: {f}");
            }
            let _ = writeln!(s);
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn def(
    id: &str,
    target: Target,
    params: Vec<String>,
    budget: usize,
    init: usize,
    space: &SearchSpace,
) -> SearchDef {
    let mut fixed = space.default_configuration();
    fixed.0.retain(|k, _| !params.contains(k));
    SearchDef {
        id: id.to_string(),
        target,
        parameters: params,
        duplicates: vec![],
        fixed,
        inherited: vec![],
        dropped: Configuration::new(),
        budget,
        init_samples: init,
    }
}

fn jobs(
    strategy: Strategy,
    campaign: &Campaign,
    plan: Option<&SearchPlan>,
) -> Result<Vec<Vec<Job>>, String> {
    let space = &campaign.space;
    let settings = &campaign.config.planner;
    let budgets = &campaign.config.compare;
    let all = space.parameter_names();
    let joint_budget = budgets
        .joint_budget
        .unwrap_or_else(|| settings.budget_for(all.len()));
    let init = settings.init_samples;
    let single = |def: SearchDef, random: bool| vec![vec![Job { def, random }]];
    Ok(match strategy {
        Strategy::Random => single(
            def(
                "random",
                Target::Total,
                all,
                budgets.random_budget.unwrap_or(joint_budget),
                init,
                space,
            ),
            true,
        ),
        Strategy::FullyJoint => single(
            def("joint", Target::Total, all, joint_budget, init, space),
            false,
        ),
        Strategy::FullyIndependent => {
            let measured = space.measured_routines();
            let stage = space
                .routines()
                .iter()
                .filter_map(|r| {
                    let owned: Vec<String> = space
                        .parameters()
                        .iter()
                        .filter(|p| p.owner == r.name)
                        .map(|p| p.name.clone())
                        .collect();
                    if owned.is_empty() {
                        return None;
                    }
                    let target = if measured.contains(&r.name) {
                        Target::Routines(vec![r.name.clone()])
                    } else {
                        Target::Total
                    };
                    let budget = budgets
                        .independent_budget
                        .unwrap_or_else(|| settings.budget_for(owned.len()));
                    Some(Job {
                        def: def(&r.name, target, owned, budget, init, space),
                        random: false,
                    })
                })
                .collect();
            vec![stage]
        }
        Strategy::Planned => {
            let plan = plan.ok_or("no plan (sensitivity analysis failed)")?;
            plan.stages
                .iter()
                .map(|s| {
                    s.searches
                        .iter()
                        .map(|d| Job {
                            def: d.clone(),
                            random: false,
                        })
                        .collect()
                })
                .collect()
        }
    })
}

/// Runs the four strategies `repeats` times each (the campaign's
/// `compare.repeats`). Searches are named `<strategy>/r<k>/<search>`, with
/// the plan fingerprint appended to `planned`; the sensitivity analysis
/// feeding the planned strategy runs once.
pub fn compare_strategies(
    campaign: &Campaign,
    db: &mut EvaluationDb,
    opts: RunOptions,
) -> Result<StrategyComparison, OrchestratorError> {
    let ctx = Ctx::new(campaign, db, opts)?;
    let mut notes = Vec::new();
    let plan = match ctx.sensitivity() {
        Ok(matrix) => match emit_plan(&campaign.space, &matrix, &campaign.config.planner) {
            Ok(p) => Some(p),
            Err(e) => {
                notes.push(format!("planning failed: {e}"));
                None
            }
        },
        Err(e @ OrchestratorError::Interrupted { .. }) => return Err(e),
        Err(e) => {
            notes.push(format!("sensitivity analysis failed: {e}"));
            None
        }
    };
    let sensitivity_evaluations = ctx.recorder.history(SENSITIVITY_ID).len();
    let repeats = campaign.config.compare.repeats;
    let mut results: Vec<StrategyResult> = Strategy::ALL
        .iter()
        .map(|&s| StrategyResult::new(s))
        .collect();
    for r in 0..repeats {
        let seed = derive_seed(campaign.config.seed, &[r as u64]);
        for res in results.iter_mut() {
            if res.failed.is_some() {
                continue;
            }
            let stages = match jobs(res.strategy, campaign, plan.as_ref()) {
                Ok(s) => s,
                Err(e) => {
                    res.failed = Some(e);
                    continue;
                }
            };
            let prefix = match (&res.strategy, &plan) {
                (Strategy::Planned, Some(p)) => format!("planned-{}/r{r}/", plan_fingerprint(p)),
                (s, _) => format!("{}/r{r}/", s.name()),
            };
            match ctx.run(&stages, &prefix, seed, None) {
                Ok(run) => {
                    res.minima.push(if run.final_record.is_ok() {
                        run.final_record.total
                    } else {
                        PENALTY
                    });
                    res.wall_seconds.push(run.wall_seconds);
                    res.evaluations.push(run.evaluations - 1);
                }
                Err(e @ OrchestratorError::Interrupted { .. }) => return Err(e),
                Err(e) => res.failed = Some(format!("repeat {r}: {e}")),
            }
        }
    }
    for res in results.iter_mut() {
        res.summarize();
    }
    if campaign.config.parallel > 1 {
        notes.push(format!(
            "searches shared {} worker threads; per-search times include contention",
            campaign.config.parallel
        ));
    }
    Ok(StrategyComparison {
        campaign: campaign.config.name.clone(),
        digest: campaign.digest.clone(),
        repeats,
        sensitivity_evaluations,
        plan,
        strategies: results,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::objective::{EvaluationRecord, Evaluator};
    use crate::orchestrator::CampaignConfig;
    use crate::space::{ParamKind, ParameterSpec, RoutineDecl, Value};

    fn space() -> SearchSpace {
        let p = |name: &str, owner: &str| ParameterSpec {
            name: name.into(),
            kind: ParamKind::Real { lo: -2.0, hi: 2.0 },
            default: Value::Num(1.0),
            owner: owner.into(),
            shared_value_required: false,
            used_by: vec![],
        };
        SearchSpace::new(
            vec![RoutineDecl::new("A"), RoutineDecl::new("B")],
            vec![p("a1", "A"), p("a2", "A"), p("b1", "B")],
            vec![],
        )
        .unwrap()
    }

    fn campaign(evaluator: Arc<dyn Evaluator>, repeats: usize) -> Campaign {
        let mut cfg = CampaignConfig::synthetic(1, 0.0, 5);
        cfg.space = Some(space());
        cfg.sensitivity.variations = 2;
        cfg.compare.repeats = repeats;
        cfg.search.candidate_pool = 200;
        Campaign::with_evaluator(cfg, evaluator).unwrap()
    }

    fn quadratic() -> Arc<dyn Evaluator> {
        Arc::new(|c: &Configuration| {
            let v = |k: &str| c.num(k).unwrap();
            let a = 1.0 + v("a1").powi(2) + (v("a2") - 0.5).powi(2);
            let b = 1.0 + (v("b1") + 1.0).powi(2);
            EvaluationRecord::ok(
                c.clone(),
                BTreeMap::from([("A".into(), a), ("B".into(), b)]),
                a + b,
            )
        })
    }

    #[test]
    fn constant_objective_gives_equal_minima() {
        let flat: Arc<dyn Evaluator> = Arc::new(|c: &Configuration| {
            EvaluationRecord::ok(
                c.clone(),
                BTreeMap::from([("A".into(), 1.0), ("B".into(), 1.0)]),
                2.0,
            )
        });
        let c = campaign(flat, 1);
        let cmp =
            compare_strategies(&c, &mut EvaluationDb::in_memory(), RunOptions::default()).unwrap();
        assert_eq!(cmp.strategies.len(), 4);
        for r in &cmp.strategies {
            assert!(r.failed.is_none(), "{:?}", r.failed);
            assert_eq!(r.mean_minimum, Some(2.0));
        }
        let json = serde_json::to_string(&cmp).unwrap();
        assert_eq!(
            serde_json::from_str::<StrategyComparison>(&json).unwrap(),
            cmp
        );
        assert!(cmp.to_table().contains("fully-independent"));
    }

    #[test]
    fn budgets_follow_the_rule() {
        let c = campaign(quadratic(), 1);
        let mut db = EvaluationDb::in_memory();
        let cmp = compare_strategies(&c, &mut db, RunOptions::default()).unwrap();
        assert_eq!(cmp.get(Strategy::FullyJoint).unwrap().evaluations, vec![30]);
        assert_eq!(cmp.get(Strategy::Random).unwrap().evaluations, vec![30]);
        assert_eq!(
            cmp.get(Strategy::FullyIndependent).unwrap().evaluations,
            vec![20 + 10]
        );
        let planned = cmp.get(Strategy::Planned).unwrap().evaluations[0];
        assert_eq!(planned, cmp.plan.as_ref().unwrap().total_budget());
        let total: usize = cmp.strategies.iter().map(|r| r.evaluations[0] + 1).sum();
        assert_eq!(db.len(), total + cmp.sensitivity_evaluations);
        assert!(db
            .records()
            .iter()
            .any(|r| r.search_id.starts_with("planned-") && r.search_id.ends_with("/r0/final")));
    }

    #[test]
    fn repeated_invocations_agree() {
        let run = || {
            let c = campaign(quadratic(), 1);
            let mut db = EvaluationDb::in_memory();
            let cmp = compare_strategies(&c, &mut db, RunOptions::default()).unwrap();
            let rows: Vec<_> = db
                .records()
                .iter()
                .map(|r| (r.search_id.clone(), r.index, r.assignments.clone()))
                .collect();
            (cmp, rows)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        for (x, y) in a.strategies.iter().zip(&b.strategies) {
            assert_eq!(x.minima, y.minima);
            assert_eq!(x.evaluations, y.evaluations);
        }
    }

    #[test]
    fn failed_strategy_does_not_stop_the_others() {
        // Routine B always fails its metric: the independent search on B
        // sees only failures.
        let half: Arc<dyn Evaluator> = Arc::new(|c: &Configuration| {
            let a = 1.0 + c.num("a1").unwrap().powi(2);
            EvaluationRecord::ok(c.clone(), BTreeMap::from([("A".into(), a)]), a)
        });
        let c = campaign(half, 1);
        let cmp =
            compare_strategies(&c, &mut EvaluationDb::in_memory(), RunOptions::default()).unwrap();
        assert!(cmp.get(Strategy::FullyJoint).unwrap().failed.is_none());
        assert!(cmp.get(Strategy::Random).unwrap().failed.is_none());
        assert!(cmp
            .get(Strategy::FullyIndependent)
            .unwrap()
            .failed
            .is_some());
    }
}
