use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::db::{EvaluationDb, Recorder};
use super::{plan_fingerprint, Campaign, OrchestratorError};
use crate::analysis::{design_sensitivity, run_sensitivity, InfluenceMatrix};
use crate::objective::{EvalContext, EvaluationRecord, Evaluator, Status};
use crate::planner::{SearchDef, SearchPlan, Target};
use crate::search::{run_bo, run_random, SearchState, SearchTask};
use crate::space::Configuration;

pub const SENSITIVITY_ID: &str = "sensitivity";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop (as if killed) once this many new records have been written.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub id: String,
    pub target: Target,
    pub random: bool,
    pub tuned: Vec<String>,
    pub evaluations: usize,
    /// Records taken from the log instead of evaluated.
    pub resumed: usize,
    pub priors: usize,
    pub best_objective: Option<f64>,
    pub best_index: Option<usize>,
    /// Best values of the parameters this search is authoritative for.
    pub best: Configuration,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub searches: Vec<SearchOutcome>,
    /// Longest search of the stage.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub campaign: String,
    pub digest: String,
    pub stages: Vec<StageOutcome>,
    pub final_config: Configuration,
    pub final_record: EvaluationRecord,
    /// Search evaluations plus the final one.
    pub evaluations: usize,
    /// Stage wall times summed.
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "campaign {} ({})",
            self.campaign,
            &self.digest[..12.min(self.digest.len())]
        );
        for (i, stage) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "\nstage {}  ({:.2} s)", i + 1, stage.wall_seconds);
            for o in &stage.searches {
                let best = o
                    .best_objective
                    .map_or("-".to_string(), |v| format!("{v:.6}"));
                let _ = writeln!(
                    s,
                    "  {:<20} target {:<12} evals {:>4} (resumed {:>4})  best {}",
                    o.id,
                    o.target.to_string(),
                    o.evaluations,
                    o.resumed,
                    best
                );
            }
        }
        let _ = writeln!(
            s,
            "\nfinal total {:.6} ({:?})",
            self.final_record.total, self.final_record.status
        );
        for (k, v) in &self.final_record.routine_metrics {
            let _ = writeln!(s, "  {k:<12} {v:.6}");
        }
        let _ = writeln!(
            s,
            "evaluations {}, search time {:.2} s",
            self.evaluations, self.wall_seconds
        );
        let _ = writeln!(s, "\nfinal configuration");
        for (k, v) in self.final_config.iter() {
            let _ = writeln!(s, "  {k} = {v}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Evaluator that answers from the log when it can and logs what it
/// evaluates.
struct Logged<'r, 'db> {
    inner: &'r dyn Evaluator,
    recorder: &'r Recorder<'db>,
}

impl Evaluator for Logged<'_, '_> {
    fn evaluate(&self, ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord {
        if let Some(r) = self.recorder.stored(ctx.search_id, ctx.index) {
            return r;
        }
        if self.recorder.stopped() {
            return EvaluationRecord::failed(
                config.clone(),
                Status::Crash,
                "not evaluated: run stopped",
            );
        }
        let rec = self.inner.evaluate(ctx, config);
        let _ = self.recorder.submit(ctx.search_id, ctx.index, &rec);
        rec
    }
}

pub(crate) struct Ctx<'c, 'db> {
    pub campaign: &'c Campaign,
    pub recorder: Recorder<'db>,
    pub pool: rayon::ThreadPool,
}

impl<'c, 'db> Ctx<'c, 'db> {
    pub fn new(
        campaign: &'c Campaign,
        db: &'db mut EvaluationDb,
        opts: RunOptions,
    ) -> Result<Self, OrchestratorError> {
        campaign.check_db(db)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(campaign.config.parallel)
            .build()
            .map_err(|e| OrchestratorError::Io(e.to_string()))?;
        Ok(Self {
            campaign,
            recorder: Recorder::new(db, &campaign.digest, opts.stop_after),
            pool,
        })
    }

    fn interrupted(&self) -> OrchestratorError {
        OrchestratorError::Interrupted {
            written: self.recorder.written(),
        }
    }

    pub fn sensitivity(&self) -> Result<InfluenceMatrix, OrchestratorError> {
        let c = self.campaign;
        let routines = c.space.measured_routines();
        let design = design_sensitivity(&c.space, &routines, &c.config.sensitivity, c.config.seed)?;
        self.recorder
            .begin(&[(SENSITIVITY_ID.to_string(), design.evaluation_count())]);
        let logged = Logged {
            inner: c.evaluator.as_ref(),
            recorder: &self.recorder,
        };
        let result = self.pool.install(|| {
            run_sensitivity(
                &c.space,
                &routines,
                &c.config.sensitivity,
                c.config.seed,
                &logged,
            )
        });
        self.recorder.finish_group()?;
        if self.recorder.stopped() {
            return Err(self.interrupted());
        }
        Ok(result?)
    }

    /// Runs `stages` in order under `prefix`; returns the merged result.
    pub fn run(
        &self,
        stages: &[Vec<Job>],
        prefix: &str,
        seed: u64,
        priors: Option<&EvaluationDb>,
    ) -> Result<PlanRun, OrchestratorError> {
        let c = self.campaign;
        let mut base = c.space.default_configuration();
        let mut outcomes = Vec::new();
        let mut notes = Vec::new();
        let mut evaluations = 0;
        for (s, stage) in stages.iter().enumerate() {
            let ids: Vec<String> = stage
                .iter()
                .map(|j| format!("{prefix}{}", j.def.id))
                .collect();
            let prior_sets: Vec<Vec<EvaluationRecord>> = match priors {
                Some(db) => stage
                    .iter()
                    .map(|j| warm_start_records(db, c, &j.def, &mut notes))
                    .collect::<Result<_, _>>()?,
                None => vec![vec![]; stage.len()],
            };
            self.recorder.begin(
                &ids.iter()
                    .zip(stage)
                    .map(|(id, j)| (id.clone(), j.def.budget))
                    .collect::<Vec<_>>(),
            );
            let results: Vec<(Result<SearchState, _>, usize)> = self.pool.install(|| {
                stage
                    .par_iter()
                    .zip(ids.par_iter())
                    .zip(prior_sets.par_iter())
                    .map(|((job, id), prior)| self.run_one(job, id, &base, seed, prior))
                    .collect()
            });
            self.recorder.finish_group()?;
            if self.recorder.stopped() {
                return Err(self.interrupted());
            }
            let mut stage_out = Vec::new();
            let mut updates = Vec::new();
            for (((job, id), (res, resumed)), prior) in
                stage.iter().zip(&ids).zip(results).zip(&prior_sets)
            {
                let fail = |reason: String| OrchestratorError::StageFailed {
                    stage: s + 1,
                    search: id.clone(),
                    reason,
                };
                let state = res.map_err(|e| fail(e.to_string()))?;
                let best = state
                    .best
                    .as_ref()
                    .ok_or_else(|| fail("no successful evaluation".into()))?;
                let mut owned = Configuration::new();
                for p in job.def.owned_parameters() {
                    if let Some(v) = best.config.get(p) {
                        owned.set(p.clone(), v.clone());
                    }
                }
                updates.push(owned.clone());
                evaluations += state.history.len();
                stage_out.push(SearchOutcome {
                    id: id.clone(),
                    target: job.def.target.clone(),
                    random: job.random,
                    tuned: job.def.parameters.clone(),
                    evaluations: state.history.len(),
                    resumed,
                    priors: prior.len(),
                    best_objective: Some(best.objective),
                    best_index: Some(best.index),
                    best: owned,
                    elapsed_seconds: state.elapsed_seconds,
                    notes: state.notes.clone(),
                });
            }
            for u in updates {
                for (k, v) in u.iter() {
                    base.set(k.clone(), v.clone());
                }
            }
            let wall = stage_out
                .iter()
                .map(|o| o.elapsed_seconds)
                .fold(0.0, f64::max);
            outcomes.push(StageOutcome {
                searches: stage_out,
                wall_seconds: wall,
            });
        }

        let final_config = base;
        match c.space.validate(&final_config) {
            Ok(true) => {}
            Ok(false) => {
                return Err(OrchestratorError::FinalInvalid(
                    "the merged search results violate a constraint".into(),
                ))
            }
            Err(e) => return Err(OrchestratorError::FinalInvalid(e.to_string())),
        }
        let final_id = format!("{prefix}final");
        self.recorder.begin(&[(final_id.clone(), 1)]);
        let final_record = match self.recorder.stored(&final_id, 0) {
            Some(r) => r,
            None => {
                let mut r = c.evaluator.evaluate(
                    EvalContext {
                        search_id: &final_id,
                        index: 0,
                    },
                    &final_config,
                );
                r.search_id = final_id.clone();
                let _ = self.recorder.submit(&final_id, 0, &r);
                r
            }
        };
        self.recorder.finish_group()?;
        if self.recorder.stored(&final_id, 0).is_none() {
            return Err(self.interrupted());
        }
        let undecided: BTreeSet<&String> = stages
            .iter()
            .flatten()
            .flat_map(|j| j.def.dropped.0.keys())
            .collect();
        if !undecided.is_empty() {
            notes.push(format!(
                "left at defaults by the dimension cap: {}",
                undecided
                    .into_iter()
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        Ok(PlanRun {
            wall_seconds: outcomes.iter().map(|s| s.wall_seconds).sum(),
            stages: outcomes,
            final_config,
            final_record,
            evaluations: evaluations + 1,
            notes,
        })
    }

    fn run_one(
        &self,
        job: &Job,
        id: &str,
        base: &Configuration,
        seed: u64,
        priors: &[EvaluationRecord],
    ) -> (Result<SearchState, crate::search::SearchError>, usize) {
        let c = self.campaign;
        let mut task = SearchTask::from_def(&job.def, &c.space, base, seed);
        task.id = id.to_string();
        task.budget.candidate_pool = c.config.search.candidate_pool;
        task.refit = c.config.search.refit;
        let resume = self.recorder.history(id);
        let resumed = resume.len().min(task.budget.max_evaluations);
        let mut observer =
            |i: usize, rec: &EvaluationRecord| self.recorder.submit(id, i as u64, rec);
        let res = if job.random {
            run_random(
                &task,
                c.evaluator.as_ref(),
                &resume,
                c.config.parallel,
                &mut observer,
            )
        } else {
            run_bo(&task, c.evaluator.as_ref(), &resume, priors, &mut observer)
        };
        (res, resumed)
    }
}

/// One search of a strategy: a definition plus the driver to run it with.
#[derive(Debug, Clone)]
pub(crate) struct Job {
    pub def: SearchDef,
    pub random: bool,
}

pub(crate) struct PlanRun {
    pub stages: Vec<StageOutcome>,
    pub final_config: Configuration,
    pub final_record: EvaluationRecord,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub notes: Vec<String>,
}

/// Prior records of the same search usable as surrogate training data.
fn warm_start_records(
    db: &EvaluationDb,
    campaign: &Campaign,
    def: &SearchDef,
    notes: &mut Vec<String>,
) -> Result<Vec<EvaluationRecord>, OrchestratorError> {
    let names: BTreeSet<String> = campaign.space.parameter_names().into_iter().collect();
    let mut out = Vec::new();
    let mut skipped = 0;
    let suffix = format!("/{}", def.id);
    let same_search = |id: &str| {
        id == def.id
            || (id.starts_with("run-") && id.ends_with(&suffix) && id.matches('/').count() == 1)
    };
    for r in db.records().iter().filter(|r| same_search(&r.search_id)) {
        let keys: BTreeSet<String> = r.assignments.0.keys().cloned().collect();
        if keys != names {
            let missing: Vec<_> = names.difference(&keys).cloned().collect();
            let extra: Vec<_> = keys.difference(&names).cloned().collect();
            return Err(OrchestratorError::SchemaMismatch(format!(
                "search {}: missing [{}], unknown [{}]",
                def.id,
                missing.join(", "),
                extra.join(", ")
            )));
        }
        if r.status != Status::Ok || !campaign.space.validate(&r.assignments).unwrap_or(false) {
            skipped += 1;
            continue;
        }
        out.push(r.to_evaluation());
    }
    if skipped > 0 {
        notes.push(format!(
            "{}: skipped {skipped} prior records that failed or are invalid here",
            def.id
        ));
    }
    if !out.is_empty() {
        notes.push(format!(
            "{}: warm-started from {} prior records",
            def.id,
            out.len()
        ));
    }
    Ok(out)
}

/// Runs the sensitivity experiment of `campaign`, logging it to `db`.
pub fn run_sensitivity_logged(
    campaign: &Campaign,
    db: &mut EvaluationDb,
    opts: RunOptions,
) -> Result<InfluenceMatrix, OrchestratorError> {
    Ctx::new(campaign, db, opts)?.sensitivity()
}

/// Executes every stage of `plan`, resuming whatever `db` already holds.
/// Search ids are `run-<plan fingerprint>/<search>`.
pub fn execute_plan(
    plan: &SearchPlan,
    campaign: &Campaign,
    db: &mut EvaluationDb,
    opts: RunOptions,
) -> Result<RunReport, OrchestratorError> {
    plan.check(&campaign.space)?;
    let priors = match &campaign.config.warm_start_db {
        Some(p) => Some(EvaluationDb::load(p)?),
        None => None,
    };
    let stages: Vec<Vec<Job>> = plan
        .stages
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
        .collect();
    let ctx = Ctx::new(campaign, db, opts)?;
    let prefix = format!("run-{}/", plan_fingerprint(plan));
    let run = ctx.run(&stages, &prefix, campaign.config.seed, priors.as_ref())?;
    let mut notes = plan.notes.clone();
    notes.extend(run.notes);
    Ok(RunReport {
        campaign: campaign.config.name.clone(),
        digest: campaign.digest.clone(),
        stages: run.stages,
        final_config: run.final_config,
        final_record: run.final_record,
        evaluations: run.evaluations,
        wall_seconds: run.wall_seconds,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::orchestrator::CampaignConfig;
    use crate::planner::{emit_plan, PlannerSettings, Stage};
    use crate::space::{ParamKind, ParameterSpec, RoutineDecl, SearchSpace, Value};

    fn two_routine_space() -> SearchSpace {
        let p = |name: &str, owner: &str| ParameterSpec {
            name: name.into(),
            kind: ParamKind::Integer {
                lo: 0,
                hi: 9,
                step: 1,
            },
            default: Value::Num(0.0),
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

    /// A depends on a1, a2; B on b1 and, mildly, on a1.
    fn evaluator() -> Arc<dyn Evaluator> {
        Arc::new(|c: &Configuration| {
            let (a1, a2, b1) = (
                c.num("a1").unwrap(),
                c.num("a2").unwrap(),
                c.num("b1").unwrap(),
            );
            let a = 1.0 + (a1 - 3.0).powi(2) + (a2 - 7.0).powi(2);
            let b = 1.0 + (b1 - 5.0).powi(2) + 0.01 * a1;
            EvaluationRecord::ok(
                c.clone(),
                BTreeMap::from([("A".into(), a), ("B".into(), b)]),
                a + b,
            )
        })
    }

    fn campaign() -> Campaign {
        let mut cfg = CampaignConfig::synthetic(1, 0.0, 3);
        cfg.space = Some(two_routine_space());
        cfg.sensitivity.variations = 2;
        cfg.sensitivity.strategy = crate::analysis::VariationStrategy::RandomInDomain;
        Campaign::with_evaluator(cfg, evaluator()).unwrap()
    }

    fn def(
        id: &str,
        params: &[&str],
        target: Target,
        budget: usize,
        space: &SearchSpace,
    ) -> SearchDef {
        let mut fixed = space.default_configuration();
        fixed.0.retain(|k, _| !params.contains(&k.as_str()));
        SearchDef {
            id: id.into(),
            target,
            parameters: params.iter().map(|s| s.to_string()).collect(),
            duplicates: vec![],
            fixed,
            inherited: vec![],
            dropped: Configuration::new(),
            budget,
            init_samples: 3,
        }
    }

    fn two_stage_plan(space: &SearchSpace) -> SearchPlan {
        SearchPlan {
            stages: vec![
                Stage {
                    searches: vec![def(
                        "A",
                        &["a1", "a2"],
                        Target::Routines(vec!["A".into()]),
                        12,
                        space,
                    )],
                },
                Stage {
                    searches: vec![def(
                        "B",
                        &["b1"],
                        Target::Routines(vec!["B".into()]),
                        8,
                        space,
                    )],
                },
            ],
            settings: PlannerSettings::default(),
            notes: vec![],
        }
    }

    #[test]
    fn single_stage_final_is_best_plus_defaults() {
        let c = campaign();
        let plan = SearchPlan {
            stages: vec![Stage {
                searches: vec![def(
                    "A",
                    &["a1", "a2"],
                    Target::Routines(vec!["A".into()]),
                    15,
                    &c.space,
                )],
            }],
            settings: PlannerSettings::default(),
            notes: vec!["b1: left at default".into()],
        };
        let mut db = EvaluationDb::in_memory();
        let r = execute_plan(&plan, &c, &mut db, RunOptions::default()).unwrap();
        assert_eq!(r.final_config.num("b1"), Some(0.0));
        assert_eq!(
            r.final_config.get("a1"),
            r.stages[0].searches[0].best.get("a1")
        );
        assert_eq!(r.evaluations, 16);
        assert_eq!(db.len(), 16);
        assert!(
            r.final_record.search_id.starts_with("run-")
                && r.final_record.search_id.ends_with("/final")
        );
    }

    #[test]
    fn later_stages_see_earlier_bests() {
        let c = campaign();
        let mut db = EvaluationDb::in_memory();
        let r = execute_plan(
            &two_stage_plan(&c.space),
            &c,
            &mut db,
            RunOptions::default(),
        )
        .unwrap();
        let a_best = &r.stages[0].searches[0].best;
        let b_id = &r.stages[1].searches[0].id;
        assert!(b_id.ends_with("/B"));
        for rec in db.history(&c.digest, b_id) {
            assert_eq!(rec.config.get("a1"), a_best.get("a1"));
            assert_eq!(rec.config.get("a2"), a_best.get("a2"));
        }
        assert_eq!(
            r.final_config.get("b1"),
            r.stages[1].searches[0].best.get("b1")
        );
        // Sum of per-search evaluation counts equals the log length.
        let per_search: usize = r
            .stages
            .iter()
            .flat_map(|s| &s.searches)
            .map(|o| o.evaluations)
            .sum();
        assert_eq!(per_search + 1, db.len());
        assert!(c.space.validate(&r.final_config).unwrap());
    }

    #[test]
    fn replay_reproduces_best_values() {
        let c = campaign();
        let mut db = EvaluationDb::in_memory();
        let r = execute_plan(
            &two_stage_plan(&c.space),
            &c,
            &mut db,
            RunOptions::default(),
        )
        .unwrap();
        for o in r.stages.iter().flat_map(|s| &s.searches) {
            let hist = db.history(&c.digest, &o.id);
            let best = hist
                .iter()
                .filter(|h| h.is_ok())
                .map(|h| crate::search::objective_of(h, &o.target))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(Some(best), o.best_objective);
        }
    }

    #[test]
    fn resume_continues_and_completed_run_adds_nothing() {
        let c = campaign();
        let plan = two_stage_plan(&c.space);
        let mut full = EvaluationDb::in_memory();
        execute_plan(&plan, &c, &mut full, RunOptions::default()).unwrap();

        let mut db = EvaluationDb::in_memory();
        let err = execute_plan(
            &plan,
            &c,
            &mut db,
            RunOptions {
                stop_after: Some(5),
            },
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::Interrupted { written: 5 }));
        assert_eq!(db.len(), 5);
        let r = execute_plan(&plan, &c, &mut db, RunOptions::default()).unwrap();
        assert_eq!(r.stages[0].searches[0].resumed, 5);
        assert_eq!(db.len(), full.len());
        for (a, b) in db.records().iter().zip(full.records()) {
            assert_eq!(
                (&a.search_id, a.index, &a.assignments, a.total),
                (&b.search_id, b.index, &b.assignments, b.total)
            );
        }
        let before = db.len();
        execute_plan(&plan, &c, &mut db, RunOptions::default()).unwrap();
        assert_eq!(db.len(), before);
    }

    #[test]
    fn failing_search_is_a_stage_failure() {
        let mut cfg = CampaignConfig::synthetic(1, 0.0, 3);
        cfg.space = Some(two_routine_space());
        let c = Campaign::with_evaluator(
            cfg,
            Arc::new(|c: &Configuration| {
                EvaluationRecord::failed(c.clone(), Status::Crash, "boom")
            }),
        )
        .unwrap();
        let mut db = EvaluationDb::in_memory();
        let err = execute_plan(
            &two_stage_plan(&c.space),
            &c,
            &mut db,
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(
            matches!(err, OrchestratorError::StageFailed { stage: 1, .. }),
            "{err}"
        );
        assert!(!db.is_empty(), "partial results are persisted");
    }

    #[test]
    fn warm_start_injects_priors_and_checks_schema() {
        let c = campaign();
        let plan = two_stage_plan(&c.space);
        let dir = tempfile::tempdir().unwrap();
        let prior_path = dir.path().join("prior.db");
        {
            let mut prior = EvaluationDb::open(&prior_path).unwrap();
            execute_plan(&plan, &c, &mut prior, RunOptions::default()).unwrap();
        }
        let mut cfg = c.config.clone();
        cfg.seed = 11;
        cfg.warm_start_db = Some(prior_path.clone());
        let warm = Campaign::with_evaluator(cfg, evaluator()).unwrap();
        let mut db = EvaluationDb::in_memory();
        let r = execute_plan(&plan, &warm, &mut db, RunOptions::default()).unwrap();
        assert_eq!(r.stages[0].searches[0].priors, 12);
        assert_eq!(r.stages[0].searches[0].evaluations, 12);
        assert!(r.notes.iter().any(|n| n.contains("warm-started")));

        // A prior log over other parameter names.
        let bad_path = dir.path().join("bad.db");
        {
            let mut bad = EvaluationDb::open(&bad_path).unwrap();
            let mut cfg = Configuration::new();
            cfg.set("zz", 1.0);
            bad.append(crate::orchestrator::DbRecord::new(
                "x",
                "A",
                0,
                &EvaluationRecord::ok(cfg, BTreeMap::new(), 1.0),
            ))
            .unwrap();
        }
        let mut cfg = c.config.clone();
        cfg.warm_start_db = Some(bad_path);
        let bad = Campaign::with_evaluator(cfg, evaluator()).unwrap();
        let err = execute_plan(
            &plan,
            &bad,
            &mut EvaluationDb::in_memory(),
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::SchemaMismatch(_)));
    }

    #[test]
    fn empty_prior_db_is_a_cold_start() {
        let c = campaign();
        let plan = two_stage_plan(&c.space);
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.db");
        std::fs::write(&empty, "").unwrap();
        let mut cold_db = EvaluationDb::in_memory();
        let cold = execute_plan(&plan, &c, &mut cold_db, RunOptions::default()).unwrap();
        let mut cfg = c.config.clone();
        cfg.warm_start_db = Some(empty);
        let warm_c = Campaign::with_evaluator(cfg, evaluator()).unwrap();
        let mut warm_db = EvaluationDb::in_memory();
        let warm = execute_plan(&plan, &warm_c, &mut warm_db, RunOptions::default()).unwrap();
        assert_eq!(cold.final_config, warm.final_config);
        let configs = |db: &EvaluationDb| {
            db.records()
                .iter()
                .map(|r| r.assignments.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(configs(&cold_db), configs(&warm_db));
    }

    #[test]
    fn sensitivity_is_logged_and_replayed() {
        let c = campaign();
        let mut db = EvaluationDb::in_memory();
        let m = run_sensitivity_logged(&c, &mut db, RunOptions::default()).unwrap();
        let expected = design_sensitivity(
            &c.space,
            &c.space.measured_routines(),
            &c.config.sensitivity,
            c.config.seed,
        )
        .unwrap()
        .evaluation_count();
        assert!(expected > 3);
        assert_eq!(db.len(), expected);
        let again = run_sensitivity_logged(&c, &mut db, RunOptions::default()).unwrap();
        assert_eq!(db.len(), expected);
        assert_eq!(m.variability, again.variability);

        let mut partial = EvaluationDb::in_memory();
        assert!(run_sensitivity_logged(
            &c,
            &mut partial,
            RunOptions {
                stop_after: Some(3)
            }
        )
        .is_err());
        assert_eq!(partial.len(), 3);
        run_sensitivity_logged(&c, &mut partial, RunOptions::default()).unwrap();
        let strip = |db: &EvaluationDb| {
            db.records()
                .iter()
                .map(|r| (r.index, r.total))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&partial), strip(&db));
    }

    #[test]
    fn planned_run_on_emitted_plan() {
        let c = campaign();
        let mut db = EvaluationDb::in_memory();
        let m = run_sensitivity_logged(&c, &mut db, RunOptions::default()).unwrap();
        let plan = emit_plan(&c.space, &m, &PlannerSettings::default()).unwrap();
        let r = execute_plan(&plan, &c, &mut db, RunOptions::default()).unwrap();
        assert!(r.final_record.is_ok());
        assert!(r.to_text().contains("final total"));
    }
}
