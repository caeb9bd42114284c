//! One tuning search: GP-based Bayesian optimization or random sampling
//! over a subset of parameters, with every other parameter held fixed.
//!
//! Both drivers are deterministic for a fixed seed and a deterministic
//! evaluator. All randomness for history position `i` is drawn from a
//! stream keyed on `(seed, search id, i)`, so a search resumed from a
//! prefix of its history continues exactly as the uninterrupted run would.

use std::ops::ControlFlow;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{EvalContext, EvaluationRecord, Evaluator, PENALTY};
use crate::planner::{SearchDef, Target};
use crate::rng::{derive_seed, hash_str, rng_from};
use crate::space::{Configuration, ParamKind, SearchSpace, SpaceError, SubspaceSampler, Value};
use crate::surrogate::{FitOptions, GpModel, Hyperparameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("search `{0}`: no successful evaluation after the initial samples")]
    AllFailed(String),
    #[error("search `{0}` has no tuned parameters")]
    Empty(String),
    #[error("resumed history is longer than it could have been ({got} > {max})")]
    History { got: usize, max: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub init_samples: usize,
    pub max_evaluations: usize,
    pub candidate_pool: usize,
}

impl SearchBudget {
    /// `max(10, 10·dims)` evaluations, 5 of them random.
    pub fn for_dims(dims: usize) -> Self {
        Self {
            init_samples: 5,
            max_evaluations: (10 * dims).max(10),
            candidate_pool: 1000,
        }
    }

    pub fn with_max(max_evaluations: usize) -> Self {
        Self {
            max_evaluations,
            ..Self::for_dims(1)
        }
    }
}

/// When to re-run the full multi-start hyperparameter search. Between full
/// searches a single local search starts from the last full optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefitSchedule {
    /// A full search happens once the history has grown by this factor
    /// since the previous one.
    pub growth: f64,
    pub warm_iterations: u64,
}

impl Default for RefitSchedule {
    fn default() -> Self {
        Self {
            growth: 1.2,
            warm_iterations: 50,
        }
    }
}

impl RefitSchedule {
    /// Every iteration does the full search.
    pub fn always() -> Self {
        Self {
            growth: 1.0,
            warm_iterations: 0,
        }
    }

    /// Largest full-refit position `≤ i`, given the first BO position.
    fn last_full(&self, first: usize, i: usize) -> usize {
        let mut cur = first;
        loop {
            let next = ((cur as f64 * self.growth).ceil() as usize).max(cur + 1);
            if next > i {
                return cur;
            }
            cur = next;
        }
    }
}

/// Everything a driver needs besides the evaluator.
#[derive(Debug, Clone)]
pub struct SearchTask<'a> {
    pub id: String,
    pub space: &'a SearchSpace,
    pub tuned: Vec<String>,
    /// Values for the parameters that are not tuned.
    pub base: Configuration,
    pub target: Target,
    pub budget: SearchBudget,
    pub seed: u64,
    pub refit: RefitSchedule,
}

impl<'a> SearchTask<'a> {
    pub fn new(
        id: &str,
        space: &'a SearchSpace,
        tuned: Vec<String>,
        target: Target,
        budget: SearchBudget,
        seed: u64,
    ) -> Self {
        Self {
            id: id.to_string(),
            space,
            tuned,
            base: space.default_configuration(),
            target,
            budget,
            seed,
            refit: RefitSchedule::default(),
        }
    }

    /// Task for a planned search; `base` supplies values of parameters the
    /// plan fixes (defaults and earlier-stage results).
    pub fn from_def(
        def: &SearchDef,
        space: &'a SearchSpace,
        base: &Configuration,
        seed: u64,
    ) -> Self {
        let mut t = Self::new(
            &def.id,
            space,
            def.parameters.clone(),
            def.target.clone(),
            SearchBudget {
                init_samples: def.init_samples,
                max_evaluations: def.budget,
                candidate_pool: 1000,
            },
            seed,
        );
        let mut b = space.default_configuration();
        for (k, v) in def.fixed.iter() {
            b.set(k.clone(), v.clone());
        }
        for (k, v) in base.iter() {
            if !def.parameters.contains(k) && !def.dropped.0.contains_key(k) {
                b.set(k.clone(), v.clone());
            }
        }
        t.base = b;
        t
    }

    fn stream(&self, i: usize, purpose: u64) -> rand_chacha::ChaCha8Rng {
        rng_from(self.seed, &[hash_str(&self.id), i as u64, purpose])
    }
}

/// The value a search minimizes for one record.
pub fn objective_of(record: &EvaluationRecord, target: &Target) -> f64 {
    if !record.is_ok() {
        return PENALTY;
    }
    match target {
        Target::Total => record.total,
        Target::Routines(rs) => {
            let mut s = 0.0;
            for r in rs {
                match record.metric(r) {
                    Some(v) => s += v,
                    None => return PENALTY,
                }
            }
            s
        }
    }
}

fn usable(record: &EvaluationRecord, target: &Target) -> bool {
    let v = objective_of(record, target);
    record.is_ok() && v.is_finite() && v < PENALTY
}

/// Maps the tuned parameters of a configuration into `[0, 1]^k`; numeric
/// kinds affinely over their bounds, categoricals one-hot.
pub fn encode(space: &SearchSpace, tuned: &[String], config: &Configuration) -> Vec<f64> {
    let mut out = Vec::with_capacity(tuned.len());
    for name in tuned {
        let p = space.parameter(name).expect("tuned parameter exists");
        match (&p.kind, config.get(name)) {
            (ParamKind::Categorical { labels }, v) => {
                for l in labels {
                    out.push(if matches!(v, Some(Value::Label(x)) if x == l) {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
            (kind, v) => {
                let (lo, hi) = kind.bounds().expect("numeric kind has bounds");
                let x = v.and_then(Value::as_f64).unwrap_or(lo);
                out.push(if hi > lo {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.5
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub config: Configuration,
    pub objective: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub search_id: String,
    pub history: Vec<EvaluationRecord>,
    pub best: Option<Best>,
    pub rng_seed: u64,
    /// Wall time spent by this invocation (resumed records excluded).
    pub elapsed_seconds: f64,
    /// True when the observer stopped the search before the budget.
    pub interrupted: bool,
    pub notes: Vec<String>,
}

impl SearchState {
    fn new(task: &SearchTask<'_>, history: Vec<EvaluationRecord>) -> Self {
        let mut s = Self {
            search_id: task.id.clone(),
            history: vec![],
            best: None,
            rng_seed: task.seed,
            elapsed_seconds: 0.0,
            interrupted: false,
            notes: vec![],
        };
        for r in history {
            s.push(r, &task.target);
        }
        s
    }

    fn push(&mut self, record: EvaluationRecord, target: &Target) {
        let v = objective_of(&record, target);
        if usable(&record, target) && self.best.as_ref().is_none_or(|b| v < b.objective) {
            self.best = Some(Best {
                config: record.config.clone(),
                objective: v,
                index: self.history.len(),
            });
        }
        self.history.push(record);
    }

    /// Running minimum of the objective along the history.
    pub fn trace(&self, target: &Target) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .map(|r| {
                if usable(r, target) {
                    best = best.min(objective_of(r, target));
                }
                best
            })
            .collect()
    }
}

/// Called after every evaluation; `Break` stops the search.
pub type Observer<'o> = dyn FnMut(usize, &EvaluationRecord) -> ControlFlow<()> + 'o;

fn evaluate(
    task: &SearchTask<'_>,
    evaluator: &dyn Evaluator,
    i: usize,
    config: &Configuration,
) -> EvaluationRecord {
    let start = Instant::now();
    let mut rec = evaluator.evaluate(
        EvalContext {
            search_id: &task.id,
            index: i as u64,
        },
        config,
    );
    rec.search_id = task.id.clone();
    if rec.wall_seconds == 0.0 {
        rec.wall_seconds = start.elapsed().as_secs_f64();
    }
    rec
}

/// Random valid configuration for position `i`, avoiding repeats of
/// `seen` when the space allows it.
fn random_config(
    task: &SearchTask<'_>,
    i: usize,
    seen: &[EvaluationRecord],
) -> Result<Configuration, SpaceError> {
    let mut sampler = SubspaceSampler::new(task.space, &task.tuned, &task.base)?;
    let mut rng = task.stream(i, 0);
    let mut cfg = sampler.draw(&mut rng)?;
    for _ in 0..100 {
        if !seen.iter().any(|r| r.config == cfg) {
            break;
        }
        cfg = sampler.draw(&mut rng)?;
    }
    Ok(cfg)
}

fn check_resume(
    task: &SearchTask<'_>,
    resume_from: &[EvaluationRecord],
) -> Result<(), SearchError> {
    if task.tuned.is_empty() {
        return Err(SearchError::Empty(task.id.clone()));
    }
    let max = task.budget.max_evaluations.max(resume_from.len());
    if resume_from.len() > max {
        return Err(SearchError::History {
            got: resume_from.len(),
            max,
        });
    }
    Ok(())
}

/// Random search. Evaluations within a batch of `width` run concurrently;
/// records reach the observer in position order.
pub fn run_random(
    task: &SearchTask<'_>,
    evaluator: &dyn Evaluator,
    resume_from: &[EvaluationRecord],
    width: usize,
    observer: &mut Observer<'_>,
) -> Result<SearchState, SearchError> {
    check_resume(task, resume_from)?;
    let started = Instant::now();
    let mut state = SearchState::new(task, resume_from.to_vec());
    let width = width.max(1);
    while state.history.len() < task.budget.max_evaluations {
        let from = state.history.len();
        let to = (from + width).min(task.budget.max_evaluations);
        let mut configs = Vec::with_capacity(to - from);
        for i in from..to {
            // No repeat avoidance: each position's draw depends only on the
            // seed, whatever the batch width.
            configs.push(random_config(task, i, &[])?);
        }
        let records: Vec<EvaluationRecord> = if configs.len() > 1 {
            configs
                .par_iter()
                .enumerate()
                .map(|(k, c)| evaluate(task, evaluator, from + k, c))
                .collect()
        } else {
            configs
                .iter()
                .enumerate()
                .map(|(k, c)| evaluate(task, evaluator, from + k, c))
                .collect()
        };
        for (k, rec) in records.into_iter().enumerate() {
            let flow = observer(from + k, &rec);
            state.push(rec, &task.target);
            if flow.is_break() {
                state.interrupted = true;
                state.elapsed_seconds = started.elapsed().as_secs_f64();
                return Ok(state);
            }
        }
    }
    state.elapsed_seconds = started.elapsed().as_secs_f64();
    if state.best.is_none() {
        return Err(SearchError::AllFailed(task.id.clone()));
    }
    Ok(state)
}

/// Training set: usable history records plus warm-start priors.
fn training_set(
    task: &SearchTask<'_>,
    history: &[EvaluationRecord],
    priors: &[EvaluationRecord],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in priors.iter().chain(history) {
        if usable(r, &task.target) {
            x.push(encode(task.space, &task.tuned, &r.config));
            y.push(objective_of(r, &task.target));
        }
    }
    (x, y)
}

fn fit_at(
    task: &SearchTask<'_>,
    history: &[EvaluationRecord],
    priors: &[EvaluationRecord],
    i: usize,
    full_fits: &mut Vec<(usize, Hyperparameters)>,
) -> Option<GpModel> {
    let first = task.budget.init_samples;
    let full_at = task.refit.last_full(first, i);
    let gp_seed = |k: usize| derive_seed(task.seed, &[hash_str(&task.id), k as u64, 2]);
    let full_hyper = match full_fits.iter().find(|(k, _)| *k == full_at) {
        Some((_, h)) => Some(h.clone()),
        None => {
            let (x, y) = training_set(task, &history[..full_at.min(history.len())], priors);
            let h = (x.len() >= 2)
                .then(|| GpModel::fit(&x, &y, gp_seed(full_at)).ok())
                .flatten()
                .map(|m| m.hyperparameters().clone());
            if let Some(h) = &h {
                full_fits.push((full_at, h.clone()));
            }
            h
        }
    };
    let (x, y) = training_set(task, &history[..i], priors);
    if x.len() < 2 {
        return None;
    }
    if full_at == i {
        let h = full_hyper?;
        return GpModel::fit_fixed(&x, &y, h).ok();
    }
    match full_hyper {
        Some(h) if task.refit.warm_iterations > 0 => GpModel::fit_with_options(
            &x,
            &y,
            gp_seed(i),
            FitOptions::warm(&h, task.refit.warm_iterations),
        )
        .ok(),
        Some(h) => GpModel::fit_fixed(&x, &y, h).ok(),
        None => GpModel::fit(&x, &y, gp_seed(i)).ok(),
    }
}

/// Bayesian optimization: `init_samples` random configurations, then one
/// argmax-EI pick from a random candidate pool per evaluation. `priors`
/// (e.g. records of an earlier campaign) inform the surrogate but do not
/// count toward the budget or the best.
pub fn run_bo(
    task: &SearchTask<'_>,
    evaluator: &dyn Evaluator,
    resume_from: &[EvaluationRecord],
    priors: &[EvaluationRecord],
    observer: &mut Observer<'_>,
) -> Result<SearchState, SearchError> {
    check_resume(task, resume_from)?;
    let started = Instant::now();
    let mut state = SearchState::new(task, resume_from.to_vec());
    let priors: Vec<EvaluationRecord> = priors
        .iter()
        .filter(|r| usable(r, &task.target) && task.space.validate(&r.config).unwrap_or(false))
        .cloned()
        .collect();
    if !priors.is_empty() {
        state.notes.push(format!(
            "{} prior records used for the surrogate",
            priors.len()
        ));
    }
    let mut full_fits = Vec::new();
    let mut fallback_noted = false;
    while state.history.len() < task.budget.max_evaluations {
        let i = state.history.len();
        let config = if i < task.budget.init_samples {
            random_config(task, i, &state.history)?
        } else {
            if state.best.is_none() && priors.is_empty() {
                return Err(SearchError::AllFailed(task.id.clone()));
            }
            match fit_at(task, &state.history, &priors, i, &mut full_fits) {
                Some(model) => propose(task, &model, &state.history, &priors, i)?,
                None => {
                    if !fallback_noted {
                        state
                            .notes
                            .push("fewer than 2 usable records, sampling randomly".into());
                        fallback_noted = true;
                    }
                    random_config(task, i, &state.history)?
                }
            }
        };
        let rec = evaluate(task, evaluator, i, &config);
        let flow = observer(i, &rec);
        state.push(rec, &task.target);
        if flow.is_break() {
            state.interrupted = true;
            break;
        }
    }
    state.elapsed_seconds = started.elapsed().as_secs_f64();
    if !state.interrupted && state.best.is_none() {
        return Err(SearchError::AllFailed(task.id.clone()));
    }
    Ok(state)
}

fn propose(
    task: &SearchTask<'_>,
    model: &GpModel,
    history: &[EvaluationRecord],
    priors: &[EvaluationRecord],
    i: usize,
) -> Result<Configuration, SearchError> {
    let best = priors
        .iter()
        .chain(history)
        .filter(|r| usable(r, &task.target))
        .map(|r| objective_of(r, &task.target))
        .fold(f64::INFINITY, f64::min);
    let mut sampler = SubspaceSampler::new(task.space, &task.tuned, &task.base)?;
    let mut rng = task.stream(i, 1);
    let mut chosen: Option<(f64, Configuration)> = None;
    for _ in 0..task.budget.candidate_pool.max(1) {
        let c = sampler.draw(&mut rng)?;
        if history.iter().any(|r| r.config == c) {
            continue;
        }
        let ei = model.expected_improvement(&encode(task.space, &task.tuned, &c), best);
        if chosen.as_ref().is_none_or(|(b, _)| ei > *b) {
            chosen = Some((ei, c));
        }
    }
    match chosen {
        Some((_, c)) => Ok(c),
        // Every candidate repeated history: the space is nearly exhausted.
        None => Ok(random_config(task, i, history)?),
    }
}

/// Observer that never stops.
pub fn keep_going(_: usize, _: &EvaluationRecord) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Status;
    use crate::space::{ParameterSpec, RoutineDecl};
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    pub(crate) fn sphere_space(d: usize) -> SearchSpace {
        SearchSpace::new(
            vec![RoutineDecl::new("f")],
            (0..d)
                .map(|i| ParameterSpec {
                    name: format!("x{i}"),
                    kind: ParamKind::Real { lo: -5.0, hi: 5.0 },
                    default: Value::Num(0.0),
                    owner: "f".into(),
                    shared_value_required: true,
                    used_by: vec![],
                })
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn sphere(c: &Configuration) -> EvaluationRecord {
        let v: f64 = c.iter().map(|(_, v)| v.as_f64().unwrap().powi(2)).sum();
        EvaluationRecord::ok(c.clone(), BTreeMap::from([("f".to_string(), v)]), v)
    }

    fn task(space: &SearchSpace, max: usize, seed: u64) -> SearchTask<'_> {
        SearchTask::new(
            "s",
            space,
            space.parameter_names(),
            Target::Total,
            SearchBudget::with_max(max),
            seed,
        )
    }

    #[test]
    fn random_search_is_deterministic_and_tracks_min() {
        let space = sphere_space(3);
        let t = task(&space, 30, 1);
        let a = run_random(&t, &sphere, &[], 4, &mut keep_going).unwrap();
        let b = run_random(&t, &sphere, &[], 1, &mut keep_going).unwrap();
        assert_eq!(a.history.len(), 30);
        let cfgs = |s: &SearchState| {
            s.history
                .iter()
                .map(|r| r.config.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(cfgs(&a), cfgs(&b));
        let min = a
            .history
            .iter()
            .map(|r| r.total)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(a.best.unwrap().objective, min);
    }

    #[test]
    fn bo_budget_and_resume() {
        let space = sphere_space(2);
        let t = task(&space, 20, 3);
        let full = run_bo(&t, &sphere, &[], &[], &mut keep_going).unwrap();
        assert_eq!(full.history.len(), 20);
        let calls = AtomicUsize::new(0);
        let counting = |c: &Configuration| {
            calls.fetch_add(1, Ordering::SeqCst);
            sphere(c)
        };
        let resumed = run_bo(&t, &counting, &full.history[..12], &[], &mut keep_going).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 8);
        let cfgs = |s: &SearchState| {
            s.history
                .iter()
                .map(|r| r.config.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(cfgs(&full), cfgs(&resumed));

        let longer = run_bo(&t, &sphere, &full.history, &[], &mut keep_going).unwrap();
        assert_eq!(longer.history.len(), 20);
    }

    #[test]
    fn observer_can_stop() {
        let space = sphere_space(2);
        let t = task(&space, 20, 3);
        let mut stop = |i: usize, _: &EvaluationRecord| {
            if i == 6 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        };
        let s = run_bo(&t, &sphere, &[], &[], &mut stop).unwrap();
        assert!(s.interrupted);
        assert_eq!(s.history.len(), 7);
    }

    #[test]
    fn failures_are_penalized_and_not_trained_on() {
        let space = sphere_space(2);
        let t = task(&space, 15, 4);
        let flaky = |c: &Configuration| {
            if c.num("x0").unwrap() > 2.0 {
                EvaluationRecord::failed(c.clone(), Status::Crash, "boom")
            } else {
                sphere(c)
            }
        };
        let s = run_bo(&t, &flaky, &[], &[], &mut keep_going).unwrap();
        assert_eq!(s.history.len(), 15);
        for r in &s.history {
            if !r.is_ok() {
                assert_eq!(objective_of(r, &Target::Total), PENALTY);
            }
        }
        assert!(s.best.unwrap().objective < PENALTY);
        let (_, y) = training_set(&t, &s.history, &[]);
        assert!(y.iter().all(|v| *v < PENALTY));
    }

    #[test]
    fn all_failures_error() {
        let space = sphere_space(2);
        let t = task(&space, 10, 4);
        let broken =
            |c: &Configuration| EvaluationRecord::failed(c.clone(), Status::Timeout, "slow");
        assert_eq!(
            run_bo(&t, &broken, &[], &[], &mut keep_going),
            Err(SearchError::AllFailed("s".into()))
        );
    }

    #[test]
    fn bo_beats_random_on_sphere() {
        let space = sphere_space(3);
        let (mut bo, mut rs) = (0.0, 0.0);
        for seed in 0..3 {
            let t = task(&space, 30, seed);
            bo += run_bo(&t, &sphere, &[], &[], &mut keep_going)
                .unwrap()
                .best
                .unwrap()
                .objective;
            rs += run_random(&t, &sphere, &[], 1, &mut keep_going)
                .unwrap()
                .best
                .unwrap()
                .objective;
        }
        assert!(bo < rs, "bo {bo} random {rs}");
    }

    #[test]
    fn history_respects_constraints_and_fixed_values() {
        let space = SearchSpace::new(
            vec![RoutineDecl::new("f")],
            ["a", "b", "c"]
                .iter()
                .map(|n| ParameterSpec {
                    name: n.to_string(),
                    kind: ParamKind::Integer {
                        lo: 1,
                        hi: 64,
                        step: 1,
                    },
                    default: Value::Num(2.0),
                    owner: "f".into(),
                    shared_value_required: true,
                    used_by: vec![],
                })
                .collect(),
            vec![crate::space::ConstraintExpr::parse("a * b <= 64").unwrap()],
        )
        .unwrap();
        let mut t = task(&space, 25, 9);
        t.tuned = vec!["a".into(), "b".into()];
        t.base.set("c", 7.0);
        let f = |c: &Configuration| {
            let v = (c.num("a").unwrap() - 5.0).powi(2) + c.num("b").unwrap();
            EvaluationRecord::ok(c.clone(), BTreeMap::from([("f".to_string(), v)]), v)
        };
        let s = run_bo(&t, &f, &[], &[], &mut keep_going).unwrap();
        for r in &s.history {
            assert!(space.validate(&r.config).unwrap());
            assert_eq!(r.config.num("c"), Some(7.0));
        }
        let trace = s.trace(&Target::Total);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn priors_feed_the_model_only() {
        let space = sphere_space(2);
        let t = task(&space, 12, 5);
        let prior_task = task(&space, 30, 77);
        let prior = run_random(&prior_task, &sphere, &[], 1, &mut keep_going).unwrap();
        let s = run_bo(&t, &sphere, &[], &prior.history, &mut keep_going).unwrap();
        assert_eq!(s.history.len(), 12);
        assert!(s.notes.iter().any(|n| n.contains("prior")));
        assert!(s.best.unwrap().index < 12);
    }

    #[test]
    fn routine_target_sums_metrics() {
        let rec = EvaluationRecord::ok(
            Configuration::new(),
            BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 2.5)]),
            10.0,
        );
        assert_eq!(
            objective_of(&rec, &Target::Routines(vec!["a".into(), "b".into()])),
            3.5
        );
        assert_eq!(objective_of(&rec, &Target::Total), 10.0);
        assert_eq!(
            objective_of(&rec, &Target::Routines(vec!["zz".into()])),
            PENALTY
        );
    }

    #[test]
    fn refit_schedule_positions() {
        let s = RefitSchedule::default();
        assert_eq!(s.last_full(5, 5), 5);
        assert_eq!(s.last_full(5, 6), 6);
        // 5, 6, 8, 10, 12, ...
        assert_eq!(s.last_full(5, 7), 6);
        assert_eq!(s.last_full(5, 9), 8);
        assert_eq!(s.last_full(5, 11), 10);
        assert_eq!(s.last_full(5, 12), 12);
        assert_eq!(RefitSchedule::always().last_full(5, 40), 40);
    }

    #[test]
    fn categorical_one_hot() {
        let space = SearchSpace::new(
            vec![RoutineDecl::new("f")],
            vec![ParameterSpec {
                name: "mode".into(),
                kind: ParamKind::Categorical {
                    labels: vec!["a".into(), "b".into(), "c".into()],
                },
                default: Value::Label("a".into()),
                owner: "f".into(),
                shared_value_required: true,
                used_by: vec![],
            }],
            vec![],
        )
        .unwrap();
        let mut c = Configuration::new();
        c.set("mode", "b");
        assert_eq!(encode(&space, &["mode".into()], &c), vec![0.0, 1.0, 0.0]);
    }
}
