//! Turns an influence matrix into a staged set of lower-dimensional searches.
//!
//! The pipeline is `stage_globals` → `partition` → `resolve_shared_kernels`
//! → `apply_dim_cap` → budgets, composed by [`emit_plan`].
//!
//! Edge classes used throughout:
//! - *own*: the target routine owns or uses the parameter;
//! - *containment*: the target is an ancestor region of an owner or user
//!   (a child's parameters naturally show up in the enclosing region's time);
//! - *cross*: everything else. Only cross edges at or above the cutoff merge
//!   routines or duplicate parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::InfluenceMatrix;
use crate::space::{Configuration, ParameterSpec, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("influence matrix does not cover {0}")]
    Coverage(String),
    #[error("invalid planner settings: {0}")]
    Settings(String),
    #[error("plan invariant violated: {0}")]
    Invariant(String),
}

/// How per-routine influence is combined when a search targets several
/// routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PlannerSettings {
    pub cutoff: f64,
    pub dim_cap: usize,
    pub budget_multiplier: usize,
    pub budget_floor: usize,
    pub init_samples: usize,
    pub aggregation: Aggregation,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            cutoff: 0.25,
            dim_cap: 10,
            budget_multiplier: 10,
            budget_floor: 10,
            init_samples: 5,
            aggregation: Aggregation::Max,
        }
    }
}

impl PlannerSettings {
    pub fn with_cutoff(cutoff: f64) -> Self {
        Self {
            cutoff,
            ..Self::default()
        }
    }

    pub fn budget_for(&self, dims: usize) -> usize {
        self.budget_floor.max(self.budget_multiplier * dims)
    }

    fn check(&self) -> Result<(), PlanError> {
        if !self.cutoff.is_finite() || self.cutoff < 0.0 {
            return Err(PlanError::Settings(format!(
                "cutoff {} must be a finite value ≥ 0",
                self.cutoff
            )));
        }
        if self.dim_cap == 0 {
            return Err(PlanError::Settings("dim_cap must be positive".into()));
        }
        Ok(())
    }
}

/// What a search minimizes: the campaign total or the sum of some routine
/// metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Total,
    Routines(Vec<String>),
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Total => f.write_str("total"),
            Target::Routines(r) => f.write_str(&r.join("+")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDef {
    pub id: String,
    pub target: Target,
    /// Tuned parameters in space declaration order.
    pub parameters: Vec<String>,
    /// Tuned here but authoritative elsewhere (tuned twice, once per
    /// routine); the final configuration takes the owner's value.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duplicates: Vec<String>,
    /// Values of every parameter not tuned here, at plan time.
    pub fixed: Configuration,
    /// Fixed parameters whose values come from earlier stages at run time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inherited: Vec<String>,
    /// Parameters removed by the dimension cap, with their defaults.
    #[serde(default, skip_serializing_if = "Configuration::is_empty")]
    pub dropped: Configuration,
    pub budget: usize,
    pub init_samples: usize,
}

impl SearchDef {
    pub fn dims(&self) -> usize {
        self.parameters.len()
    }

    /// Tuned parameters this search is authoritative for.
    pub fn owned_parameters(&self) -> impl Iterator<Item = &String> {
        self.parameters
            .iter()
            .filter(|p| !self.duplicates.contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub searches: Vec<SearchDef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub stages: Vec<Stage>,
    pub settings: PlannerSettings,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub parameter: String,
    pub source: String,
    pub target: String,
    /// `None` when the sensitivity run could not measure it.
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterdependenceGraph {
    pub vertices: Vec<String>,
    pub edges: Vec<Edge>,
}

impl InterdependenceGraph {
    /// Keeps only edges whose parameter is in `parameters`.
    pub fn restricted_to(&self, parameters: &BTreeSet<String>) -> Self {
        Self {
            vertices: self.vertices.clone(),
            edges: self
                .edges
                .iter()
                .filter(|e| parameters.contains(&e.parameter))
                .cloned()
                .collect(),
        }
    }
}

impl InterdependenceGraph {
    /// The routine hierarchy followed by the cross-routine edges, one line
    /// per (owner, routine) pair, marked kept or pruned at `cutoff`.
    pub fn to_report(&self, space: &SearchSpace, cutoff: f64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "routines");
        for r in space.routines() {
            let depth = space.depth(&r.name);
            let tag = if r.measured { "" } else { "  (not measured)" };
            let _ = writeln!(s, "  {}{}{tag}", "  ".repeat(depth), r.name);
        }
        type Weights<'a> = Vec<(&'a str, Option<f64>)>;
        let mut pairs: BTreeMap<(String, String), Weights> = BTreeMap::new();
        for e in &self.edges {
            let Some(p) = space.parameter(&e.parameter) else {
                continue;
            };
            if classify(space, p, &e.target) == EdgeKind::Cross {
                pairs
                    .entry((e.source.clone(), e.target.clone()))
                    .or_default()
                    .push((&e.parameter, e.weight));
            }
        }
        let _ = writeln!(s, "\ncross-routine edges (cutoff {cutoff:.2})");
        let fmt = |w: Option<f64>| w.map_or("unknown".to_string(), |w| format!("{w:.3}"));
        for ((src, dst), params) in &pairs {
            let kept: Vec<String> = params
                .iter()
                .filter(|(_, w)| survives(*w, cutoff))
                .map(|(p, w)| format!("{p} {}", fmt(*w)))
                .collect();
            if kept.is_empty() {
                let max = params.iter().filter_map(|(_, w)| *w).fold(0.0, f64::max);
                let _ = writeln!(
                    s,
                    "  [pruned] {src} -> {dst}  max {max:.3} over {} parameters",
                    params.len()
                );
            } else {
                let pruned = params.len() - kept.len();
                let rest = if pruned > 0 {
                    format!("; {pruned} pruned")
                } else {
                    String::new()
                };
                let _ = writeln!(s, "  [kept]   {src} -> {dst}  {}{rest}", kept.join(", "));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Own,
    Containment,
    Cross,
}

pub fn classify(space: &SearchSpace, parameter: &ParameterSpec, target: &str) -> EdgeKind {
    if parameter.users().any(|u| u == target) {
        return EdgeKind::Own;
    }
    if parameter
        .users()
        .any(|u| space.ancestors(u).iter().any(|a| a == target))
    {
        return EdgeKind::Containment;
    }
    EdgeKind::Cross
}

fn survives(weight: Option<f64>, cutoff: f64) -> bool {
    weight.is_none_or(|w| w >= cutoff)
}

pub fn build_graph(
    matrix: &InfluenceMatrix,
    space: &SearchSpace,
) -> Result<InterdependenceGraph, PlanError> {
    for r in space.measured_routines() {
        if matrix.routine_index(&r).is_none() {
            return Err(PlanError::Coverage(format!("routine `{r}`")));
        }
    }
    let mut edges = Vec::new();
    for p in space.parameters() {
        let j = matrix
            .parameter_index(&p.name)
            .ok_or_else(|| PlanError::Coverage(format!("parameter `{}`", p.name)))?;
        for (i, r) in matrix.routines.iter().enumerate() {
            if space.routine(r).is_none() {
                continue;
            }
            edges.push(Edge {
                parameter: p.name.clone(),
                source: p.owner.clone(),
                target: r.clone(),
                weight: matrix.variability[i][j],
            });
        }
    }
    let vertices = matrix
        .routines
        .iter()
        .filter(|r| space.routine(r).is_some())
        .cloned()
        .collect();
    Ok(InterdependenceGraph { vertices, edges })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index wins so the representative is deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    /// Routine groups, each sorted by name, ordered by first routine name.
    pub groups: Vec<Vec<String>>,
    /// `(parameter, routine)` pairs: the parameter is tuned a second time in
    /// the routine's group.
    pub duplicates: Vec<(String, String)>,
    pub notes: Vec<String>,
}

impl Partition {
    pub fn group_of(&self, routine: &str) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.iter().any(|r| r == routine))
    }
}

/// Prunes cross edges below the cutoff and merges routines joined by a
/// surviving edge on a sharing-constrained parameter. Unknown weights
/// survive.
pub fn partition(
    graph: &InterdependenceGraph,
    settings: &PlannerSettings,
    space: &SearchSpace,
) -> Partition {
    let mut names: BTreeSet<String> = graph.vertices.iter().cloned().collect();
    for e in &graph.edges {
        if let Some(p) = space.parameter(&e.parameter) {
            names.extend(
                p.users()
                    .filter(|u| space.routine(u).is_some_and(|r| r.measured))
                    .map(String::from),
            );
        }
    }
    let names: Vec<String> = names.into_iter().collect();
    let idx = |n: &str| names.iter().position(|x| x == n);
    let mut uf = UnionFind::new(names.len());
    let mut notes = Vec::new();
    let mut dup_candidates = Vec::new();
    for e in &graph.edges {
        let Some(p) = space.parameter(&e.parameter) else {
            continue;
        };
        if classify(space, p, &e.target) != EdgeKind::Cross || !survives(e.weight, settings.cutoff)
        {
            continue;
        }
        if e.weight.is_none() {
            notes.push(format!(
                "{} -> {}: variability unknown, edge kept",
                e.parameter, e.target
            ));
        }
        if p.shared_value_required {
            let Some(t) = idx(&e.target) else { continue };
            for u in p.users() {
                if let Some(s) = idx(u) {
                    uf.union(s, t);
                }
            }
        } else {
            dup_candidates.push((e.parameter.clone(), e.target.clone()));
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(n.clone());
    }
    let mut groups: Vec<Vec<String>> = groups.into_values().collect();
    groups.sort();
    let mut part = Partition {
        groups,
        duplicates: vec![],
        notes,
    };
    for (param, target) in dup_candidates {
        let p = space.parameter(&param).expect("edge parameter exists");
        let tg = part.group_of(&target);
        if p.users().any(|u| part.group_of(u) == tg) {
            continue;
        }
        if !part.duplicates.contains(&(param.clone(), target.clone())) {
            part.notes.push(format!(
                "{param}: not sharing-constrained, tuned again for {target}"
            ));
            part.duplicates.push((param, target));
        }
    }
    part
}

fn aggregate(values: impl Iterator<Item = Option<f64>>, how: Aggregation) -> f64 {
    let mut acc: f64 = match how {
        Aggregation::Max => f64::NEG_INFINITY,
        Aggregation::Sum => 0.0,
    };
    let mut any = false;
    for v in values {
        any = true;
        // Unknown ranks above everything measured.
        let v = v.unwrap_or(f64::INFINITY);
        acc = match how {
            Aggregation::Max => acc.max(v),
            Aggregation::Sum => acc + v,
        };
    }
    if any {
        acc
    } else {
        0.0
    }
}

fn influence_on(
    matrix: &InfluenceMatrix,
    parameter: &str,
    routines: &[String],
    how: Aggregation,
) -> f64 {
    aggregate(
        routines.iter().filter_map(|r| matrix.get(r, parameter)),
        how,
    )
}

/// Parameters that must be tuned before the routine groups: those owned by
/// routines without a metric (searched against the total), those owned by
/// enclosing regions, and those at or above the cutoff on a region and on at
/// least two of its descendants (searched against the region's metric).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalStaging {
    /// Outer stages, outermost first; each entry is `(id, target, params)`.
    pub stages: Vec<Vec<(String, Target, Vec<String>)>>,
    pub remaining: BTreeSet<String>,
    pub notes: Vec<String>,
}

pub fn stage_globals(
    matrix: &InfluenceMatrix,
    space: &SearchSpace,
    settings: &PlannerSettings,
) -> GlobalStaging {
    let cutoff = settings.cutoff;
    let mut taken: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut notes = Vec::new();

    let unmeasured: Vec<&str> = space
        .routines()
        .iter()
        .filter(|r| !r.measured)
        .map(|r| r.name.as_str())
        .collect();
    let total_id = unmeasured.join("+");
    let mut total_params = Vec::new();
    for p in space.parameters() {
        if unmeasured.contains(&p.owner.as_str()) {
            total_params.push(p.name.clone());
            taken.insert(p.name.clone(), (0, total_id.clone()));
        }
    }

    // Measured regions with descendants, outermost first then by name.
    let mut regions: Vec<(usize, String)> = space
        .routines()
        .iter()
        .filter(|r| r.measured && !space.children(&r.name).is_empty())
        .map(|r| (space.depth(&r.name), r.name.clone()))
        .collect();
    regions.sort();
    let descendants = |region: &str| -> Vec<String> {
        space
            .measured_routines()
            .into_iter()
            .filter(|r| space.ancestors(r).iter().any(|a| a == region))
            .collect()
    };
    let mut region_params: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (depth, region) in &regions {
        let below = descendants(region);
        for p in space.parameters() {
            if taken.contains_key(&p.name) {
                continue;
            }
            let owned = p.owner == *region;
            let pulled = !owned
                && matrix
                    .get(region, &p.name)
                    .flatten()
                    .is_some_and(|w| w >= cutoff)
                && below
                    .iter()
                    .filter(|r| {
                        matrix
                            .get(r, &p.name)
                            .flatten()
                            .is_some_and(|w| w >= cutoff)
                    })
                    .count()
                    >= 2;
            if owned || pulled {
                if pulled {
                    notes.push(format!(
                        "{}: at or above cutoff on {region} and on 2+ enclosed routines, tuned against {region} first",
                        p.name
                    ));
                }
                taken.insert(p.name.clone(), (*depth, region.clone()));
                region_params
                    .entry(region.clone())
                    .or_default()
                    .push(p.name.clone());
            }
        }
    }

    let mut stages: Vec<Vec<(String, Target, Vec<String>)>> = Vec::new();
    let mut push = |stage: usize, entry| {
        while stages.len() <= stage {
            stages.push(Vec::new());
        }
        stages[stage].push(entry);
    };
    if !total_params.is_empty() {
        push(0, (total_id.clone(), Target::Total, total_params));
        if !regions.is_empty() {
            notes.push(format!(
                "{total_id}: searched against the total in the first stage; its optimum may depend on values chosen by the region searches of the same stage"
            ));
        }
    }
    for (depth, region) in &regions {
        if let Some(params) = region_params.remove(region) {
            push(
                *depth,
                (
                    region.clone(),
                    Target::Routines(vec![region.clone()]),
                    params,
                ),
            );
        }
    }
    stages.retain(|s| !s.is_empty());
    let remaining = space
        .parameters()
        .iter()
        .filter(|p| !taken.contains_key(&p.name))
        .map(|p| p.name.clone())
        .collect();
    GlobalStaging {
        stages,
        remaining,
        notes,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelAssignment {
    /// Parameter → groups that tune it; the first entry is authoritative.
    pub tuned_in: BTreeMap<String, Vec<usize>>,
    pub notes: Vec<String>,
}

/// Places each parameter in the group(s) that tune it. A sharing-constrained
/// parameter used by routines in several groups is tuned only where its
/// influence is highest; ties go to the group whose first routine name sorts
/// first.
pub fn resolve_shared_kernels(
    partition: &Partition,
    matrix: &InfluenceMatrix,
    space: &SearchSpace,
    parameters: &BTreeSet<String>,
    aggregation: Aggregation,
) -> KernelAssignment {
    let mut out = KernelAssignment::default();
    for p in space
        .parameters()
        .iter()
        .filter(|p| parameters.contains(&p.name))
    {
        let owner_group = p.users().find_map(|u| partition.group_of(u));
        let mut candidates: Vec<usize> = Vec::new();
        for u in p.users() {
            if let Some(g) = partition.group_of(u) {
                if !candidates.contains(&g) {
                    candidates.push(g);
                }
            }
        }
        for (param, target) in &partition.duplicates {
            if *param == p.name {
                if let Some(g) = partition.group_of(target) {
                    if !candidates.contains(&g) {
                        candidates.push(g);
                    }
                }
            }
        }
        if candidates.is_empty() {
            out.notes.push(format!(
                "{}: no measured routine tunes it, left at default",
                p.name
            ));
            continue;
        }
        if p.shared_value_required && candidates.len() > 1 {
            let scores: Vec<(usize, f64)> = candidates
                .iter()
                .map(|&g| {
                    (
                        g,
                        influence_on(matrix, &p.name, &partition.groups[g], aggregation),
                    )
                })
                .collect();
            let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = scores.iter().filter(|s| s.1 == best).map(|s| s.0).collect();
            let chosen = *tied.iter().min().expect("non-empty");
            if tied.len() > 1 {
                out.notes.push(format!(
                    "{}: equal influence on several groups, assigned to {} by name order",
                    p.name,
                    partition.groups[chosen].join("+")
                ));
            } else {
                out.notes.push(format!(
                    "{}: shared value, tuned only in {} where its influence is highest",
                    p.name,
                    partition.groups[chosen].join("+")
                ));
            }
            out.tuned_in.insert(p.name.clone(), vec![chosen]);
        } else {
            let first = owner_group.unwrap_or(candidates[0]);
            let mut list = vec![first];
            list.extend(candidates.into_iter().filter(|&g| g != first));
            out.tuned_in.insert(p.name.clone(), list);
        }
    }
    out
}

/// Keeps the `dim_cap` most influential parameters of a search (on its
/// target) and fixes the rest at their defaults.
pub fn apply_dim_cap(
    mut def: SearchDef,
    matrix: &InfluenceMatrix,
    settings: &PlannerSettings,
    space: &SearchSpace,
    notes: &mut Vec<String>,
) -> SearchDef {
    if def.parameters.len() <= settings.dim_cap {
        return def;
    }
    let routines: Vec<String> = match &def.target {
        Target::Total => matrix.routines.clone(),
        Target::Routines(r) => r.clone(),
    };
    let mut ranked: Vec<(usize, f64)> = def
        .parameters
        .iter()
        .enumerate()
        .map(|(i, p)| (i, influence_on(matrix, p, &routines, settings.aggregation)))
        .collect();
    // Stable: ties keep declaration order.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let keep: BTreeSet<usize> = ranked.iter().take(settings.dim_cap).map(|r| r.0).collect();
    let mut kept = Vec::new();
    for (i, p) in def.parameters.iter().enumerate() {
        if keep.contains(&i) {
            kept.push(p.clone());
            continue;
        }
        let default = space
            .parameter(p)
            .expect("planned parameter exists")
            .default
            .clone();
        if def.duplicates.contains(p) {
            notes.push(format!(
                "{}: {p} dropped by the dimension cap (duplicate)",
                def.id
            ));
        } else {
            notes.push(format!(
                "{}: {p} dropped by the dimension cap, fixed at {default}",
                def.id
            ));
            def.dropped.set(p.clone(), default.clone());
        }
        def.fixed.set(p.clone(), default);
    }
    def.duplicates.retain(|d| kept.contains(d));
    def.parameters = kept;
    def
}

fn make_def(
    id: String,
    target: Target,
    mut params: Vec<String>,
    duplicates: Vec<String>,
    space: &SearchSpace,
    settings: &PlannerSettings,
) -> SearchDef {
    let order: BTreeMap<&str, usize> = space
        .parameters()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    params.sort_by_key(|p| order[p.as_str()]);
    let fixed = space
        .parameters()
        .iter()
        .filter(|p| !params.contains(&p.name))
        .map(|p| (p.name.clone(), p.default.clone()))
        .collect();
    SearchDef {
        id,
        target,
        parameters: params,
        duplicates,
        fixed,
        inherited: vec![],
        dropped: Configuration::new(),
        budget: 0,
        init_samples: settings.init_samples,
    }
}

/// The full planning pipeline. Pure and deterministic.
pub fn emit_plan(
    space: &SearchSpace,
    matrix: &InfluenceMatrix,
    settings: &PlannerSettings,
) -> Result<SearchPlan, PlanError> {
    settings.check()?;
    let graph = build_graph(matrix, space)?;
    let staging = stage_globals(matrix, space, settings);
    let mut notes = staging.notes.clone();

    let sub = graph.restricted_to(&staging.remaining);
    let part = partition(&sub, settings, space);
    notes.extend(part.notes.iter().cloned());
    let assignment = resolve_shared_kernels(
        &part,
        matrix,
        space,
        &staging.remaining,
        settings.aggregation,
    );
    notes.extend(assignment.notes.iter().cloned());

    let mut stages: Vec<Vec<SearchDef>> = staging
        .stages
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(id, target, params)| make_def(id, target, params, vec![], space, settings))
                .collect()
        })
        .collect();

    let mut group_params: Vec<(Vec<String>, Vec<String>)> =
        vec![(vec![], vec![]); part.groups.len()];
    for (param, groups) in &assignment.tuned_in {
        for (k, &g) in groups.iter().enumerate() {
            group_params[g].0.push(param.clone());
            if k > 0 {
                group_params[g].1.push(param.clone());
            }
        }
    }
    let mut final_stage = Vec::new();
    for (g, (params, dups)) in part.groups.iter().zip(group_params) {
        if params.is_empty() {
            notes.push(format!("{}: nothing left to tune, no search", g.join("+")));
            continue;
        }
        final_stage.push(make_def(
            g.join("+"),
            Target::Routines(g.clone()),
            params,
            dups,
            space,
            settings,
        ));
    }
    if !final_stage.is_empty() {
        stages.push(final_stage);
    }

    let mut earlier: BTreeSet<String> = BTreeSet::new();
    let mut out = Vec::new();
    for stage in stages {
        let mut this_stage = BTreeSet::new();
        let mut searches = Vec::new();
        for def in stage {
            let mut def = apply_dim_cap(def, matrix, settings, space, &mut notes);
            def.budget = settings.budget_for(def.dims());
            def.inherited = def
                .fixed
                .iter()
                .filter(|(k, _)| earlier.contains(*k) && !def.dropped.0.contains_key(*k))
                .map(|(k, _)| k.clone())
                .collect();
            this_stage.extend(def.owned_parameters().cloned());
            searches.push(def);
        }
        earlier.extend(this_stage);
        out.push(Stage { searches });
    }
    let plan = SearchPlan {
        stages: out,
        settings: settings.clone(),
        notes,
    };
    plan.check(space)?;
    Ok(plan)
}

impl SearchPlan {
    pub fn searches(&self) -> impl Iterator<Item = &SearchDef> {
        self.stages.iter().flat_map(|s| s.searches.iter())
    }

    pub fn search(&self, id: &str) -> Option<&SearchDef> {
        self.searches().find(|s| s.id == id)
    }

    pub fn total_budget(&self) -> usize {
        self.searches().map(|s| s.budget).sum()
    }

    /// Checks the structural invariants: the cap holds, every parameter is
    /// tuned authoritatively exactly once or dropped exactly once, and
    /// sharing-constrained parameters are tuned in exactly one search.
    pub fn check(&self, space: &SearchSpace) -> Result<(), PlanError> {
        let mut owned: BTreeMap<&str, usize> = BTreeMap::new();
        let mut tuned: BTreeMap<&str, usize> = BTreeMap::new();
        let mut dropped: BTreeMap<&str, usize> = BTreeMap::new();
        for s in self.searches() {
            if s.dims() > self.settings.dim_cap {
                return Err(PlanError::Invariant(format!(
                    "{} tunes {} > cap",
                    s.id,
                    s.dims()
                )));
            }
            for p in &s.parameters {
                *tuned.entry(p).or_default() += 1;
                if s.fixed.get(p).is_some() {
                    return Err(PlanError::Invariant(format!(
                        "{p} both tuned and fixed in {}",
                        s.id
                    )));
                }
            }
            for p in s.owned_parameters() {
                *owned.entry(p).or_default() += 1;
            }
            for (p, _) in s.dropped.iter() {
                *dropped.entry(p).or_default() += 1;
            }
            if s.parameters.len() + s.fixed.len() != space.parameters().len() {
                return Err(PlanError::Invariant(format!(
                    "{} does not assign every parameter",
                    s.id
                )));
            }
        }
        let mut unaccounted = Vec::new();
        for p in space.parameters() {
            let o = owned.get(p.name.as_str()).copied().unwrap_or(0);
            let d = dropped.get(p.name.as_str()).copied().unwrap_or(0);
            if o + d > 1 {
                return Err(PlanError::Invariant(format!(
                    "{} is owned by several searches",
                    p.name
                )));
            }
            if o + d == 0 {
                unaccounted.push(p.name.as_str());
            }
            if p.shared_value_required && tuned.get(p.name.as_str()).copied().unwrap_or(0) > 1 {
                return Err(PlanError::Invariant(format!(
                    "shared {} tuned more than once",
                    p.name
                )));
            }
        }
        // Parameters nothing measured depends on are legitimately left at
        // their defaults, but only with a note saying so.
        for p in unaccounted {
            if !self.notes.iter().any(|n| n.starts_with(&format!("{p}:"))) {
                return Err(PlanError::Invariant(format!("{p} is not accounted for")));
            }
        }
        Ok(())
    }

    /// Human-readable summary.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "cutoff {:.2}, dimension cap {}, total budget {}",
            self.settings.cutoff,
            self.settings.dim_cap,
            self.total_budget()
        );
        for (i, stage) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "\nstage {}", i + 1);
            for d in &stage.searches {
                let _ = writeln!(
                    s,
                    "  {:<16} {:>2} dims  budget {:>4}  target {}",
                    d.id,
                    d.dims(),
                    d.budget,
                    d.target
                );
                let _ = writeln!(s, "    tuned: {}", d.parameters.join(", "));
                if !d.duplicates.is_empty() {
                    let _ = writeln!(s, "    tuned again here: {}", d.duplicates.join(", "));
                }
                if !d.dropped.is_empty() {
                    let dropped: Vec<String> =
                        d.dropped.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    let _ = writeln!(s, "    dropped: {}", dropped.join(", "));
                }
                if !d.inherited.is_empty() {
                    let _ = writeln!(s, "    from earlier stages: {}", d.inherited.join(", "));
                }
            }
        }
        if !self.notes.is_empty() {
            let _ = writeln!(s, "\nnotes:");
            for n in &self.notes {
                let _ = writeln!(s, "  - {n}");
            }
        }
        s
    }
}
