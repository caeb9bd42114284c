use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::objective::{EvalContext, EvaluationRecord, Evaluator};
use crate::rng::{hash_str, rng_from};
use crate::space::{Configuration, ParamKind, SearchSpace, Value};

/// How the variations of a single parameter are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VariationStrategy {
    /// Variation `i` multiplies the baseline value by `factor^i`, snapped to
    /// the nearest in-domain value. Values repeating the baseline or an
    /// earlier variation are skipped. Categoricals enumerate other labels.
    MultiplicativeStep {
        #[serde(default = "default_factor")]
        factor: f64,
    },
    /// Exactly `variations` values per parameter.
    ExplicitList {
        values: BTreeMap<String, Vec<Value>>,
    },
    RandomInDomain,
}

fn default_factor() -> f64 {
    1.10
}

impl Default for VariationStrategy {
    fn default() -> Self {
        VariationStrategy::MultiplicativeStep {
            factor: default_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySettings {
    #[serde(default = "default_variations")]
    pub variations: usize,
    #[serde(default)]
    pub strategy: VariationStrategy,
    /// Fixed baseline; when absent a random valid configuration is drawn
    /// from the campaign seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Configuration>,
}

fn default_variations() -> usize {
    5
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self {
            variations: default_variations(),
            strategy: VariationStrategy::default(),
            baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub parameter: usize,
    pub value: Value,
    pub config: Configuration,
}

/// The evaluation schedule of a sensitivity run: the baseline (index 0)
/// followed by every retained variation (index 1..).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityDesign {
    pub routines: Vec<String>,
    pub parameters: Vec<String>,
    pub baseline: Configuration,
    pub variations: Vec<Variation>,
    pub notes: Vec<String>,
}

impl SensitivityDesign {
    pub fn configurations(&self) -> Vec<Configuration> {
        std::iter::once(self.baseline.clone())
            .chain(self.variations.iter().map(|v| v.config.clone()))
            .collect()
    }

    pub fn evaluation_count(&self) -> usize {
        1 + self.variations.len()
    }
}

/// Routine × parameter table of average relative variability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub routines: Vec<String>,
    pub parameters: Vec<String>,
    /// `variability[r][p]`; `None` when no variation of `p` produced a
    /// usable measurement of `r`.
    pub variability: Vec<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_record: Option<EvaluationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sample_records: Vec<EvaluationRecord>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl InfluenceMatrix {
    /// Builds a matrix from hand-entered rows, e.g. transcribed measurements.
    /// Parameters missing from a row are recorded as 0.
    pub fn from_rows(
        routines: &[&str],
        parameters: &[String],
        rows: &[&[(&str, f64)]],
    ) -> Result<Self, AnalysisError> {
        if rows.len() != routines.len() {
            return Err(AnalysisError::Settings(
                "one row per routine expected".into(),
            ));
        }
        let mut variability = Vec::with_capacity(rows.len());
        for row in rows {
            let mut values = vec![Some(0.0); parameters.len()];
            for (name, v) in row.iter() {
                let j = parameters.iter().position(|p| p == name).ok_or_else(|| {
                    AnalysisError::Settings(format!("unknown parameter `{name}` in row"))
                })?;
                values[j] = Some(*v);
            }
            variability.push(values);
        }
        Ok(Self {
            routines: routines.iter().map(|s| s.to_string()).collect(),
            parameters: parameters.to_vec(),
            variability,
            baseline_record: None,
            sample_records: vec![],
            notes: vec![],
        })
    }

    pub fn routine_index(&self, routine: &str) -> Option<usize> {
        self.routines.iter().position(|r| r == routine)
    }

    pub fn parameter_index(&self, parameter: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p == parameter)
    }

    /// `None` if either name is absent; `Some(None)` for an unknown entry.
    pub fn get(&self, routine: &str, parameter: &str) -> Option<Option<f64>> {
        let r = self.routine_index(routine)?;
        let p = self.parameter_index(parameter)?;
        Some(self.variability[r][p])
    }

    /// Parameters of one routine's row, most influential first. Unknown
    /// entries sort last.
    pub fn ranking(&self, routine: &str) -> Vec<(String, Option<f64>)> {
        let Some(r) = self.routine_index(routine) else {
            return vec![];
        };
        let mut out: Vec<_> = self
            .parameters
            .iter()
            .cloned()
            .zip(self.variability[r].iter().copied())
            .collect();
        out.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        out
    }

    /// Plain-text table, one row per parameter, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let width = self
            .parameters
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(9)
            .max(9);
        let _ = write!(s, "{:width$}", "parameter");
        for r in &self.routines {
            let _ = write!(s, " {r:>12}");
        }
        s.push('\n');
        for (j, p) in self.parameters.iter().enumerate() {
            let _ = write!(s, "{p:width$}");
            for row in &self.variability {
                match row[j] {
                    Some(v) => {
                        let _ = write!(s, " {:>11.2}%", v * 100.0);
                    }
                    None => {
                        let _ = write!(s, " {:>12}", "unknown");
                    }
                }
            }
            s.push('\n');
        }
        s.push_str("(each routine row is normalized by that routine's own baseline)\n");
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn resolve_baseline(
    space: &SearchSpace,
    settings: &SensitivitySettings,
    seed: u64,
) -> Result<Configuration, AnalysisError> {
    match &settings.baseline {
        Some(b) => {
            // Unassigned parameters take their defaults.
            let mut cfg = space.default_configuration();
            for (k, v) in b.iter() {
                cfg.set(k.clone(), v.clone());
            }
            if !space.validate(&cfg)? {
                return Err(AnalysisError::Settings(
                    "baseline configuration is not valid".into(),
                ));
            }
            Ok(cfg)
        }
        None => Ok(space.sample_random(1, seed)?.remove(0)),
    }
}

fn candidate_values(
    kind: &ParamKind,
    name: &str,
    base: &Value,
    settings: &SensitivitySettings,
    seed: u64,
) -> Result<(Vec<Value>, usize), AnalysisError> {
    let v = settings.variations;
    match &settings.strategy {
        VariationStrategy::MultiplicativeStep { factor } => match (kind, base) {
            (ParamKind::Categorical { labels }, Value::Label(b)) => {
                let vals: Vec<Value> = labels
                    .iter()
                    .filter(|l| *l != b)
                    .take(v)
                    .map(|l| Value::Label(l.clone()))
                    .collect();
                let skipped = v - vals.len();
                Ok((vals, skipped))
            }
            (_, Value::Num(b)) => {
                let mut seen: Vec<f64> = vec![*b];
                let mut out = Vec::new();
                let mut current = *b;
                for _ in 0..v {
                    current *= factor;
                    let snapped = kind.nearest(current).expect("numeric kind");
                    if !seen.contains(&snapped) {
                        seen.push(snapped);
                        out.push(Value::Num(snapped));
                    }
                }
                let skipped = v - out.len();
                Ok((out, skipped))
            }
            _ => Err(AnalysisError::Settings(format!(
                "baseline value of `{name}` has the wrong type"
            ))),
        },
        VariationStrategy::ExplicitList { values } => {
            let list = values.get(name).ok_or_else(|| {
                AnalysisError::Settings(format!("no explicit variations for `{name}`"))
            })?;
            if list.len() != v {
                return Err(AnalysisError::Settings(format!(
                    "`{name}` lists {} variations, expected {v}",
                    list.len()
                )));
            }
            Ok((list.clone(), 0))
        }
        VariationStrategy::RandomInDomain => {
            let mut rng = rng_from(seed, &[hash_str(name), 0x7a11]);
            Ok(((0..v).map(|_| kind.sample(&mut rng)).collect(), 0))
        }
    }
}

/// Generates the baseline and every one-at-a-time variation. Variations that
/// are invalid in the space are left out and noted.
pub fn design_sensitivity(
    space: &SearchSpace,
    routines: &[String],
    settings: &SensitivitySettings,
    seed: u64,
) -> Result<SensitivityDesign, AnalysisError> {
    if settings.variations == 0 {
        return Err(AnalysisError::Settings(
            "at least one variation per parameter is required".into(),
        ));
    }
    for r in routines {
        if space.routine(r).is_none() {
            return Err(AnalysisError::Settings(format!("unknown routine `{r}`")));
        }
    }
    let baseline = resolve_baseline(space, settings, seed)?;
    let mut variations = Vec::new();
    let mut notes = Vec::new();
    for (pi, p) in space.parameters().iter().enumerate() {
        let base = baseline
            .get(&p.name)
            .expect("baseline assigns every parameter");
        let (values, duplicates) = candidate_values(&p.kind, &p.name, base, settings, seed)?;
        let mut invalid = 0;
        for value in values {
            let mut cfg = baseline.clone();
            cfg.set(p.name.clone(), value.clone());
            if space.validate(&cfg)? {
                variations.push(Variation {
                    parameter: pi,
                    value,
                    config: cfg,
                });
            } else {
                invalid += 1;
            }
        }
        if duplicates > 0 {
            notes.push(format!(
                "{}: {duplicates} of {} variations coincide with earlier values after snapping to the domain",
                p.name, settings.variations
            ));
        }
        if invalid > 0 {
            notes.push(format!(
                "{}: {invalid} variations violate the space and were skipped",
                p.name
            ));
        }
    }
    Ok(SensitivityDesign {
        routines: routines.to_vec(),
        parameters: space.parameter_names(),
        baseline,
        variations,
        notes,
    })
}

/// Applies the average relative variability formula,
/// `(1/V)·Σ |(t_base − t_i) / t_base|`, per routine and parameter over the
/// variations that evaluated successfully.
pub fn assemble_influence(
    design: &SensitivityDesign,
    baseline: EvaluationRecord,
    variations: Vec<EvaluationRecord>,
) -> Result<InfluenceMatrix, AnalysisError> {
    assert_eq!(
        variations.len(),
        design.variations.len(),
        "one record per variation"
    );
    if !baseline.is_ok() {
        return Err(AnalysisError::BaselineFailed(
            baseline
                .note
                .clone()
                .unwrap_or_else(|| format!("{:?}", baseline.status)),
        ));
    }
    let mut base_metrics = Vec::with_capacity(design.routines.len());
    for r in &design.routines {
        match baseline.metric(r) {
            Some(0.0) => return Err(AnalysisError::ZeroBaseline(r.clone())),
            Some(v) => base_metrics.push(v),
            None => {
                return Err(AnalysisError::BaselineFailed(format!(
                    "no metric reported for routine `{r}`"
                )))
            }
        }
    }
    let np = design.parameters.len();
    let nr = design.routines.len();
    let mut sums = vec![vec![0.0; np]; nr];
    let mut counts = vec![vec![0usize; np]; nr];
    let mut failed: BTreeMap<usize, usize> = BTreeMap::new();
    for (var, rec) in design.variations.iter().zip(&variations) {
        if !rec.is_ok() {
            *failed.entry(var.parameter).or_default() += 1;
            continue;
        }
        for (ri, r) in design.routines.iter().enumerate() {
            if let Some(t) = rec.metric(r) {
                let b = base_metrics[ri];
                sums[ri][var.parameter] += ((b - t) / b).abs();
                counts[ri][var.parameter] += 1;
            }
        }
    }
    let variability: Vec<Vec<Option<f64>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(&sum, &n)| (n > 0).then(|| sum / n as f64))
                .collect()
        })
        .collect();

    let mut notes = design.notes.clone();
    for (p, n) in &failed {
        notes.push(format!(
            "{}: {n} variation evaluations failed and were excluded",
            design.parameters[*p]
        ));
    }
    let unknown: BTreeSet<&str> = (0..np)
        .filter(|&p| variability.iter().any(|row| row[p].is_none()))
        .map(|p| design.parameters[p].as_str())
        .collect();
    for p in unknown {
        notes.push(format!("{p}: no usable variation; variability unknown"));
    }
    Ok(InfluenceMatrix {
        routines: design.routines.clone(),
        parameters: design.parameters.clone(),
        variability,
        baseline_record: Some(baseline),
        sample_records: variations,
        notes,
    })
}

/// Measures every routine in `routines` under one-at-a-time variations of
/// every parameter. Variation evaluations are independent and run on the
/// rayon pool.
pub fn run_sensitivity(
    space: &SearchSpace,
    routines: &[String],
    settings: &SensitivitySettings,
    seed: u64,
    evaluator: &dyn Evaluator,
) -> Result<InfluenceMatrix, AnalysisError> {
    let design = design_sensitivity(space, routines, settings, seed)?;
    let search_id = "sensitivity";
    let baseline = evaluator.evaluate(
        EvalContext {
            search_id,
            index: 0,
        },
        &design.baseline,
    );
    if !baseline.is_ok() {
        return Err(AnalysisError::BaselineFailed(
            baseline
                .note
                .clone()
                .unwrap_or_else(|| format!("{:?}", baseline.status)),
        ));
    }
    let records: Vec<EvaluationRecord> = design
        .variations
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            evaluator.evaluate(
                EvalContext {
                    search_id,
                    index: i as u64 + 1,
                },
                &v.config,
            )
        })
        .collect();
    assemble_influence(&design, baseline, records)
}
