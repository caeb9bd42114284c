use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::forest::{ForestParams, RegressionForest};
use super::AnalysisError;
use crate::objective::EvaluationRecord;
use crate::space::{ParamKind, SearchSpace, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonReport {
    pub parameters: Vec<String>,
    /// Parameter × parameter sample correlation.
    pub matrix: Vec<Vec<f64>>,
    /// Correlation of each parameter with the target metric.
    pub target: Vec<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub importance: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub one_in_ten_satisfied: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightReport {
    pub target: String,
    pub pearson: PearsonReport,
    pub importance: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub one_in_ten_satisfied: bool,
    pub notes: Vec<String>,
}

fn target_value(rec: &EvaluationRecord, target: &str) -> Option<f64> {
    if target == "total" {
        Some(rec.total)
    } else {
        rec.metric(target)
    }
}

fn usable<'a>(records: &'a [EvaluationRecord], target: &str) -> Vec<&'a EvaluationRecord> {
    records
        .iter()
        .filter(|r| r.is_ok() && target_value(r, target).is_some_and(f64::is_finite))
        .collect()
}

/// Sample correlation; `None` when either column is constant.
fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlations among numeric parameters and against `target`
/// (a routine name or `total`). Categorical parameters are excluded.
pub fn pearson_matrix(
    records: &[EvaluationRecord],
    target: &str,
    space: &SearchSpace,
) -> Result<PearsonReport, AnalysisError> {
    let ok = usable(records, target);
    if ok.len() < 3 {
        return Err(AnalysisError::InsufficientData {
            needed: 3,
            got: ok.len(),
        });
    }
    let mut notes = Vec::new();
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for p in space.parameters() {
        if matches!(p.kind, ParamKind::Categorical { .. }) {
            notes.push(format!(
                "{}: categorical, excluded from correlation",
                p.name
            ));
            continue;
        }
        names.push(p.name.clone());
        columns.push(
            ok.iter()
                .map(|r| r.config.num(&p.name).unwrap_or(f64::NAN))
                .collect::<Vec<_>>(),
        );
    }
    let y: Vec<f64> = ok
        .iter()
        .map(|r| target_value(r, target).unwrap())
        .collect();
    let n = names.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let degenerate: Vec<bool> = columns.iter().map(|c| pearson(c, c).is_none()).collect();
    for (i, name) in names.iter().enumerate() {
        if degenerate[i] {
            notes.push(format!(
                "{name}: degenerate column (constant), correlations set to 0"
            ));
        }
        for j in i..n {
            let v = if i == j {
                if degenerate[i] {
                    0.0
                } else {
                    1.0
                }
            } else {
                pearson(&columns[i], &columns[j]).unwrap_or(0.0)
            };
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
    }
    if pearson(&y, &y).is_none() {
        notes.push(format!("{target}: degenerate target (constant)"));
    }
    let target_corr = columns
        .iter()
        .map(|c| pearson(c, &y).unwrap_or(0.0))
        .collect();
    Ok(PearsonReport {
        parameters: names,
        matrix,
        target: target_corr,
        notes,
    })
}

/// Random-forest importance of each parameter for predicting `target`.
pub fn feature_importance(
    records: &[EvaluationRecord],
    target: &str,
    space: &SearchSpace,
    seed: u64,
) -> Result<ImportanceReport, AnalysisError> {
    let ok = usable(records, target);
    if ok.len() < 10 {
        return Err(AnalysisError::InsufficientData {
            needed: 10,
            got: ok.len(),
        });
    }
    let params = space.parameters();
    let x: Vec<Vec<f64>> = ok
        .iter()
        .map(|r| {
            params
                .iter()
                .map(|p| match (&p.kind, r.config.get(&p.name)) {
                    (ParamKind::Categorical { labels }, Some(Value::Label(l))) => {
                        labels.iter().position(|x| x == l).unwrap_or(0) as f64
                    }
                    (_, Some(Value::Num(v))) => *v,
                    _ => f64::NAN,
                })
                .collect()
        })
        .collect();
    let y: Vec<f64> = ok
        .iter()
        .map(|r| target_value(r, target).unwrap())
        .collect();
    let forest = RegressionForest::fit(&x, &y, ForestParams::default(), seed);
    let mut notes = Vec::new();
    if forest.degenerate() {
        notes.push(format!(
            "{target}: degenerate target, no variance to reduce; importance is uniform"
        ));
    }
    let one_in_ten = ok.len() >= 10 * params.len();
    if !one_in_ten {
        notes.push(format!(
            "one-in-ten rule not met: {} samples for {} parameters (need {})",
            ok.len(),
            params.len(),
            10 * params.len()
        ));
    }
    let importance = params
        .iter()
        .zip(forest.importances())
        .map(|(p, v)| (p.name.clone(), *v))
        .collect();
    Ok(ImportanceReport {
        importance,
        sample_count: ok.len(),
        one_in_ten_satisfied: one_in_ten,
        notes,
    })
}

pub fn insights(
    records: &[EvaluationRecord],
    target: &str,
    space: &SearchSpace,
    seed: u64,
) -> Result<InsightReport, AnalysisError> {
    let pearson = pearson_matrix(records, target, space)?;
    let imp = feature_importance(records, target, space, seed)?;
    let mut notes = pearson.notes.clone();
    notes.extend(imp.notes);
    Ok(InsightReport {
        target: target.to_string(),
        pearson,
        importance: imp.importance,
        sample_count: imp.sample_count,
        one_in_ten_satisfied: imp.one_in_ten_satisfied,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Configuration, ParameterSpec, RoutineDecl};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(n: usize) -> SearchSpace {
        SearchSpace::new(
            vec![RoutineDecl::new("r")],
            (0..n)
                .map(|i| ParameterSpec {
                    name: format!("p{i}"),
                    kind: ParamKind::Real {
                        lo: -100.0,
                        hi: 100.0,
                    },
                    default: Value::Num(0.0),
                    owner: "r".into(),
                    shared_value_required: false,
                    used_by: vec![],
                })
                .collect(),
            vec![],
        )
        .unwrap()
    }

    fn rec(values: &[f64], y: f64) -> EvaluationRecord {
        let cfg: Configuration = values
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("p{i}"), Value::Num(*v)))
            .collect();
        EvaluationRecord::ok(cfg, BTreeMap::from([("r".to_string(), y)]), y)
    }

    #[test]
    fn perfect_linear_relations() {
        let records: Vec<_> = (0..10)
            .map(|i| {
                let a = i as f64 * 1.7 - 3.0;
                rec(&[a, 2.0 * a, -a, 4.0], a * a)
            })
            .collect();
        let rep = pearson_matrix(&records, "r", &space(4)).unwrap();
        assert!((rep.matrix[0][1] - 1.0).abs() < 1e-9);
        assert!((rep.matrix[0][2] + 1.0).abs() < 1e-9);
        assert_eq!(rep.matrix[3][0], 0.0);
        assert_eq!(rep.matrix[3][3], 0.0);
        assert!(rep
            .notes
            .iter()
            .any(|n| n.contains("p3") && n.contains("degenerate")));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(rep.matrix[i][j], rep.matrix[j][i]);
            }
        }
        assert_eq!(rep.matrix[0][0], 1.0);
    }

    #[test]
    fn too_few_records() {
        let records = vec![rec(&[1.0], 1.0), rec(&[2.0], 2.0)];
        assert_eq!(
            pearson_matrix(&records, "r", &space(1)),
            Err(AnalysisError::InsufficientData { needed: 3, got: 2 })
        );
        assert!(matches!(
            feature_importance(&records, "r", &space(1), 0),
            Err(AnalysisError::InsufficientData { needed: 10, .. })
        ));
    }

    fn dataset(n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Vec<EvaluationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-100.0..100.0)).collect();
                let y = f(&x);
                rec(&x, y)
            })
            .collect()
    }

    #[test]
    fn importance_finds_the_informative_parameter() {
        let records = dataset(200, 3, |x| x[0]);
        let rep = feature_importance(&records, "r", &space(5), 17).unwrap();
        assert!(rep.importance["p0"] >= 0.9, "{:?}", rep.importance);
        assert!((rep.importance.values().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(!rep.one_in_ten_satisfied || rep.sample_count >= 50);
    }

    #[test]
    fn importance_constant_target_is_uniform() {
        let records = dataset(50, 4, |_| 7.0);
        let rep = feature_importance(&records, "r", &space(5), 1).unwrap();
        for v in rep.importance.values() {
            assert!((v - 0.2).abs() <= 0.05);
        }
        assert!(rep.notes.iter().any(|n| n.contains("degenerate")));
    }

    #[test]
    fn importance_symmetric_pair() {
        let records = dataset(500, 5, |x| x[0] + x[1]);
        let rep = feature_importance(&records, "r", &space(5), 2).unwrap();
        assert!(
            (rep.importance["p0"] - rep.importance["p1"]).abs() <= 0.15,
            "{:?}",
            rep.importance
        );
    }

    #[test]
    fn one_in_ten_flag() {
        let rep = feature_importance(&dataset(20, 1, |x| x[2]), "r", &space(5), 0).unwrap();
        assert!(!rep.one_in_ten_satisfied);
        let rep = feature_importance(&dataset(60, 1, |x| x[2]), "r", &space(5), 0).unwrap();
        assert!(rep.one_in_ten_satisfied);
    }
}
