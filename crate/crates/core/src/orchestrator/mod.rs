//! Campaign execution: configuration, the evaluation log, staged plan
//! execution with resume and warm start, and the strategy comparison.

mod compare;
mod db;
mod execute;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use compare::{compare_strategies, Strategy, StrategyComparison, StrategyResult};
pub use db::{strip_timing, DbRecord, EvaluationDb, Recorder};
pub use execute::{
    execute_plan, run_sensitivity_logged, RunOptions, RunReport, SearchOutcome, StageOutcome,
    SENSITIVITY_ID,
};

use crate::analysis::{AnalysisError, SensitivitySettings};
use crate::objective::{synthetic_space, Evaluator, ExternalCommandSpec, Objective, SyntheticCase};
use crate::planner::{PlanError, PlannerSettings, SearchPlan};
use crate::search::{RefitSchedule, SearchError};
use crate::space::{SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid campaign: {0}")]
    Config(String),
    #[error("evaluation log belongs to campaign {found}, this campaign is {expected}; use another output directory")]
    ConfigMismatch { expected: String, found: String },
    #[error("warm-start records do not match the space: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("stage {stage}: search `{search}` failed: {reason}")]
    StageFailed {
        stage: usize,
        search: String,
        reason: String,
    },
    #[error("final configuration is invalid: {0}")]
    FinalInvalid(String),
    #[error("stopped after writing {written} evaluations")]
    Interrupted { written: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveSpec {
    Synthetic(SyntheticCase),
    External(ExternalCommandSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub candidate_pool: usize,
    pub refit: RefitSchedule,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            candidate_pool: 1000,
            refit: RefitSchedule::default(),
        }
    }
}

/// Budgets of the comparison strategies; unset values follow the planner's
/// budget rule on the strategy's dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    pub repeats: usize,
    pub joint_budget: Option<usize>,
    pub random_budget: Option<usize>,
    pub independent_budget: Option<usize>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            repeats: 5,
            joint_budget: None,
            random_budget: None,
            independent_budget: None,
        }
    }
}

fn default_name() -> String {
    "campaign".into()
}

fn default_parallel() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub objective: ObjectiveSpec,
    /// Required for external objectives; synthetic ones default to the
    /// bundled 20-variable space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default = "default_parallel")]
    pub parallel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start_db: Option<PathBuf>,
}

impl CampaignConfig {
    pub fn synthetic(case_id: u8, noise_stddev: f64, seed: u64) -> Self {
        Self {
            name: format!("synthetic-case-{case_id}"),
            seed,
            objective: ObjectiveSpec::Synthetic(SyntheticCase::new(case_id, noise_stddev, seed)),
            space: None,
            planner: PlannerSettings::default(),
            sensitivity: SensitivitySettings::default(),
            search: SearchSettings::default(),
            compare: CompareSettings::default(),
            parallel: 1,
            out_dir: None,
            warm_start_db: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    /// Reads a campaign file. Relative `out_dir` and `warm_start_db` paths
    /// are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.out_dir, &mut cfg.warm_start_db]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn space(&self) -> Result<SearchSpace, OrchestratorError> {
        match (&self.space, &self.objective) {
            (Some(s), _) => Ok(s.clone()),
            (None, ObjectiveSpec::Synthetic(_)) => Ok(synthetic_space()),
            (None, ObjectiveSpec::External(_)) => Err(OrchestratorError::Config(
                "an external objective needs a [space] section".into(),
            )),
        }
    }

    /// Hash of every setting that influences which configurations get
    /// evaluated and what they return. Name, parallel width, output
    /// directory and the repeat count are left out, and so are the planner
    /// settings that only shape the plan (cutoff, cap, aggregation):
    /// plan-driven searches are namespaced by [`plan_fingerprint`] instead,
    /// so one sensitivity log serves any number of cutoffs.
    pub fn digest(&self) -> Result<String, OrchestratorError> {
        #[derive(Serialize)]
        struct Relevant<'a> {
            seed: u64,
            objective: &'a ObjectiveSpec,
            space: &'a SearchSpace,
            sensitivity: &'a SensitivitySettings,
            search: &'a SearchSettings,
            budget_rule: (usize, usize, usize),
            joint_budget: Option<usize>,
            random_budget: Option<usize>,
            independent_budget: Option<usize>,
            warm_start_db: Option<&'a Path>,
        }
        let space = self.space()?;
        let json = serde_json::to_string(&Relevant {
            seed: self.seed,
            objective: &self.objective,
            space: &space,
            sensitivity: &self.sensitivity,
            search: &self.search,
            budget_rule: (
                self.planner.budget_multiplier,
                self.planner.budget_floor,
                self.planner.init_samples,
            ),
            joint_budget: self.compare.joint_budget,
            random_budget: self.compare.random_budget,
            independent_budget: self.compare.independent_budget,
            warm_start_db: self.warm_start_db.as_deref(),
        })
        .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    fn check(&self) -> Result<(), OrchestratorError> {
        if let ObjectiveSpec::Synthetic(s) = &self.objective {
            if !(1..=5).contains(&s.case_id) {
                return Err(OrchestratorError::Config(format!(
                    "synthetic case {} is not in 1..=5",
                    s.case_id
                )));
            }
            if !(s.noise_stddev >= 0.0 && s.noise_stddev.is_finite()) {
                return Err(OrchestratorError::Config(
                    "noise_stddev must be finite and ≥ 0".into(),
                ));
            }
        }
        if self.parallel == 0 {
            return Err(OrchestratorError::Config(
                "parallel must be at least 1".into(),
            ));
        }
        if self.search.candidate_pool == 0 {
            return Err(OrchestratorError::Config(
                "candidate_pool must be positive".into(),
            ));
        }
        if self.compare.repeats == 0 {
            return Err(OrchestratorError::Config(
                "compare.repeats must be positive".into(),
            ));
        }
        if !(self.planner.cutoff >= 0.0 && self.planner.cutoff.is_finite()) {
            return Err(OrchestratorError::Config(format!(
                "cutoff {} must be finite and ≥ 0",
                self.planner.cutoff
            )));
        }
        if self.planner.budget_multiplier == 0 {
            return Err(OrchestratorError::Config(
                "budget_multiplier must be positive".into(),
            ));
        }
        if self.planner.dim_cap == 0 {
            return Err(OrchestratorError::Config("dim_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Short hash of a plan's searches, used to namespace its search ids.
pub fn plan_fingerprint(plan: &SearchPlan) -> String {
    let json = serde_json::to_string(&plan.stages).expect("plans serialize");
    hex::encode(Sha256::digest(json.as_bytes()))[..8].to_string()
}

/// A validated campaign bound to its evaluator.
#[derive(Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub space: SearchSpace,
    pub evaluator: Arc<dyn Evaluator>,
    pub digest: String,
}

impl std::fmt::Debug for Campaign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Campaign")
            .field("name", &self.config.name)
            .field("digest", &self.digest)
            .finish_non_exhaustive()
    }
}

impl Campaign {
    pub fn new(config: CampaignConfig) -> Result<Self, OrchestratorError> {
        config.check()?;
        let space = config.space()?;
        let evaluator: Arc<dyn Evaluator> = match &config.objective {
            ObjectiveSpec::Synthetic(s) => Arc::new(Objective::Synthetic(*s)),
            ObjectiveSpec::External(e) => Arc::new(Objective::external(e.clone(), space.clone())),
        };
        Self::build(config, space, evaluator)
    }

    /// Same campaign with a caller-supplied evaluator in place of the
    /// configured objective.
    pub fn with_evaluator(
        config: CampaignConfig,
        evaluator: Arc<dyn Evaluator>,
    ) -> Result<Self, OrchestratorError> {
        config.check()?;
        let space = config.space()?;
        Self::build(config, space, evaluator)
    }

    fn build(
        config: CampaignConfig,
        space: SearchSpace,
        evaluator: Arc<dyn Evaluator>,
    ) -> Result<Self, OrchestratorError> {
        let digest = config.digest()?;
        Ok(Self {
            config,
            space,
            evaluator,
            digest,
        })
    }

    pub fn short_digest(&self) -> &str {
        &self.digest[..12]
    }

    /// Fails if `db` already holds records of another campaign.
    pub fn check_db(&self, db: &EvaluationDb) -> Result<(), OrchestratorError> {
        match db.digests().into_iter().find(|d| *d != self.digest) {
            Some(found) => Err(OrchestratorError::ConfigMismatch {
                expected: self.digest[..12].to_string(),
                found: found.chars().take(12).collect(),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMPAIGN: &str = r#"
name = "case3"
seed = 7
parallel = 2

[objective]
kind = "synthetic"
case_id = 3
noise_stddev = 0.1

[planner]
cutoff = 0.3

[sensitivity]
variations = 3
"#;

    #[test]
    fn parses_and_digests() {
        let cfg = CampaignConfig::from_toml_str(CAMPAIGN).unwrap();
        assert_eq!(cfg.planner.cutoff, 0.3);
        assert_eq!(cfg.planner.dim_cap, 10);
        assert_eq!(cfg.sensitivity.variations, 3);
        let c = Campaign::new(cfg.clone()).unwrap();
        assert_eq!(c.space.parameters().len(), 20);

        let mut other = cfg.clone();
        other.parallel = 1;
        other.name = "renamed".into();
        other.compare.repeats = 2;
        assert_eq!(other.digest().unwrap(), c.digest);
        other.seed = 8;
        assert_ne!(other.digest().unwrap(), c.digest);
        let mut cut = cfg.clone();
        cut.planner.cutoff = 0.31;
        assert_eq!(cut.digest().unwrap(), c.digest);
        let mut noisy = cfg;
        noisy.sensitivity.variations = 4;
        assert_ne!(noisy.digest().unwrap(), c.digest);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            format!("{CAMPAIGN}\nbogus = 1\n"),
            CAMPAIGN.replace("cutoff = 0.3", "cutof = 0.3"),
            CAMPAIGN.replace("noise_stddev", "noise"),
        ] {
            assert!(
                matches!(
                    CampaignConfig::from_toml_str(&bad),
                    Err(OrchestratorError::Config(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let cfg =
            CampaignConfig::from_toml_str(&CAMPAIGN.replace("case_id = 3", "case_id = 9")).unwrap();
        assert!(matches!(
            Campaign::new(cfg),
            Err(OrchestratorError::Config(_))
        ));
        let cfg = CampaignConfig::from_toml_str(&CAMPAIGN.replace("parallel = 2", "parallel = 0"))
            .unwrap();
        assert!(matches!(
            Campaign::new(cfg),
            Err(OrchestratorError::Config(_))
        ));
    }

    #[test]
    fn external_needs_a_space() {
        let cfg = CampaignConfig::from_toml_str(
            r#"
[objective]
kind = "external"
command_template = "true"
"#,
        )
        .unwrap();
        assert!(matches!(
            Campaign::new(cfg),
            Err(OrchestratorError::Config(_))
        ));
    }

    #[test]
    fn db_of_another_campaign_is_rejected() {
        let c = Campaign::new(CampaignConfig::synthetic(1, 0.0, 1)).unwrap();
        let mut db = EvaluationDb::in_memory();
        c.check_db(&db).unwrap();
        let rec =
            crate::objective::EvaluationRecord::ok(Default::default(), Default::default(), 1.0);
        db.append(DbRecord::new("0123456789abcdef", "s", 0, &rec))
            .unwrap();
        assert!(matches!(
            c.check_db(&db),
            Err(OrchestratorError::ConfigMismatch { .. })
        ));
    }
}
