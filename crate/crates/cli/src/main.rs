use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use tunesplit_core::analysis::{insights, AnalysisError, InfluenceMatrix, InsightReport};
use tunesplit_core::orchestrator::{
    compare_strategies, execute_plan, run_sensitivity_logged, Campaign, CampaignConfig,
    EvaluationDb, OrchestratorError, RunOptions, RunReport, StrategyComparison,
};
use tunesplit_core::planner::{build_graph, emit_plan, PlanError, SearchPlan};

const MATRIX_FILE: &str = "influence.matrix";
const PLAN_FILE: &str = "plan.machine";
const COMPARISON_FILE: &str = "comparison.machine";
const RUN_FILE: &str = "run.machine";
const INSIGHTS_FILE: &str = "insights.machine";
const DB_FILE: &str = "evals.db";
const DEFAULT_OUT: &str = "tunesplit-out";

#[derive(Parser)]
#[command(
    name = "tunesplit",
    version,
    about = "Sensitivity-driven planning and execution of autotuning campaigns"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// Campaign seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Influence cutoff for merging routines.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Evaluations per tuned parameter.
    #[arg(long)]
    budget_multiplier: Option<usize>,
    /// Worker threads for concurrent searches and evaluations.
    #[arg(long)]
    parallel: Option<usize>,
    /// Output directory (default: the campaign's `out_dir`, else ./tunesplit-out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Require an existing evaluation log for this campaign and continue it.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Measure per-routine parameter influence; writes influence.matrix.
    Sensitivity {
        campaign: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Correlation and forest importance over the logged evaluations.
    Insights {
        campaign: PathBuf,
        /// `total` or a routine name.
        #[arg(long, default_value = "total")]
        target: String,
        #[command(flatten)]
        over: Overrides,
    },
    /// Turn an influence matrix into staged searches; writes plan.machine.
    Plan {
        campaign: PathBuf,
        /// Influence matrix (default: <out>/influence.matrix).
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Execute a plan; writes run.machine.
    Run {
        campaign: PathBuf,
        /// Plan file (default: <out>/plan.machine).
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Compare the four strategies on a bundled synthetic case.
    Bench {
        /// Synthetic case 1..=5.
        #[arg(long)]
        case: u8,
        /// Standard deviation of the additive noise terms.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Compare the four strategies on a campaign; writes comparison.machine.
    Compare {
        campaign: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        over: Overrides,
    },
    /// Print the human-readable reports of an output directory.
    Report {
        campaign: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
    },
}

/// Exit code 1: the user's input is wrong. Exit code 2: running failed.
enum Failure {
    User(String),
    Runtime(String),
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as E;
        match e {
            E::Config(_)
            | E::ConfigMismatch { .. }
            | E::SchemaMismatch(_)
            | E::Parse(_)
            | E::Space(_)
            | E::Plan(_)
            | E::Analysis(_) => Failure::User(e.to_string()),
            E::Io(_)
            | E::Search(_)
            | E::StageFailed { .. }
            | E::FinalInvalid(_)
            | E::Interrupted { .. } => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        Failure::User(e.to_string())
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::User(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Session {
    campaign: Campaign,
    out: PathBuf,
}

fn check_overrides(o: &Overrides) -> Outcome {
    if let Some(c) = o.cutoff {
        if !c.is_finite() || c < 0.0 {
            return Err(Failure::User(format!(
                "--cutoff {c}: must be a finite value ≥ 0"
            )));
        }
    }
    if o.budget_multiplier == Some(0) {
        return Err(Failure::User(
            "--budget-multiplier must be at least 1".into(),
        ));
    }
    if o.parallel == Some(0) {
        return Err(Failure::User("--parallel must be at least 1".into()));
    }
    Ok(())
}

fn apply(mut cfg: CampaignConfig, o: &Overrides) -> Result<Session, Failure> {
    check_overrides(o)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(c) = o.cutoff {
        cfg.planner.cutoff = c;
    }
    if let Some(m) = o.budget_multiplier {
        cfg.planner.budget_multiplier = m;
    }
    if let Some(p) = o.parallel {
        cfg.parallel = p;
    }
    let out = o
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let campaign = Campaign::new(cfg)?;
    Ok(Session { campaign, out })
}

fn session(path: &Path, o: &Overrides) -> Result<Session, Failure> {
    if !path.exists() {
        return Err(Failure::User(format!(
            "campaign file {} not found",
            path.display()
        )));
    }
    apply(CampaignConfig::load(path)?, o)
}

impl Session {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn open_db(&self, resume: bool) -> Result<EvaluationDb, Failure> {
        let path = self.file(DB_FILE);
        if resume && !path.exists() {
            return Err(Failure::User(format!(
                "--resume: {} does not exist",
                path.display()
            )));
        }
        let db = EvaluationDb::open(&path)?;
        for n in &db.notes {
            eprintln!("note: {n}");
        }
        self.campaign.check_db(&db)?;
        if resume && !db.digests().contains(&self.campaign.digest.as_str()) {
            return Err(Failure::User(format!(
                "--resume: {} holds no records of this campaign",
                path.display()
            )));
        }
        Ok(db)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Outcome {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        self.write(name, &(text + "\n"))
    }

    fn write(&self, name: &str, text: &str) -> Outcome {
        fs::create_dir_all(&self.out)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", self.out.display())))?;
        let path = self.file(name);
        fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::User(format!("{what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::User(format!("{what} {}: {e}", path.display())))
}

fn cmd_sensitivity(s: &Session, resume: bool) -> Outcome {
    let mut db = s.open_db(resume)?;
    let matrix = run_sensitivity_logged(&s.campaign, &mut db, RunOptions::default())?;
    s.write_json(MATRIX_FILE, &matrix)?;
    let table = matrix.to_table();
    s.write("influence.txt", &table)?;
    print!("{table}");
    println!("wrote {}", s.file(MATRIX_FILE).display());
    Ok(())
}

fn insight_text(r: &InsightReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "target {}: {} samples{}",
        r.target,
        r.sample_count,
        if r.one_in_ten_satisfied {
            ""
        } else {
            " (fewer than 10 per parameter)"
        }
    );
    let mut ranked: Vec<(&String, &f64)> = r.importance.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(a.1));
    let corr: BTreeMap<&String, f64> = r
        .pearson
        .parameters
        .iter()
        .zip(r.pearson.target.iter().copied())
        .collect();
    let _ = writeln!(
        s,
        "{:<24} {:>10} {:>12}",
        "parameter", "importance", "correlation"
    );
    for (p, v) in ranked {
        let c = corr.get(p).map_or("-".to_string(), |c| format!("{c:+.3}"));
        let _ = writeln!(s, "{p:<24} {v:>10.4} {c:>12}");
    }
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

fn cmd_insights(s: &Session, target: &str) -> Outcome {
    let path = s.file(DB_FILE);
    if !path.exists() {
        return Err(Failure::User(format!(
            "{} not found; run `sensitivity` or `run` first",
            path.display()
        )));
    }
    let db = EvaluationDb::load(&path)?;
    s.campaign.check_db(&db)?;
    let records: Vec<_> = db
        .records()
        .iter()
        .filter(|r| r.campaign_digest == s.campaign.digest)
        .map(|r| r.to_evaluation())
        .collect();
    let report = insights(&records, target, &s.campaign.space, s.campaign.config.seed)?;
    s.write_json(INSIGHTS_FILE, &report)?;
    print!("{}", insight_text(&report));
    Ok(())
}

fn cmd_plan(s: &Session, matrix: Option<PathBuf>) -> Outcome {
    let path = matrix.unwrap_or_else(|| s.file(MATRIX_FILE));
    if !path.exists() {
        return Err(Failure::User(format!(
            "influence matrix {} not found; run `sensitivity` first",
            path.display()
        )));
    }
    let matrix: InfluenceMatrix = read_json(&path, "influence matrix")?;
    let settings = &s.campaign.config.planner;
    let graph = build_graph(&matrix, &s.campaign.space)?;
    let plan = emit_plan(&s.campaign.space, &matrix, settings)?;
    print!("{}", graph.to_report(&s.campaign.space, settings.cutoff));
    println!();
    let report = plan_text(&plan);
    print!("{report}");
    s.write_json(PLAN_FILE, &plan)?;
    s.write("plan.txt", &report)?;
    println!("wrote {}", s.file(PLAN_FILE).display());
    Ok(())
}

fn plan_text(plan: &SearchPlan) -> String {
    let mut r = plan.to_report();
    for n in &plan.notes {
        let _ = writeln!(r, "note: {n}");
    }
    r
}

fn cmd_run(s: &Session, plan: Option<PathBuf>, resume: bool) -> Outcome {
    let path = plan.unwrap_or_else(|| s.file(PLAN_FILE));
    if !path.exists() {
        return Err(Failure::User(format!(
            "plan {} not found; run `plan` first",
            path.display()
        )));
    }
    let plan: SearchPlan = read_json(&path, "plan")?;
    let mut db = s.open_db(resume)?;
    let report = execute_plan(&plan, &s.campaign, &mut db, RunOptions::default())?;
    s.write_json(RUN_FILE, &report)?;
    let text = report.to_text();
    s.write("run.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_compare(s: &Session, resume: bool) -> Outcome {
    let mut db = s.open_db(resume)?;
    let cmp = compare_strategies(&s.campaign, &mut db, RunOptions::default())?;
    s.write_json(COMPARISON_FILE, &cmp)?;
    let text = cmp.to_table();
    s.write("comparison.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_report(out: &Path) -> Outcome {
    if !out.is_dir() {
        return Err(Failure::User(format!(
            "output directory {} not found",
            out.display()
        )));
    }
    let mut text = String::new();
    let mut any = false;
    let path = out.join(MATRIX_FILE);
    if path.exists() {
        let m: InfluenceMatrix = read_json(&path, "influence matrix")?;
        let _ = writeln!(text, "== influence ==\n{}", m.to_table());
        any = true;
    }
    let path = out.join(PLAN_FILE);
    if path.exists() {
        let p: SearchPlan = read_json(&path, "plan")?;
        let _ = writeln!(text, "== plan ==\n{}", plan_text(&p));
        any = true;
    }
    let path = out.join(RUN_FILE);
    if path.exists() {
        let r: RunReport = read_json(&path, "run report")?;
        let _ = writeln!(text, "== run ==\n{}", r.to_text());
        any = true;
    }
    let path = out.join(COMPARISON_FILE);
    if path.exists() {
        let c: StrategyComparison = read_json(&path, "comparison")?;
        let _ = writeln!(text, "== comparison ==\n{}", c.to_table());
        any = true;
    }
    let path = out.join(DB_FILE);
    if path.exists() {
        let db = EvaluationDb::load(&path)?;
        let _ = writeln!(text, "== evaluation log ==\n{} records", db.len());
        for d in db.digests() {
            let ids = db.search_ids(d);
            let _ = writeln!(
                text,
                "campaign {}: {} searches",
                &d[..12.min(d.len())],
                ids.len()
            );
            for id in ids {
                let _ = writeln!(text, "  {id:<40} {}", db.history(d, &id).len());
            }
        }
        any = true;
    }
    if !any {
        return Err(Failure::User(format!(
            "nothing to report in {}",
            out.display()
        )));
    }
    print!("{text}");
    fs::write(out.join("report.txt"), &text).map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Sensitivity { campaign, over } => {
            cmd_sensitivity(&session(&campaign, &over)?, over.resume)
        }
        Command::Insights {
            campaign,
            target,
            over,
        } => cmd_insights(&session(&campaign, &over)?, &target),
        Command::Plan {
            campaign,
            matrix,
            over,
        } => cmd_plan(&session(&campaign, &over)?, matrix),
        Command::Run {
            campaign,
            plan,
            over,
        } => cmd_run(&session(&campaign, &over)?, plan, over.resume),
        Command::Bench {
            case,
            noise,
            repeats,
            over,
        } => {
            if !(1..=5).contains(&case) {
                return Err(Failure::User(format!(
                    "--case {case}: synthetic cases are 1..=5"
                )));
            }
            if !noise.is_finite() || noise < 0.0 {
                return Err(Failure::User(format!(
                    "--noise {noise}: must be finite and ≥ 0"
                )));
            }
            let mut cfg = CampaignConfig::synthetic(case, noise, over.seed.unwrap_or(1));
            if let Some(r) = repeats {
                cfg.compare.repeats = r;
            }
            cmd_compare(&apply(cfg, &over)?, over.resume)
        }
        Command::Compare {
            campaign,
            repeats,
            over,
        } => {
            let mut s = session(&campaign, &over)?;
            if let Some(r) = repeats {
                if r == 0 {
                    return Err(Failure::User("--repeats must be at least 1".into()));
                }
                s.campaign.config.compare.repeats = r;
            }
            cmd_compare(&s, over.resume)
        }
        Command::Report { campaign, over } => {
            let out = match (&over.out, campaign) {
                (Some(o), _) => o.clone(),
                (None, Some(c)) => session(&c, &over)?.out,
                (None, None) => PathBuf::from(DEFAULT_OUT),
            };
            cmd_report(&out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
