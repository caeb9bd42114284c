//! Runs an external command per configuration and parses metric lines from
//! its stdout.
//!
//! Parameters reach the command twice: `{name}` placeholders in the command
//! template are replaced by the canonical rendering of the value, and each
//! parameter is exported as `<env_prefix><NAME>`. The command reports
//! results as lines of the form `metric <name>=<number>`.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{EvalContext, EvaluationRecord, Evaluator, Status};
use crate::space::{Configuration, SearchSpace};

pub const METRIC_PATTERN: &str =
    r"^metric[ \t]+([A-Za-z0-9_.]+)=(-?[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?)$";

fn metric_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(METRIC_PATTERN).expect("metric pattern compiles"))
}

/// Parses one stdout line; `None` for lines outside the protocol.
pub fn parse_metric_line(line: &str) -> Option<(String, f64)> {
    let caps = metric_regex().captures(line)?;
    let value = caps[2].parse::<f64>().ok()?;
    Some((caps[1].to_string(), value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCommandSpec {
    pub command_template: String,
    #[serde(default = "default_prefix")]
    pub env_prefix: String,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    #[serde(default = "default_repeat")]
    pub repeat: u32,
}

fn default_prefix() -> String {
    "TUNE_".into()
}

fn default_timeout() -> f64 {
    900.0
}

fn default_repeat() -> u32 {
    1
}

impl ExternalCommandSpec {
    pub fn new(command_template: impl Into<String>) -> Self {
        Self {
            command_template: command_template.into(),
            env_prefix: default_prefix(),
            timeout_seconds: default_timeout(),
            working_dir: None,
            repeat: 1,
        }
    }

    pub fn render(&self, config: &Configuration) -> String {
        config
            .iter()
            .fold(self.command_template.clone(), |cmd, (name, value)| {
                cmd.replace(&format!("{{{name}}}"), &value.to_string())
            })
    }
}

#[derive(Debug, Clone)]
pub struct ExternalObjective {
    spec: ExternalCommandSpec,
    space: SearchSpace,
}

enum RunOutcome {
    Finished {
        code: Option<i32>,
        stdout: String,
        stderr: String,
    },
    TimedOut,
    SpawnFailed(String),
}

impl ExternalObjective {
    pub fn new(spec: ExternalCommandSpec, space: SearchSpace) -> Self {
        Self { spec, space }
    }

    pub fn spec(&self) -> &ExternalCommandSpec {
        &self.spec
    }

    fn run_once(&self, command: &str, config: &Configuration) -> RunOutcome {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(command)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        if let Some(dir) = &self.spec.working_dir {
            cmd.current_dir(dir);
        }
        for (name, value) in config.iter() {
            cmd.env(
                format!("{}{}", self.spec.env_prefix, name.to_uppercase()),
                value.to_string(),
            );
        }
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => return RunOutcome::SpawnFailed(e.to_string()),
        };
        let mut out_pipe = child.stdout.take().expect("stdout piped");
        let mut err_pipe = child.stderr.take().expect("stderr piped");
        let out_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = out_pipe.read_to_string(&mut s);
            s
        });
        let err_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });

        let deadline = Instant::now() + Duration::from_secs_f64(self.spec.timeout_seconds);
        loop {
            match child.try_wait() {
                Ok(Some(status)) => {
                    let stdout = out_reader.join().unwrap_or_default();
                    let stderr = err_reader.join().unwrap_or_default();
                    return RunOutcome::Finished {
                        code: status.code(),
                        stdout,
                        stderr,
                    };
                }
                Ok(None) if Instant::now() >= deadline => {
                    // Kill the whole process group so grandchildren release the pipes.
                    unsafe {
                        libc::kill(-(child.id() as i32), libc::SIGKILL);
                    }
                    let _ = child.kill();
                    let _ = child.wait();
                    return RunOutcome::TimedOut;
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
                Err(e) => return RunOutcome::SpawnFailed(e.to_string()),
            }
        }
    }

    fn parse(stdout: &str) -> BTreeMap<String, f64> {
        stdout
            .lines()
            .filter_map(|l| parse_metric_line(l.trim_end_matches('\r')))
            .collect()
    }

    pub fn run(&self, config: &Configuration) -> EvaluationRecord {
        let start = Instant::now();
        let mut rec = self.run_inner(config);
        rec.wall_seconds = start.elapsed().as_secs_f64();
        rec
    }

    fn run_inner(&self, config: &Configuration) -> EvaluationRecord {
        match self.space.validate(config) {
            Ok(true) => {}
            Ok(false) => {
                return EvaluationRecord::failed(
                    config.clone(),
                    Status::Invalid,
                    "configuration violates the space",
                )
            }
            Err(e) => {
                return EvaluationRecord::failed(config.clone(), Status::Invalid, e.to_string())
            }
        }
        let command = self.spec.render(config);
        let repeat = self.spec.repeat.max(1);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for _ in 0..repeat {
            let metrics = match self.run_once(&command, config) {
                RunOutcome::TimedOut => {
                    return EvaluationRecord::failed(
                        config.clone(),
                        Status::Timeout,
                        format!("`{command}` exceeded {} s", self.spec.timeout_seconds),
                    )
                }
                RunOutcome::SpawnFailed(e) => {
                    return EvaluationRecord::failed(
                        config.clone(),
                        Status::Crash,
                        format!("`{command}`: {e}"),
                    )
                }
                RunOutcome::Finished {
                    code,
                    stdout,
                    stderr,
                } => {
                    if code != Some(0) {
                        let code = code.map_or("signal".to_string(), |c| c.to_string());
                        return EvaluationRecord::failed(
                            config.clone(),
                            Status::Crash,
                            format!("`{command}` exited with {code}: {}", stderr.trim()),
                        );
                    }
                    let metrics = Self::parse(&stdout);
                    if metrics.is_empty() {
                        return EvaluationRecord::failed(
                            config.clone(),
                            Status::Crash,
                            format!("`{command}` printed no metric lines"),
                        );
                    }
                    metrics
                }
            };
            for (k, v) in metrics {
                *sums.entry(k).or_insert(0.0) += v;
            }
        }
        let metrics: BTreeMap<String, f64> = sums
            .into_iter()
            .map(|(k, v)| (k, v / f64::from(repeat)))
            .collect();
        let total = metrics.get("total").copied().unwrap_or_else(|| {
            metrics
                .iter()
                .filter(|(k, _)| k.as_str() != "total")
                .map(|(_, v)| v)
                .sum()
        });
        EvaluationRecord::ok(config.clone(), metrics, total)
    }
}

impl Evaluator for ExternalObjective {
    fn evaluate(&self, ctx: EvalContext<'_>, config: &Configuration) -> EvaluationRecord {
        let mut rec = self.run(config);
        rec.search_id = ctx.search_id.to_string();
        rec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::PENALTY;
    use crate::space::{ParamKind, ParameterSpec, RoutineDecl, Value};

    fn space() -> SearchSpace {
        SearchSpace::new(
            vec![RoutineDecl::new("g1"), RoutineDecl::new("g2")],
            vec![ParameterSpec {
                name: "tb".into(),
                kind: ParamKind::Integer {
                    lo: 32,
                    hi: 1024,
                    step: 32,
                },
                default: Value::Num(64.0),
                owner: "g1".into(),
                shared_value_required: false,
                used_by: vec![],
            }],
            vec![],
        )
        .unwrap()
    }

    fn objective(cmd: &str) -> ExternalObjective {
        ExternalObjective::new(ExternalCommandSpec::new(cmd), space())
    }

    #[test]
    fn metric_protocol() {
        assert_eq!(
            parse_metric_line("metric total=12.5"),
            Some(("total".into(), 12.5))
        );
        assert_eq!(
            parse_metric_line("metric\tg1.k=-1e-3"),
            Some(("g1.k".into(), -1e-3))
        );
        assert_eq!(parse_metric_line("metric g=3"), Some(("g".into(), 3.0)));
        assert_eq!(parse_metric_line(" metric g=3"), None);
        assert_eq!(parse_metric_line("metric g=3 "), None);
        assert_eq!(parse_metric_line("metric g=.5"), None);
        assert_eq!(parse_metric_line("metric g=+5"), None);
        assert_eq!(parse_metric_line("metrics g=5"), None);
    }

    #[test]
    fn total_line_is_used() {
        let rec = objective("echo 'metric total=12.5'").run(&space().default_configuration());
        assert_eq!(rec.status, Status::Ok);
        assert_eq!(rec.total, 12.5);
    }

    #[test]
    fn sum_fallback() {
        let rec = objective("echo 'metric g1=1.0'; echo noise; echo 'metric g2=2.0'")
            .run(&space().default_configuration());
        assert_eq!(rec.status, Status::Ok);
        assert_eq!(rec.total, 3.0);
        assert_eq!(rec.metric("g2"), Some(2.0));
    }

    #[test]
    fn placeholder_and_env() {
        let rec = objective("echo \"metric a={tb}\"; echo \"metric b=$TUNE_TB\"")
            .run(&space().default_configuration());
        assert_eq!(rec.metric("a"), Some(64.0));
        assert_eq!(rec.metric("b"), Some(64.0));
    }

    #[test]
    fn timeout_kills_and_penalizes() {
        let mut spec = ExternalCommandSpec::new("sleep 2; echo 'metric total=1'");
        spec.timeout_seconds = 0.2;
        let start = Instant::now();
        let rec = ExternalObjective::new(spec, space()).run(&space().default_configuration());
        assert_eq!(rec.status, Status::Timeout);
        assert_eq!(rec.total, PENALTY);
        assert!(start.elapsed() < Duration::from_millis(1500));
    }

    #[test]
    fn nonzero_exit_is_crash() {
        let rec = objective("echo 'metric total=1'; exit 3").run(&space().default_configuration());
        assert_eq!(rec.status, Status::Crash);
        assert_eq!(rec.total, PENALTY);
        let rec = objective("definitely-not-a-command-xyz").run(&space().default_configuration());
        assert_eq!(rec.status, Status::Crash);
        assert!(rec.note.unwrap().contains("definitely-not-a-command-xyz"));
    }

    #[test]
    fn silent_command_is_crash() {
        let rec = objective("echo hello").run(&space().default_configuration());
        assert_eq!(rec.status, Status::Crash);
    }

    #[test]
    fn repeats_are_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let counter = dir.path().join("n");
        let mut spec = ExternalCommandSpec::new(format!(
            "n=$(cat {p} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {p}; echo \"metric g1=$n\"",
            p = counter.display()
        ));
        spec.repeat = 3;
        let rec = ExternalObjective::new(spec, space()).run(&space().default_configuration());
        assert_eq!(rec.metric("g1"), Some(2.0));
    }
}
