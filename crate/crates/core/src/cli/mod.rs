//! Batch front end: parse a JSON experiment configuration, run the checks it
//! selects, and write `report.json`, one CSV per table, and a pass/fail
//! manifest. Outputs contain no timestamps, so identical configuration and
//! seed reproduce identical bytes.

mod config;
mod demos;
mod runners;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Thresholds};
pub use demos::{demos, Demo};

use serde::Serialize;

/// How a run failed, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable, unparsable, or schema-violating configuration (exit 2).
    Schema(String),
    /// Filesystem trouble writing artifacts (exit 3).
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Schema(msg) => write!(f, "configuration error: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

/// Options from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub seed_override: Option<u64>,
}

/// One check line of a report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub detail: String,
}

impl CheckOutcome {
    pub(crate) fn new(
        name: impl Into<String>,
        pass: bool,
        statistic: Option<f64>,
        threshold: Option<f64>,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            pass,
            statistic,
            threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    schema: &'a str,
    name: &'a str,
    kind: &'a str,
    seed: u64,
    jobs_note: &'a str,
    thresholds: &'a Thresholds,
    pass: bool,
    checks: &'a [CheckOutcome],
    tables: Vec<String>,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub pass: bool,
    pub out_dir: PathBuf,
    pub checks: Vec<CheckOutcome>,
}

/// Runs the configuration at `path`. Exit-code contract: `Ok(summary)` with
/// `summary.pass == false` means checks failed (exit 1); errors carry their
/// own codes.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    run_str(&text, opts)
}

/// Runs a configuration given as a JSON string.
pub fn run_str(text: &str, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let mut config = config::parse(text)?;
    if let Some(seed) = opts.seed_override {
        config.seed = seed;
    }
    let jobs = opts.jobs.max(1);

    let (checks, tables) = runners::run(&config, jobs).map_err(|e| match e {
        crate::Error::Io(io) => CliError::Io(io.to_string()),
        other => CliError::Schema(other.to_string()),
    })?;

    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| config.out.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("msplice-out").join(&config.name));
    write_artifacts(&config, &checks, &tables, &out_dir)?;

    Ok(RunSummary {
        pass: checks.iter().all(|c| c.pass),
        out_dir,
        checks,
    })
}

fn write_artifacts(
    config: &ExperimentConfig,
    checks: &[CheckOutcome],
    tables: &[(String, String)],
    out_dir: &Path,
) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    std::fs::create_dir_all(out_dir).map_err(io)?;

    let report = Report {
        schema: "1",
        name: &config.name,
        kind: &config.kind,
        seed: config.seed,
        jobs_note: "replication-to-stream mapping is fixed; the job count never changes results",
        thresholds: &config.thresholds,
        pass: checks.iter().all(|c| c.pass),
        checks,
        tables: tables.iter().map(|(name, _)| name.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("serializing report: {e}")))?;
    std::fs::write(out_dir.join("report.json"), json + "\n").map_err(io)?;

    let mut manifest = String::new();
    for check in checks {
        manifest.push_str(if check.pass { "pass " } else { "FAIL " });
        manifest.push_str(&check.name);
        manifest.push('\n');
    }
    manifest.push_str(if checks.iter().all(|c| c.pass) {
        "result: pass\n"
    } else {
        "result: FAIL\n"
    });
    std::fs::write(out_dir.join("manifest.txt"), manifest).map_err(io)?;

    for (name, content) in tables {
        std::fs::write(out_dir.join(name), content).map_err(io)?;
    }
    Ok(())
}
