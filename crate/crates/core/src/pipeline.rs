//! End-to-end runs: materialize, drive the agent, adjudicate, persist.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use thiserror::Error;

use crate::adjudicate::EvaluatorPack;
use crate::agent::{run_episode, EpisodeConfig, RunError, ScriptError, ScriptedAgent};
use crate::episode::{HarnessLevel, OutcomeLabel};
use crate::fixture::{FixtureError, TaskBundle};
use crate::materialize::{materialize_episode, MaterializeError};
use crate::trace::{validate_package, EpisodePackage, PackageViolation, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Materialize(#[from] MaterializeError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("unknown agent `{agent}`; available: {}", .available.join(", "))]
    UnknownAgent { agent: String, available: Vec<String> },
    #[error("agent {agent} is written for {script}, not {requested}")]
    LevelMismatch { agent: String, script: HarnessLevel, requested: HarnessLevel },
    #[error("output already exists: {0}")]
    OutputExists(PathBuf),
    #[error("package failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PackageViolation>),
    #[error("ladder level {0} panicked")]
    Panicked(HarnessLevel),
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub agent: String,
    /// Defaults to the level the script was written for.
    pub level: Option<HarnessLevel>,
    pub output_dir: PathBuf,
    pub overwrite: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub package: EpisodePackage,
    pub package_dir: PathBuf,
    pub workspace: PathBuf,
}

impl RunOutput {
    pub fn label(&self) -> OutcomeLabel {
        self.package.label().expect("adjudicated package")
    }
}

pub fn episode_id(task_id: &str, level: HarnessLevel, agent: &str) -> String {
    format!("{task_id}-{level}-{agent}")
}

/// Run one scripted agent; the workspace and package go under
/// `<output_dir>/<episode_id>/`.
pub fn run(bundle: &TaskBundle, request: &RunRequest, config: &EpisodeConfig) -> Result<RunOutput, PipelineError> {
    let available = bundle.agents()?;
    if !available.contains(&request.agent) {
        return Err(PipelineError::UnknownAgent { agent: request.agent.clone(), available });
    }
    let mut agent =
        ScriptedAgent::load(&bundle.root, &request.agent, &bundle.task, &bundle.registry, &bundle.repo_tree()?)?;
    let script_level = agent.script().level;
    let level = request.level.unwrap_or(script_level);
    if level != script_level {
        return Err(PipelineError::LevelMismatch {
            agent: request.agent.clone(),
            script: script_level,
            requested: level,
        });
    }
    let evaluator: EvaluatorPack = bundle.evaluator()?;

    let id = episode_id(&bundle.task.task_id, level, &request.agent);
    let base = request.output_dir.join(&id);
    if base.exists() {
        if !request.overwrite {
            return Err(PipelineError::OutputExists(base));
        }
        fs::remove_dir_all(&base).map_err(FixtureError::from)?;
    }
    let workspace = base.join("workspace");
    let package_dir = base.join("package");
    materialize_episode(&bundle.task, &bundle.source(), level, &workspace, &id)?;

    let config = EpisodeConfig { boundary: bundle.boundary.clone(), ..config.clone() };
    let package = run_episode(&mut agent, &workspace, &bundle.task, &evaluator, &config)?;
    package.write_dir(&package_dir)?;
    let violations = validate_package(&package);
    if !violations.is_empty() {
        return Err(PipelineError::Invalid(violations));
    }
    Ok(RunOutput { package, package_dir, workspace })
}

/// The scripted agent shipped for each level.
pub fn ladder_agent(level: HarnessLevel) -> String {
    format!("scripted-{}", level.as_str().to_ascii_lowercase())
}

/// Run H0..H3 concurrently in separate workspaces; results in level order.
pub fn ladder(
    bundle: &TaskBundle,
    output_dir: &Path,
    overwrite: bool,
    config: &EpisodeConfig,
) -> Result<Vec<RunOutput>, PipelineError> {
    let results: Vec<Result<RunOutput, PipelineError>> = thread::scope(|s| {
        let handles: Vec<_> = HarnessLevel::ALL
            .into_iter()
            .map(|level| {
                let request = RunRequest {
                    agent: ladder_agent(level),
                    level: Some(level),
                    output_dir: output_dir.to_path_buf(),
                    overwrite,
                };
                (level, s.spawn(move || run(bundle, &request, config)))
            })
            .collect();
        handles.into_iter().map(|(level, h)| h.join().unwrap_or(Err(PipelineError::Panicked(level)))).collect()
    });
    results.into_iter().collect()
}

/// Level, label and per-trace evidence counts of each package.
pub fn ladder_table(packages: &[&EpisodePackage]) -> String {
    let header = [
        "level",
        "label",
        "actions",
        "tool",
        "context",
        "verification",
        "attribution",
        "report_rows",
        "interventions",
        "entropy",
    ];
    let rows: Vec<Vec<String>> = packages
        .iter()
        .map(|p| {
            let t = &p.traces;
            vec![
                p.level.to_string(),
                p.label().map(|l| l.to_string()).unwrap_or_else(|| "-".into()),
                t.action.len().to_string(),
                t.tool.len().to_string(),
                t.context.len().to_string(),
                t.verification.len().to_string(),
                t.attribution.len().to_string(),
                p.verification_report.as_ref().map_or(0, |r| r.rows.len()).to_string(),
                t.intervention.len().to_string(),
                t.entropy.len().to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_row = |cells: &[&str]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = fmt_row(&header) + "\n";
    for r in &rows {
        out += &(fmt_row(&r.iter().map(String::as_str).collect::<Vec<_>>()) + "\n");
    }
    out
}
