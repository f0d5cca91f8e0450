mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use harnesslab::agent::EpisodeConfig;
use harnesslab::episode::InterventionMode;
use harnesslab::fixture::{build_corpus, FixtureOptions, TaskBundle, TASK_ID};
use harnesslab::materialize::materialize;
use harnesslab::metrics::{compute_metrics, parse_grouping, render_table};
use harnesslab::pipeline::{self, ladder_table, RunOutput, RunRequest};
use harnesslab::trace::{validate_package_dir, EpisodePackage};
use harnesslab::HarnessLevel;
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::FileConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Parser, Debug)]
#[command(name = "harnesslab", version, about = "Run coding-agent episodes across the H0-H3 harness ladder")]
struct Cli {
    /// Corpus root holding `tasks/<task_id>/`.
    #[arg(long, global = true, env = "HARNESSLAB_HOME")]
    home: Option<PathBuf>,
    /// TOML file with defaults for any flag.
    #[arg(long, global = true, env = "HARNESSLAB_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one agent on one task and persist the episode package.
    Run(RunArgs),
    /// Run the shipped scripted agent at every level and compare.
    Ladder(LadderArgs),
    /// Check an episode package directory against the trace schema.
    Validate { package: PathBuf },
    /// Aggregate metrics over package directories matching glob patterns.
    Metrics(MetricsArgs),
    /// Write an agent workspace for a task at one level.
    Materialize(MaterializeArgs),
    /// Fixture corpus management.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
}

#[derive(Subcommand, Debug)]
enum FixturesCommand {
    /// Write the embedded corpus into the home directory.
    Build {
        /// Leave out the slow integration test that makes the full regression time out.
        #[arg(long)]
        no_slow_regression: bool,
    },
}

#[derive(Args, Debug, Clone)]
struct EpisodeFlags {
    #[arg(long)]
    task: Option<String>,
    /// Where episode directories are written; defaults to `<home>/runs`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replace existing episode directories.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    step_budget: Option<u32>,
    /// Timeout for raw commands and deterministic checks.
    #[arg(long)]
    tool_timeout_ms: Option<u64>,
    /// Count passing evaluator checks and regression as evidence at H0.
    #[arg(long)]
    h0_regression_evidence: bool,
    #[arg(long)]
    intervention_mode: Option<InterventionMode>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    agent: String,
    /// Must match the level the agent script targets; defaults to it.
    #[arg(long)]
    level: Option<HarnessLevel>,
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Args, Debug)]
struct LadderArgs {
    #[command(flatten)]
    episode: EpisodeFlags,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Glob patterns matching package directories (or their package.json).
    #[arg(required = true)]
    patterns: Vec<String>,
    /// Comma-separated subset of agent, level, task, repo.
    #[arg(long)]
    group_by: Option<String>,
    /// Directory for metrics.txt and metrics.json; defaults to `<home>/metrics`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaterializeArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    level: HarnessLevel,
    /// Empty or missing destination directory.
    #[arg(long)]
    dest: PathBuf,
}

struct Ctx {
    home: PathBuf,
    format: Format,
    file: FileConfig,
}

impl Ctx {
    fn task_id(&self, flag: &Option<String>) -> String {
        flag.clone().or_else(|| self.file.task.clone()).unwrap_or_else(|| TASK_ID.to_string())
    }

    fn fixture_options(&self) -> FixtureOptions {
        FixtureOptions { slow_regression: self.file.slow_regression.unwrap_or(true) }
    }

    /// Load a task, building the embedded corpus first if the home has none.
    fn bundle(&self, task_id: &str) -> Result<TaskBundle> {
        if !TaskBundle::task_dir(&self.home, task_id).exists() && task_id == TASK_ID {
            build_corpus(&self.home, &self.fixture_options())
                .with_context(|| format!("building corpus in {}", self.home.display()))?;
        }
        TaskBundle::load(&self.home, task_id)
            .with_context(|| format!("loading task {task_id} from {}", self.home.display()))
    }

    fn output_dir(&self, flags: &EpisodeFlags) -> PathBuf {
        flags.output_dir.clone().or_else(|| self.file.output_dir.clone()).unwrap_or_else(|| self.home.join("runs"))
    }

    fn episode_config(&self, flags: &EpisodeFlags) -> EpisodeConfig {
        let mut c = EpisodeConfig::default();
        if let Some(b) = flags.step_budget.or(self.file.step_budget) {
            c.step_budget = b;
        }
        if let Some(t) = flags.tool_timeout_ms.or(self.file.tool_timeout_ms) {
            c.tool_timeout_ms = t;
        }
        c.adjudication.h0_regression_counts_as_evidence =
            flags.h0_regression_evidence || self.file.h0_regression_counts_as_evidence.unwrap_or(false);
        c.policy = self.file.policy.clone().unwrap_or_default();
        if let Some(mode) = flags.intervention_mode {
            c.policy.mode = mode;
        }
        c
    }
}

fn run_summary(out: &RunOutput) -> serde_json::Value {
    json!({
        "episode_id": out.package.episode_id,
        "level": out.package.level,
        "agent": out.package.agent_id,
        "label": out.label(),
        "package_dir": out.package_dir,
        "workspace": out.workspace,
    })
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(ctx: &Ctx, args: &RunArgs) -> Result<ExitCode> {
    let bundle = ctx.bundle(&ctx.task_id(&args.episode.task))?;
    let request = RunRequest {
        agent: args.agent.clone(),
        level: args.level,
        output_dir: ctx.output_dir(&args.episode),
        overwrite: args.episode.overwrite,
    };
    let out = pipeline::run(&bundle, &request, &ctx.episode_config(&args.episode))?;
    match ctx.format {
        Format::Json => print_json(&run_summary(&out))?,
        Format::Text => {
            println!("label: {}", out.label());
            println!("package: {}", out.package_dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ladder(ctx: &Ctx, args: &LadderArgs) -> Result<ExitCode> {
    let bundle = ctx.bundle(&ctx.task_id(&args.episode.task))?;
    let outputs = pipeline::ladder(
        &bundle,
        &ctx.output_dir(&args.episode),
        args.episode.overwrite,
        &ctx.episode_config(&args.episode),
    )?;
    let packages: Vec<&EpisodePackage> = outputs.iter().map(|o| &o.package).collect();
    match ctx.format {
        Format::Json => print_json(&outputs.iter().map(run_summary).collect::<Vec<_>>())?,
        Format::Text => {
            print!("{}", ladder_table(&packages));
            for o in &outputs {
                println!("{}: {}", o.package.level, o.package_dir.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(ctx: &Ctx, package: &Path) -> Result<ExitCode> {
    if !package.is_dir() {
        bail!("{} is not a package directory", package.display());
    }
    let violations = validate_package_dir(package);
    match ctx.format {
        Format::Json => print_json(&json!({
            "package": package,
            "clean": violations.is_empty(),
            "violations": violations,
        }))?,
        Format::Text if violations.is_empty() => println!("{}: clean", package.display()),
        Format::Text => {
            println!("{}: {} violation(s)", package.display(), violations.len());
            for v in &violations {
                println!("  {v}");
            }
        }
    }
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn package_dirs(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for pattern in patterns {
        for entry in glob::glob(pattern).with_context(|| format!("bad glob pattern `{pattern}`"))? {
            let path = entry?;
            let dir = if path.file_name().is_some_and(|n| n == "package.json") {
                path.parent().map(Path::to_path_buf).unwrap_or_default()
            } else {
                path
            };
            if dir.join("package.json").is_file() {
                dirs.push(dir);
            }
        }
    }
    dirs.sort();
    dirs.dedup();
    Ok(dirs)
}

fn cmd_metrics(ctx: &Ctx, args: &MetricsArgs) -> Result<ExitCode> {
    let dirs = package_dirs(&args.patterns)?;
    if dirs.is_empty() {
        bail!("no episode packages match {}", args.patterns.join(" "));
    }
    let packages = dirs
        .iter()
        .map(|d| EpisodePackage::read_dir(d).with_context(|| format!("reading package {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let grouping_text = args.group_by.clone().or_else(|| ctx.file.group_by.clone()).unwrap_or_default();
    let grouping = parse_grouping(&grouping_text).map_err(anyhow::Error::msg)?;
    let reports = compute_metrics(&packages, &grouping)?;
    let table = render_table(&reports);
    let json = serde_json::to_string_pretty(&reports)?;
    let out = args.out.clone().unwrap_or_else(|| ctx.home.join("metrics"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("metrics.txt"), &table)?;
    fs::write(out.join("metrics.json"), format!("{json}\n"))?;
    match ctx.format {
        Format::Json => println!("{json}"),
        Format::Text => {
            print!("{table}");
            println!("{} packages; written to {}", packages.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_materialize(ctx: &Ctx, args: &MaterializeArgs) -> Result<ExitCode> {
    let bundle = ctx.bundle(&ctx.task_id(&args.task))?;
    let manifest = materialize(&bundle.task, &bundle.source(), args.level, &args.dest)?;
    match ctx.format {
        Format::Json => print_json(&manifest)?,
        Format::Text => {
            println!("{} at {}: {}", manifest.task_id, manifest.level, args.dest.display());
            for a in &manifest.materialized {
                println!("  {}", a.relative_path);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixtures_build(ctx: &Ctx, no_slow_regression: bool) -> Result<ExitCode> {
    let mut opts = ctx.fixture_options();
    if no_slow_regression {
        opts.slow_regression = false;
    }
    let bundle =
        build_corpus(&ctx.home, &opts).with_context(|| format!("building corpus in {}", ctx.home.display()))?;
    match ctx.format {
        Format::Json => print_json(&json!({ "task_dir": bundle.root, "agents": bundle.agents()? }))?,
        Format::Text => {
            println!("corpus written to {}", bundle.root.display());
            println!("agents: {}", bundle.agents()?.join(", "));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn real_main(cli: Cli) -> Result<ExitCode> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        home: cli.home.clone().or_else(|| file.home.clone()).unwrap_or_else(|| PathBuf::from("harnesslab-home")),
        format: cli.format.or(file.format).unwrap_or(Format::Text),
        file,
    };
    match &cli.command {
        Command::Run(a) => cmd_run(&ctx, a),
        Command::Ladder(a) => cmd_ladder(&ctx, a),
        Command::Validate { package } => cmd_validate(&ctx, package),
        Command::Metrics(a) => cmd_metrics(&ctx, a),
        Command::Materialize(a) => cmd_materialize(&ctx, a),
        Command::Fixtures { command: FixturesCommand::Build { no_slow_regression } } => {
            cmd_fixtures_build(&ctx, *no_slow_regression)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
