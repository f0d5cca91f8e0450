//! The shipped task corpus: repoA-T1, a small login application whose
//! validator accepts empty passwords.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudicate::{AdjudicateError, EvaluatorPack};
use crate::agent::PermissionBoundary;
use crate::episode::TaskSpec;
use crate::materialize::FixtureSource;
use crate::snapshot::{unified_diff, Tree};
use crate::tools::DeterministicCheck;
use crate::verify::CheckRegistry;

pub const TASK_ID: &str = "repoA-T1";

macro_rules! corpus {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../corpus/repoA-T1/", $path)))),*]
    };
}

/// Every corpus file except the repository and the optional slow test.
const TASK_FILES: &[(&str, &str)] = corpus![
    "task.toml",
    "registry.toml",
    "permissions.toml",
    "evaluator/pack.toml",
    "evaluator/EVALUATOR_NOTES.md",
    "artifacts/AGENT_GUIDE.md",
    "artifacts/ARCHITECTURE.md",
    "artifacts/BUG_REPRODUCTION_PROTOCOL.md",
    "artifacts/CONTEXT_SELECTION_PROTOCOL.md",
    "artifacts/FAILURE_ATTRIBUTION_PROTOCOL.md",
    "artifacts/KNOWN_FAILURES.md",
    "artifacts/TASK_STATE.md",
    "artifacts/TESTING_GUIDE.md",
    "artifacts/TOOL_REGISTRY.md",
    "artifacts/TOOL_USAGE_PROTOCOL.md",
    "artifacts/VERIFICATION_PROTOCOL.md",
    "artifacts/VERIFICATION_REPORT_TEMPLATE.md",
    "agents/scripted-h0.toml",
    "agents/scripted-h1.toml",
    "agents/scripted-h2.toml",
    "agents/scripted-h3.toml",
    "agents/ui-layer-fix.toml",
    "agents/verification-skipper.toml",
    "agents/residue-leaver.toml",
    "agents/test-weakener.toml",
    "payloads/validator_fixed.sh",
    "payloads/validator_first_attempt.sh",
    "payloads/test_login_empty_password.sh",
    "payloads/test_login_weakened.sh",
    "payloads/login_form_ui_fix.sh",
    "payloads/scratch.txt",
];

/// Repository files, relative to `repo/`.
const REPO_FILES: &[(&str, &str)] = &[
    ("README.md", include_str!("../corpus/repoA-T1/repo/README.md")),
    ("src/api/login_controller.sh", include_str!("../corpus/repoA-T1/repo/src/api/login_controller.sh")),
    ("src/validation/validator.sh", include_str!("../corpus/repoA-T1/repo/src/validation/validator.sh")),
    ("src/auth/auth_service.sh", include_str!("../corpus/repoA-T1/repo/src/auth/auth_service.sh")),
    ("src/ui/login_form.sh", include_str!("../corpus/repoA-T1/repo/src/ui/login_form.sh")),
    ("tests/lib.sh", include_str!("../corpus/repoA-T1/repo/tests/lib.sh")),
    ("tests/test_login.sh", include_str!("../corpus/repoA-T1/repo/tests/test_login.sh")),
    ("tests/test_ui.sh", include_str!("../corpus/repoA-T1/repo/tests/test_ui.sh")),
    ("scripts/run_tests.sh", include_str!("../corpus/repoA-T1/repo/scripts/run_tests.sh")),
    ("scripts/lint.sh", include_str!("../corpus/repoA-T1/repo/scripts/lint.sh")),
];

const SLOW_TEST: (&str, &str) =
    ("tests/test_session_integration.sh", include_str!("../corpus/repoA-T1/extras/tests/test_session_integration.sh"));

const VALIDATOR_PATH: &str = "src/validation/validator.sh";
const NEW_TEST_PATH: &str = "tests/test_login_empty_password.sh";
const VALIDATOR_FIXED: &str = include_str!("../corpus/repoA-T1/payloads/validator_fixed.sh");
const NEW_TEST: &str = include_str!("../corpus/repoA-T1/payloads/test_login_empty_password.sh");

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("destination is not empty: {0}")]
    DestinationNotEmpty(PathBuf),
    #[error("workspace already carries the reference fix")]
    WorkspaceAlreadyFixed,
    #[error("not a repoA-T1 workspace: {0}")]
    NotAFixture(PathBuf),
    #[error("task {0} not found")]
    TaskNotFound(String),
    #[error("malformed corpus file {path}: {message}")]
    Corpus { path: PathBuf, message: String },
    #[error(transparent)]
    Evaluator(#[from] AdjudicateError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureOptions {
    /// Ship the slow integration test that makes the registered full
    /// regression exceed its timeout.
    pub slow_regression: bool,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self { slow_regression: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layers {
    pub api_controller: String,
    pub validator: String,
    pub auth_service: String,
    pub ui: String,
    pub tests: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub repo_id: String,
    pub layers: Layers,
    pub defect_location: String,
    pub probe_commands: Vec<DeterministicCheck>,
}

fn ensure_empty(dest: &Path) -> Result<(), FixtureError> {
    if dest.exists() && (!dest.is_dir() || fs::read_dir(dest)?.next().is_some()) {
        return Err(FixtureError::DestinationNotEmpty(dest.to_path_buf()));
    }
    fs::create_dir_all(dest)?;
    Ok(())
}

fn write_all(root: &Path, files: &[(&str, &str)]) -> io::Result<()> {
    for (rel, content) in files {
        let p = root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, content)?;
    }
    Ok(())
}

fn embedded(path: &str) -> &'static str {
    TASK_FILES.iter().find(|(p, _)| *p == path).map(|(_, c)| *c).expect("embedded corpus file")
}

pub fn embedded_task() -> TaskSpec {
    TaskSpec::from_toml(embedded("task.toml")).expect("embedded task.toml parses")
}

pub fn embedded_registry() -> CheckRegistry {
    toml::from_str(embedded("registry.toml")).expect("embedded registry.toml parses")
}

pub fn manifest() -> FixtureManifest {
    FixtureManifest {
        repo_id: embedded_task().repo_id,
        layers: Layers {
            api_controller: "src/api/login_controller.sh".into(),
            validator: VALIDATOR_PATH.into(),
            auth_service: "src/auth/auth_service.sh".into(),
            ui: "src/ui/login_form.sh".into(),
            tests: "tests".into(),
        },
        defect_location: VALIDATOR_PATH.into(),
        probe_commands: embedded_registry().checks,
    }
}

/// Write the unfixed repository into an empty `dest`.
pub fn build_fixture(dest: &Path, opts: &FixtureOptions) -> Result<FixtureManifest, FixtureError> {
    ensure_empty(dest)?;
    write_all(dest, REPO_FILES)?;
    if opts.slow_regression {
        write_all(dest, &[SLOW_TEST])?;
    }
    Ok(manifest())
}

/// Apply the validator fix plus its test; returns the resulting patch.
pub fn apply_reference_fix(workspace: &Path) -> Result<String, FixtureError> {
    let validator = workspace.join(VALIDATOR_PATH);
    let current = fs::read_to_string(&validator).map_err(|_| FixtureError::NotAFixture(workspace.to_path_buf()))?;
    if current == VALIDATOR_FIXED {
        return Err(FixtureError::WorkspaceAlreadyFixed);
    }
    let before = Tree::load_repo(workspace)?;
    write_all(workspace, &[(VALIDATOR_PATH, VALIDATOR_FIXED), (NEW_TEST_PATH, NEW_TEST)])?;
    let after = Tree::load_repo(workspace)?;
    Ok(unified_diff(&before, &after))
}

/// One task directory of a corpus home, loaded.
#[derive(Debug, Clone)]
pub struct TaskBundle {
    pub root: PathBuf,
    pub task: TaskSpec,
    pub registry: CheckRegistry,
    pub boundary: PermissionBoundary,
}

impl TaskBundle {
    pub fn task_dir(home: &Path, task_id: &str) -> PathBuf {
        home.join("tasks").join(task_id)
    }

    pub fn load(home: &Path, task_id: &str) -> Result<Self, FixtureError> {
        let root = Self::task_dir(home, task_id);
        if !root.join("task.toml").is_file() {
            return Err(FixtureError::TaskNotFound(task_id.to_string()));
        }
        let read = |rel: &str| -> Result<String, FixtureError> {
            fs::read_to_string(root.join(rel))
                .map_err(|e| FixtureError::Corpus { path: root.join(rel), message: e.to_string() })
        };
        let corpus_err = |rel: &str, message: String| FixtureError::Corpus { path: root.join(rel), message };
        let task = TaskSpec::from_toml(&read("task.toml")?).map_err(|e| corpus_err("task.toml", e.to_string()))?;
        let registry: CheckRegistry =
            toml::from_str(&read("registry.toml")?).map_err(|e| corpus_err("registry.toml", e.to_string()))?;
        let problems = registry.validate(&task);
        if !problems.is_empty() {
            return Err(corpus_err("registry.toml", problems.join("; ")));
        }
        let boundary =
            PermissionBoundary::from_toml(&read("permissions.toml")?).map_err(|e| corpus_err("permissions.toml", e))?;
        Ok(Self { root, task, registry, boundary })
    }

    pub fn source(&self) -> FixtureSource {
        FixtureSource::new(&self.root)
    }

    pub fn evaluator(&self) -> Result<EvaluatorPack, FixtureError> {
        Ok(EvaluatorPack::load(&self.root.join("evaluator"))?)
    }

    pub fn agents(&self) -> Result<Vec<String>, FixtureError> {
        let mut names: Vec<String> = fs::read_dir(self.root.join("agents"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".toml").map(str::to_string))
            .collect();
        names.sort();
        Ok(names)
    }

    pub fn repo_tree(&self) -> Result<Tree, FixtureError> {
        Ok(Tree::load(&self.source().repo_dir(), |_| false)?)
    }
}

/// Write the corpus into `<home>/tasks/repoA-T1` and load it.
pub fn build_corpus(home: &Path, opts: &FixtureOptions) -> Result<TaskBundle, FixtureError> {
    let root = TaskBundle::task_dir(home, TASK_ID);
    ensure_empty(&root)?;
    write_all(&root, TASK_FILES)?;
    build_fixture(&root.join("repo"), opts)?;
    TaskBundle::load(home, TASK_ID)
}
