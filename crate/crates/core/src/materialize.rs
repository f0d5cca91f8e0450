//! Builds the agent-facing workspace of one episode: a copy of the
//! repository at its initial state plus exactly the harness artifacts
//! visible at the chosen level.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episode::{visibility_of, ArtifactKind, HarnessLevel, TaskSpec, VisibilityMatrix};
use crate::snapshot::Tree;
use crate::verify::CheckRegistry;

/// Runner-owned directory inside every workspace; hidden from agents.
pub const HARNESSLAB_DIR: &str = ".harnesslab";

/// File names that only ever exist in an evaluator pack.
pub const EVALUATOR_FILE_NAMES: &[&str] = &["EVALUATOR_NOTES.md", "HIDDEN_EVALUATOR_NOTES.md", "pack.toml"];

#[derive(Debug, Error)]
pub enum MaterializeError {
    #[error("destination is not empty: {0}")]
    DestinationNotEmpty(PathBuf),
    #[error("fixture missing: {0}")]
    FixtureMissing(PathBuf),
    #[error("no template for visible artifact {0}")]
    ArtifactTemplateMissing(ArtifactKind),
    #[error("workspace missing: {0}")]
    WorkspaceMissing(PathBuf),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessArtifact {
    pub kind: ArtifactKind,
    pub relative_path: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkspaceManifest {
    pub episode_id: String,
    pub task_id: String,
    pub level: HarnessLevel,
    /// Set on load; not persisted so that identical inputs give identical trees.
    #[serde(skip)]
    pub repo_root: PathBuf,
    pub materialized: Vec<HarnessArtifact>,
    pub repo_revision: String,
}

impl WorkspaceManifest {
    pub fn path(workspace: &Path) -> PathBuf {
        workspace.join(HARNESSLAB_DIR).join("manifest")
    }

    /// Copy of the repository as materialized, used for patches and audits.
    pub fn baseline_dir(workspace: &Path) -> PathBuf {
        workspace.join(HARNESSLAB_DIR).join("baseline")
    }

    pub fn load(workspace: &Path) -> Result<Self, MaterializeError> {
        let path = Self::path(workspace);
        if !workspace.is_dir() {
            return Err(MaterializeError::WorkspaceMissing(workspace.to_path_buf()));
        }
        let text = fs::read_to_string(&path)?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| MaterializeError::Manifest(e.to_string()))?;
        m.repo_root = workspace.to_path_buf();
        Ok(m)
    }
}

/// Source material for one task: the repository, artifact templates and the
/// check registry. Mirrors a task directory of the corpus.
#[derive(Debug, Clone)]
pub struct FixtureSource {
    pub root: PathBuf,
}

impl FixtureSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn repo_dir(&self) -> PathBuf {
        self.root.join("repo")
    }

    pub fn template_path(&self, kind: ArtifactKind) -> Option<PathBuf> {
        let rel = kind.workspace_path()?;
        let name = rel.strip_prefix("harness/")?;
        Some(self.root.join("artifacts").join(name))
    }

    pub fn registry(&self) -> Result<CheckRegistry, MaterializeError> {
        let path = self.root.join("registry.toml");
        let text = fs::read_to_string(&path).map_err(|_| MaterializeError::FixtureMissing(path.clone()))?;
        toml::from_str(&text).map_err(|e| MaterializeError::Manifest(format!("{}: {e}", path.display())))
    }
}

fn content_hash(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn ensure_empty_dest(dest: &Path) -> Result<(), MaterializeError> {
    if dest.exists() && (!dest.is_dir() || fs::read_dir(dest)?.next().is_some()) {
        return Err(MaterializeError::DestinationNotEmpty(dest.to_path_buf()));
    }
    fs::create_dir_all(dest)?;
    Ok(())
}

/// Materialize with the default episode id `<task_id>-<level>`.
pub fn materialize(
    task: &TaskSpec,
    fixture: &FixtureSource,
    level: HarnessLevel,
    dest: &Path,
) -> Result<WorkspaceManifest, MaterializeError> {
    let id = format!("{}-{}", task.task_id, level);
    materialize_episode(task, fixture, level, dest, &id)
}

pub fn materialize_episode(
    task: &TaskSpec,
    fixture: &FixtureSource,
    level: HarnessLevel,
    dest: &Path,
    episode_id: &str,
) -> Result<WorkspaceManifest, MaterializeError> {
    let repo_dir = fixture.repo_dir();
    if !repo_dir.is_dir() {
        return Err(MaterializeError::FixtureMissing(repo_dir));
    }
    let repo = Tree::load(&repo_dir, |_| false)?;
    let registry = if level >= HarnessLevel::H1 { Some(fixture.registry()?) } else { None };

    // Render every artifact before touching the destination so that a missing
    // template leaves nothing behind.
    let mut artifacts: Vec<(ArtifactKind, String, Vec<u8>)> = Vec::new();
    for kind in visibility_of(level) {
        let content = match kind {
            ArtifactKind::RepositoryFiles => continue,
            ArtifactKind::TaskDescription => task.render_markdown().into_bytes(),
            ArtifactKind::TestCommandRegistry => registry
                .as_ref()
                .expect("registry loaded at H1+")
                .test_command_registry()
                .render_markdown()
                .into_bytes(),
            ArtifactKind::DeterministicCheckRegistry => {
                registry.as_ref().expect("registry loaded at H1+").check_list().render_markdown().into_bytes()
            }
            other => {
                let path = fixture.template_path(other).ok_or(MaterializeError::ArtifactTemplateMissing(other))?;
                fs::read(&path).map_err(|_| MaterializeError::ArtifactTemplateMissing(other))?
            }
        };
        let rel = kind.workspace_path().expect("file artifacts have paths");
        artifacts.push((kind, rel, content));
    }

    ensure_empty_dest(dest)?;
    repo.write_to(dest)?;
    repo.write_to(&WorkspaceManifest::baseline_dir(dest))?;

    let mut materialized = Vec::new();
    for (kind, rel, content) in artifacts {
        let path = dest.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &content)?;
        materialized.push(HarnessArtifact { kind, relative_path: rel, content_hash: content_hash(&content) });
    }

    let manifest = WorkspaceManifest {
        episode_id: episode_id.to_string(),
        task_id: task.task_id.clone(),
        level,
        repo_root: dest.to_path_buf(),
        materialized,
        repo_revision: format!("{}@{}", task.repo_id, repo.content_hash()),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| MaterializeError::Manifest(e.to_string()))?;
    fs::write(WorkspaceManifest::path(dest), text + "\n")?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<Leak>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scan the agent-visible part of a workspace for artifacts above the
/// manifest's level and for evaluator material.
pub fn verify_no_leakage(manifest: &WorkspaceManifest) -> Result<LeakageReport, MaterializeError> {
    verify_no_leakage_against(manifest, None)
}

/// As [`verify_no_leakage`], additionally flagging any file that contains the
/// evaluator notes verbatim.
pub fn verify_no_leakage_against(
    manifest: &WorkspaceManifest,
    evaluator_notes: Option<&str>,
) -> Result<LeakageReport, MaterializeError> {
    let root = &manifest.repo_root;
    if !root.is_dir() {
        return Err(MaterializeError::WorkspaceMissing(root.clone()));
    }
    let matrix = VisibilityMatrix::standard();
    let mut report = LeakageReport::default();
    let mut leak = |path: &str, reason: String| report.violations.push(Leak { path: path.to_string(), reason });

    let harness_dir = root.join("harness");
    if manifest.level == HarnessLevel::H0 && harness_dir.exists() {
        leak("harness/", "H0 exposes no harness artifacts".to_string());
    }

    let visible = Tree::load(root, |rel| rel == HARNESSLAB_DIR || rel.starts_with(".harnesslab/"))?;
    let notes = evaluator_notes.map(str::trim).filter(|n| !n.is_empty());
    for (rel, bytes) in &visible.files {
        let name = rel.rsplit('/').next().unwrap_or(rel);
        if EVALUATOR_FILE_NAMES.contains(&name) {
            leak(rel, "evaluator pack file in agent workspace".to_string());
            continue;
        }
        if let Some(notes) = notes {
            if String::from_utf8_lossy(bytes).contains(notes) {
                leak(rel, "contains the evaluator notes".to_string());
                continue;
            }
        }
        if rel.starts_with("harness/") || rel == "TASK.md" {
            match ArtifactKind::from_workspace_path(rel) {
                None => leak(rel, "not a harness artifact".to_string()),
                Some(kind) if !matrix.is_visible(kind, manifest.level) => {
                    let from = kind.introduced_at().map(|l| l.to_string()).unwrap_or_else(|| "no".to_string());
                    leak(rel, format!("{kind} is a {from} artifact in a {} workspace", manifest.level));
                }
                Some(_) => {}
            }
        }
    }
    Ok(report)
}
