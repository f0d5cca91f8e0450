//! In-memory file trees: load, hash, copy and diff directory snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use similar::TextDiff;

/// Relative path (with `/` separators) -> file bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tree {
    pub files: BTreeMap<String, Vec<u8>>,
}

/// Workspace entries that are not repository content.
pub fn is_workspace_overlay(rel: &str) -> bool {
    rel == "TASK.md"
        || rel == "harness"
        || rel.starts_with("harness/")
        || rel == ".harnesslab"
        || rel.starts_with(".harnesslab/")
}

impl Tree {
    /// Load every regular file under `root` whose relative path is not
    /// rejected by `skip`.
    pub fn load(root: &Path, skip: impl Fn(&str) -> bool) -> io::Result<Self> {
        let mut files = BTreeMap::new();
        let mut stack = vec![PathBuf::new()];
        while let Some(rel_dir) = stack.pop() {
            for entry in fs::read_dir(root.join(&rel_dir))? {
                let entry = entry?;
                let rel = rel_dir.join(entry.file_name());
                let rel_str = rel_to_string(&rel);
                if skip(&rel_str) {
                    continue;
                }
                let ft = entry.file_type()?;
                if ft.is_dir() {
                    stack.push(rel);
                } else if ft.is_file() {
                    files.insert(rel_str, fs::read(entry.path())?);
                }
            }
        }
        Ok(Self { files })
    }

    /// Repository content of an agent workspace (overlay files excluded).
    pub fn load_repo(workspace: &Path) -> io::Result<Self> {
        Self::load(workspace, is_workspace_overlay)
    }

    pub fn write_to(&self, root: &Path) -> io::Result<()> {
        for (rel, bytes) in &self.files {
            let path = root.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, bytes)?;
        }
        Ok(())
    }

    /// Content hash over sorted paths and bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (rel, bytes) in &self.files {
            h.update(rel.as_bytes());
            h.update([0u8]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }

    pub fn paths(&self) -> BTreeSet<&str> {
        self.files.keys().map(String::as_str).collect()
    }

    pub fn text(&self, rel: &str) -> Option<String> {
        self.files.get(rel).map(|b| String::from_utf8_lossy(b).into_owned())
    }
}

fn rel_to_string(rel: &Path) -> String {
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Changes {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub modified: Vec<String>,
}

impl Changes {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }

    /// Added and modified paths, sorted.
    pub fn touched(&self) -> Vec<&str> {
        let mut v: Vec<&str> =
            self.added.iter().chain(self.modified.iter()).chain(self.removed.iter()).map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

pub fn changes(before: &Tree, after: &Tree) -> Changes {
    let mut c = Changes::default();
    for (rel, bytes) in &after.files {
        match before.files.get(rel) {
            None => c.added.push(rel.clone()),
            Some(old) if old != bytes => c.modified.push(rel.clone()),
            _ => {}
        }
    }
    for rel in before.files.keys() {
        if !after.files.contains_key(rel) {
            c.removed.push(rel.clone());
        }
    }
    c
}

/// Unified diff of `before` -> `after`, files in path order. Empty when the
/// trees are identical.
pub fn unified_diff(before: &Tree, after: &Tree) -> String {
    let mut paths: BTreeSet<&str> = before.paths();
    paths.extend(after.paths());
    let mut out = String::new();
    for rel in paths {
        let old = before.files.get(rel);
        let new = after.files.get(rel);
        if old == new {
            continue;
        }
        let old_text = old.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
        let new_text = new.map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
        let old_header = if old.is_some() { format!("a/{rel}") } else { "/dev/null".to_string() };
        let new_header = if new.is_some() { format!("b/{rel}") } else { "/dev/null".to_string() };
        out.push_str(&format!("diff --git a/{rel} b/{rel}\n"));
        let diff = TextDiff::from_lines(&old_text, &new_text);
        out.push_str(
            &diff
                .unified_diff()
                .context_radius(3)
                .header(&old_header, &new_header)
                .missing_newline_hint(true)
                .to_string(),
        );
    }
    out
}

/// Paths named in a unified diff's `+++`/`---` headers.
pub fn diff_paths(patch: &str) -> BTreeSet<String> {
    patch
        .lines()
        .filter_map(|l| l.strip_prefix("+++ b/").or_else(|| l.strip_prefix("--- a/")))
        .map(|p| p.split('\t').next().unwrap_or(p).to_string())
        .collect()
}
