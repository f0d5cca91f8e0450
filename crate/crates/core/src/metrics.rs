//! Population metrics over episode packages, grouped into cells.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjudicate::EvidenceBasis;
use crate::episode::{HarnessLevel, OutcomeLabel};
use crate::trace::EpisodePackage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no packages to aggregate")]
    EmptyInput,
    #[error("mixed schema versions: {0} and {1}")]
    MixedSchemaVersion(String, String),
    #[error("package {0} has no outcome record")]
    Unadjudicated(String),
}

/// An exact ratio. `den == 0` means not applicable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }

    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    /// Exact comparison against `p/q`.
    pub fn equals(self, p: u64, q: u64) -> bool {
        self.den > 0 && q > 0 && u128::from(self.num) * u128::from(q) == u128::from(p) * u128::from(self.den)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{v:.3} ({}/{})", self.num, self.den),
            None => f.write_str("n/a"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Agent,
    Level,
    Task,
    Repo,
}

impl FromStr for GroupField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "agent" => Ok(Self::Agent),
            "level" => Ok(Self::Level),
            "task" => Ok(Self::Task),
            "repo" | "repository" => Ok(Self::Repo),
            other => Err(format!("unknown grouping key `{other}` (expected agent, level, task or repo)")),
        }
    }
}

/// Parse a comma-separated list such as `agent,level`.
pub fn parse_grouping(s: &str) -> Result<Vec<GroupField>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

/// Cell identity; fields outside the grouping are `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub agent: Option<String>,
    pub level: Option<HarnessLevel>,
    pub task: Option<String>,
    pub repo: Option<String>,
}

impl GroupKey {
    pub fn of(pkg: &EpisodePackage, grouping: &[GroupField]) -> Self {
        let mut k = Self::default();
        for f in grouping {
            match f {
                GroupField::Agent => k.agent = Some(pkg.agent_id.clone()),
                GroupField::Level => k.level = Some(pkg.level),
                GroupField::Task => k.task = Some(pkg.task_id.clone()),
                GroupField::Repo => k.repo = Some(repo_id(pkg).to_string()),
            }
        }
        k
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(a) = &self.agent {
            parts.push(format!("agent={a}"));
        }
        if let Some(l) = self.level {
            parts.push(format!("level={l}"));
        }
        if let Some(t) = &self.task {
            parts.push(format!("task={t}"));
        }
        if let Some(r) = &self.repo {
            parts.push(format!("repo={r}"));
        }
        if parts.is_empty() {
            f.write_str("all")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

fn repo_id(pkg: &EpisodePackage) -> &str {
    pkg.repo_revision.split('@').next().unwrap_or(&pkg.repo_revision)
}

/// Raw counts of one cell. Counts add across cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: u64,
    pub autonomous_successes: u64,
    pub mhi_events: u64,
    pub episodes_with_mhi: u64,
    pub sufficient: u64,
    pub sufficient_agent_only: u64,
    pub context_events: u64,
    pub context_influencing: u64,
    pub failed_tool_calls: u64,
    pub recovered_tool_calls: u64,
    pub attribution_events: u64,
    pub complete_attributions: u64,
    pub entropy_severity: u64,
}

impl Counts {
    pub fn of(pkg: &EpisodePackage) -> Result<Self, MetricsError> {
        let outcome = pkg.outcome.as_ref().ok_or_else(|| MetricsError::Unadjudicated(pkg.episode_id.clone()))?;
        let t = &pkg.traces;
        let mhi = outcome.mhi_count as u64;
        let failed: Vec<_> = t.tool.iter().filter(|e| e.result.failure_type.is_some()).collect();
        Ok(Self {
            episodes: 1,
            autonomous_successes: u64::from(outcome.label == OutcomeLabel::AutonomousVerifiedSuccess),
            mhi_events: mhi,
            episodes_with_mhi: u64::from(mhi > 0),
            sufficient: u64::from(outcome.verification_sufficient),
            sufficient_agent_only: u64::from(
                outcome.verification_sufficient && outcome.evidence_basis == EvidenceBasis::Agent,
            ),
            context_events: t.context.len() as u64,
            context_influencing: t.context.iter().filter(|c| c.influenced_decision).count() as u64,
            failed_tool_calls: failed.len() as u64,
            recovered_tool_calls: failed.iter().filter(|e| e.result.recovered == Some(true)).count() as u64,
            attribution_events: t.attribution.len() as u64,
            complete_attributions: t.attribution.iter().filter(|a| a.is_complete()).count() as u64,
            entropy_severity: u64::from(t.total_entropy_severity()),
        })
    }

    pub fn add(&mut self, o: &Self) {
        self.episodes += o.episodes;
        self.autonomous_successes += o.autonomous_successes;
        self.mhi_events += o.mhi_events;
        self.episodes_with_mhi += o.episodes_with_mhi;
        self.sufficient += o.sufficient;
        self.sufficient_agent_only += o.sufficient_agent_only;
        self.context_events += o.context_events;
        self.context_influencing += o.context_influencing;
        self.failed_tool_calls += o.failed_tool_calls;
        self.recovered_tool_calls += o.recovered_tool_calls;
        self.attribution_events += o.attribution_events;
        self.complete_attributions += o.complete_attributions;
        self.entropy_severity += o.entropy_severity;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: GroupKey,
    pub n_episodes: u64,
    pub avsr: Rate,
    /// Missing-harness intervention events per episode; may exceed 1.
    pub mhir: Rate,
    /// Share of episodes with at least one missing-harness intervention.
    pub mhir_episode: Rate,
    pub verification_autonomy: Rate,
    pub context_meaningfulness: Rate,
    pub tool_recovery_rate: Rate,
    pub attribution_completeness: Rate,
    /// Mean entropy severity per episode.
    pub entropy_delta: Rate,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_counts(cell: GroupKey, c: Counts) -> Self {
        Self {
            cell,
            n_episodes: c.episodes,
            avsr: Rate::new(c.autonomous_successes, c.episodes),
            mhir: Rate::new(c.mhi_events, c.episodes),
            mhir_episode: Rate::new(c.episodes_with_mhi, c.episodes),
            verification_autonomy: Rate::new(c.sufficient_agent_only, c.sufficient),
            context_meaningfulness: Rate::new(c.context_influencing, c.context_events),
            tool_recovery_rate: Rate::new(c.recovered_tool_calls, c.failed_tool_calls),
            attribution_completeness: Rate::new(c.complete_attributions, c.attribution_events),
            entropy_delta: Rate::new(c.entropy_severity, c.episodes),
            counts: c,
        }
    }
}

/// One report per non-empty cell, in cell order.
pub fn compute_metrics(
    packages: &[EpisodePackage],
    grouping: &[GroupField],
) -> Result<Vec<MetricsReport>, MetricsError> {
    let first = packages.first().ok_or(MetricsError::EmptyInput)?;
    if let Some(p) = packages.iter().find(|p| p.schema_version != first.schema_version) {
        return Err(MetricsError::MixedSchemaVersion(first.schema_version.clone(), p.schema_version.clone()));
    }
    let mut cells: BTreeMap<GroupKey, Counts> = BTreeMap::new();
    for p in packages {
        cells.entry(GroupKey::of(p, grouping)).or_default().add(&Counts::of(p)?);
    }
    Ok(cells.into_iter().map(|(k, c)| MetricsReport::from_counts(k, c)).collect())
}

/// Plain-text table.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["cell", "n", "avsr", "mhir", "verif_autonomy", "context", "tool_recovery", "attribution", "entropy"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.cell.to_string(),
                r.n_episodes.to_string(),
                r.avsr.to_string(),
                r.mhir.to_string(),
                r.verification_autonomy.to_string(),
                r.context_meaningfulness.to_string(),
                r.tool_recovery_rate.to_string(),
                r.attribution_completeness.to_string(),
                r.entropy_delta.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
            + "\n"
    };
    let mut out = line(header.to_vec());
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_equality_is_exact() {
        assert!(Rate::new(2, 8).equals(1, 4));
        assert!(!Rate::new(1, 3).equals(333, 1000));
        assert_eq!(Rate::new(0, 0).value(), None);
        assert_eq!(Rate::new(0, 0).to_string(), "n/a");
        assert_eq!(Rate::new(1, 4).to_string(), "0.250 (1/4)");
    }

    #[test]
    fn grouping_parses() {
        assert_eq!(parse_grouping("agent, level").unwrap(), vec![GroupField::Agent, GroupField::Level]);
        assert_eq!(parse_grouping("").unwrap(), vec![]);
        assert!(parse_grouping("colour").is_err());
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(compute_metrics(&[], &[]), Err(MetricsError::EmptyInput));
    }
}
