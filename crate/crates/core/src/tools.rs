//! Subprocess execution for agents and evaluators: explicit timeouts, exit
//! codes, bounded output capture and tool-failure classification.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::FailureType;

pub const DEFAULT_TOOL_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_REGRESSION_TIMEOUT_MS: u64 = 120_000;
pub const DEFAULT_OUTPUT_CAP: usize = 1 << 20;

/// Output fragments that mark a test-assertion failure rather than a broken
/// tool. `FAIL:` is what the fixture's test runner prints.
pub const ASSERTION_MARKERS: &[&str] = &["FAIL:", "AssertionError", "assertion failed", "not ok "];

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("workspace does not exist: {0}")]
    WorkspaceMissing(PathBuf),
    #[error("timeout must be positive")]
    InvalidTimeout,
    #[error("regression needs at least one command")]
    EmptyRegression,
    #[error("tool result is a success; nothing to classify")]
    NotAFailure,
    #[error("malformed registry: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolResult {
    pub command: String,
    pub exit_code: Option<i32>,
    pub duration_ms: u64,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
    #[serde(default)]
    pub stdout_truncated: bool,
    #[serde(default)]
    pub stderr_truncated: bool,
    pub failure_type: Option<FailureType>,
    pub recovered: Option<bool>,
}

impl ToolResult {
    pub fn succeeded(&self) -> bool {
        !self.timed_out && self.exit_code == Some(0)
    }

    /// The process ran to completion (any exit code).
    pub fn completed(&self) -> bool {
        !self.timed_out && self.exit_code.is_some()
    }

    /// A result that never reached a process, e.g. an unresolvable command
    /// reference.
    pub fn not_run(command: &str, reason: &str) -> Self {
        Self {
            command: command.to_string(),
            exit_code: None,
            duration_ms: 0,
            timed_out: false,
            stdout: String::new(),
            stderr: reason.to_string(),
            stdout_truncated: false,
            stderr_truncated: false,
            failure_type: Some(FailureType::Tool),
            recovered: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeterministicCheck {
    pub check_id: String,
    pub command: String,
    pub expected_substring: String,
    pub covers: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckResult {
    pub check_id: String,
    pub passed: bool,
    pub tool: ToolResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionStatus {
    Passed,
    Failed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionResult {
    pub status: RegressionStatus,
    pub tools: Vec<ToolResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandPurpose {
    Targeted,
    FullRegression,
    Lint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCommand {
    pub name: String,
    pub command: String,
    pub purpose: CommandPurpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

impl TestCommand {
    pub fn timeout_ms(&self) -> u64 {
        self.timeout_ms.unwrap_or(match self.purpose {
            CommandPurpose::FullRegression => DEFAULT_REGRESSION_TIMEOUT_MS,
            _ => DEFAULT_TOOL_TIMEOUT_MS,
        })
    }
}

/// Process environment and capture limits.
#[derive(Debug, Clone)]
pub struct ToolConfig {
    pub output_cap: usize,
    /// Variables copied from the host environment when present.
    pub env_allowlist: Vec<String>,
    /// Variables always set, overriding the host.
    pub fixed_env: Vec<(String, String)>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            output_cap: DEFAULT_OUTPUT_CAP,
            env_allowlist: vec!["PATH".into(), "HOME".into(), "TMPDIR".into()],
            fixed_env: vec![("LC_ALL".into(), "C".into()), ("LANG".into(), "C".into())],
        }
    }
}

pub(crate) struct Execution {
    pub result: ToolResult,
    pub raw_stdout: Vec<u8>,
}

/// Run `command` through `sh -c` in `workspace`, killing its whole process
/// group at `timeout_ms`.
pub fn run_command(command: &str, workspace: &Path, timeout_ms: u64) -> Result<ToolResult, ToolError> {
    run_command_with(command, workspace, timeout_ms, &ToolConfig::default())
}

pub fn run_command_with(
    command: &str,
    workspace: &Path,
    timeout_ms: u64,
    config: &ToolConfig,
) -> Result<ToolResult, ToolError> {
    execute(command, workspace, timeout_ms, config).map(|e| e.result)
}

pub(crate) fn execute(
    command: &str,
    workspace: &Path,
    timeout_ms: u64,
    config: &ToolConfig,
) -> Result<Execution, ToolError> {
    if timeout_ms == 0 {
        return Err(ToolError::InvalidTimeout);
    }
    if !workspace.is_dir() {
        return Err(ToolError::WorkspaceMissing(workspace.to_path_buf()));
    }

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(workspace)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    for key in &config.env_allowlist {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    for (k, v) in &config.fixed_env {
        cmd.env(k, v);
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            let mut result = ToolResult::not_run(command, &format!("spawn failed: {e}"));
            result.duration_ms = start.elapsed().as_millis() as u64;
            return Ok(Execution { result, raw_stdout: Vec::new() });
        }
    };

    let cap = config.output_cap;
    let out_reader = child.stdout.take().map(|s| thread::spawn(move || read_capped(s, cap)));
    let err_reader = child.stderr.take().map(|s| thread::spawn(move || read_capped(s, cap)));

    let deadline = Duration::from_millis(timeout_ms);
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if start.elapsed() >= deadline => {
                timed_out = true;
                kill_group(&mut child);
                let _ = child.wait();
                break None;
            }
            Ok(None) => thread::sleep(Duration::from_millis(2)),
            Err(_) => {
                kill_group(&mut child);
                break child.wait().ok();
            }
        }
    };
    // Background processes left by the shell would otherwise hold the pipes open.
    kill_group(&mut child);
    let duration_ms = start.elapsed().as_millis() as u64;

    let (raw_stdout, stdout_truncated) = out_reader.map(|h| h.join().unwrap_or_default()).unwrap_or_default();
    let (raw_stderr, stderr_truncated) = err_reader.map(|h| h.join().unwrap_or_default()).unwrap_or_default();

    let exit_code = if timed_out { None } else { status.and_then(|s| s.code()) };
    let mut result = ToolResult {
        command: command.to_string(),
        exit_code,
        duration_ms,
        timed_out,
        stdout: String::from_utf8_lossy(&raw_stdout).into_owned(),
        stderr: String::from_utf8_lossy(&raw_stderr).into_owned(),
        stdout_truncated,
        stderr_truncated,
        failure_type: None,
        recovered: None,
    };
    result.failure_type = classify_failure(&result).ok();
    Ok(Execution { result, raw_stdout })
}

fn read_capped(mut src: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut truncated = false;
    let mut buf = [0u8; 8192];
    loop {
        match src.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    (kept, truncated)
}

fn kill_group(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let pid = child.id() as libc::pid_t;
        // SAFETY: killpg only sends a signal; the group id is the child's pid
        // because it was spawned with process_group(0).
        unsafe {
            libc::killpg(pid, libc::SIGKILL);
        }
    }
    #[cfg(not(unix))]
    {
        let _ = child.kill();
    }
}

/// Deterministic check: passes iff the command completed without timing out
/// and `expected_substring` occurs byte-for-byte in stdout.
pub fn run_check(check: &DeterministicCheck, workspace: &Path, timeout_ms: u64) -> Result<CheckResult, ToolError> {
    run_check_with(check, workspace, timeout_ms, &ToolConfig::default())
}

pub fn run_check_with(
    check: &DeterministicCheck,
    workspace: &Path,
    timeout_ms: u64,
    config: &ToolConfig,
) -> Result<CheckResult, ToolError> {
    let exec = execute(&check.command, workspace, timeout_ms, config)?;
    let passed = exec.result.completed() && contains_bytes(&exec.raw_stdout, check.expected_substring.as_bytes());
    Ok(CheckResult { check_id: check.check_id.clone(), passed, tool: exec.result })
}

pub fn contains_bytes(haystack: &[u8], needle: &[u8]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// One attempt per command, no retries. Any failure makes the run `failed`;
/// otherwise any timeout makes it `timed_out`.
pub fn run_regression(commands: &[String], workspace: &Path, timeout_ms: u64) -> Result<RegressionResult, ToolError> {
    run_regression_with(commands, workspace, timeout_ms, &ToolConfig::default())
}

pub fn run_regression_with(
    commands: &[String],
    workspace: &Path,
    timeout_ms: u64,
    config: &ToolConfig,
) -> Result<RegressionResult, ToolError> {
    if commands.is_empty() {
        return Err(ToolError::EmptyRegression);
    }
    let mut tools = Vec::with_capacity(commands.len());
    for c in commands {
        tools.push(run_command_with(c, workspace, timeout_ms, config)?);
    }
    Ok(RegressionResult { status: regression_status(&tools), tools })
}

pub fn regression_status(tools: &[ToolResult]) -> RegressionStatus {
    if tools.iter().any(|t| !t.timed_out && !t.succeeded()) {
        RegressionStatus::Failed
    } else if tools.iter().any(|t| t.timed_out) {
        RegressionStatus::TimedOut
    } else {
        RegressionStatus::Passed
    }
}

/// Timeouts, spawn failures and "command not found" are tool failures;
/// a nonzero exit whose output carries an assertion marker is a feedback
/// candidate; anything else defaults to a tool failure.
pub fn classify_failure(result: &ToolResult) -> Result<FailureType, ToolError> {
    if result.succeeded() {
        return Err(ToolError::NotAFailure);
    }
    if result.timed_out {
        return Ok(FailureType::Tool);
    }
    match result.exit_code {
        None | Some(126) | Some(127) => Ok(FailureType::Tool),
        Some(_) => {
            let marked = ASSERTION_MARKERS.iter().any(|m| result.stdout.contains(m) || result.stderr.contains(m));
            Ok(if marked { FailureType::Feedback } else { FailureType::Tool })
        }
    }
}

/// Extract the first fenced ```toml block of a markdown document.
pub(crate) fn toml_block(markdown: &str) -> Option<&str> {
    let start = markdown.find("```toml\n")? + "```toml\n".len();
    let len = markdown[start..].find("```")?;
    Some(&markdown[start..start + len])
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCommandRegistry {
    #[serde(default)]
    pub test_commands: Vec<TestCommand>,
}

impl TestCommandRegistry {
    pub fn get(&self, name: &str) -> Option<&TestCommand> {
        self.test_commands.iter().find(|c| c.name == name)
    }

    pub fn render_markdown(&self) -> String {
        let mut out = String::from(
            "# Test-command registry\n\nRun registered commands by name. Purposes: targeted, full_regression, lint.\n\n",
        );
        for c in &self.test_commands {
            out.push_str(&format!("- `{}` ({}): `{}`\n", c.name, purpose_str(c.purpose), c.command));
        }
        out.push_str("\n```toml\n");
        out.push_str(&toml::to_string(self).expect("registry serializes"));
        out.push_str("```\n");
        out
    }

    pub fn from_markdown(markdown: &str) -> Result<Self, ToolError> {
        let block = toml_block(markdown).ok_or_else(|| ToolError::Registry("no toml block".into()))?;
        toml::from_str(block).map_err(|e| ToolError::Registry(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckList {
    #[serde(default)]
    pub checks: Vec<DeterministicCheck>,
}

impl CheckList {
    pub fn get(&self, check_id: &str) -> Option<&DeterministicCheck> {
        self.checks.iter().find(|c| c.check_id == check_id)
    }

    pub fn render_markdown(&self) -> String {
        let mut out = String::from(
            "# Deterministic check registry\n\nEach check is a command and an expected output substring bound to one requirement.\n\n",
        );
        for c in &self.checks {
            out.push_str(&format!(
                "- `{}` covers {}: `{}` expects `{}`\n",
                c.check_id, c.covers, c.command, c.expected_substring
            ));
        }
        out.push_str("\n```toml\n");
        out.push_str(&toml::to_string(self).expect("checks serialize"));
        out.push_str("```\n");
        out
    }

    pub fn from_markdown(markdown: &str) -> Result<Self, ToolError> {
        let block = toml_block(markdown).ok_or_else(|| ToolError::Registry("no toml block".into()))?;
        toml::from_str(block).map_err(|e| ToolError::Registry(e.to_string()))
    }
}

fn purpose_str(p: CommandPurpose) -> &'static str {
    match p {
        CommandPurpose::Targeted => "targeted",
        CommandPurpose::FullRegression => "full_regression",
        CommandPurpose::Lint => "lint",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn noop_succeeds() {
        let d = ws();
        let r = run_command("true", d.path(), 5000).unwrap();
        assert_eq!(r.exit_code, Some(0));
        assert!(!r.timed_out);
        assert_eq!(r.failure_type, None);
    }

    #[test]
    fn sleep_past_timeout_is_killed() {
        let d = ws();
        let start = Instant::now();
        let r = run_command("sleep 5", d.path(), 100).unwrap();
        assert!(start.elapsed() < Duration::from_secs(3), "group kill must not wait for sleep");
        assert!(r.timed_out);
        assert_eq!(r.exit_code, None);
        assert_eq!(r.failure_type, Some(FailureType::Tool));
    }

    #[test]
    fn missing_command_is_tool_failure() {
        let d = ws();
        let r = run_command("definitely-not-a-command-xyz", d.path(), 5000).unwrap();
        assert_eq!(r.exit_code, Some(127));
        assert_eq!(r.failure_type, Some(FailureType::Tool));
        assert_eq!(r.recovered, None);
    }

    #[test]
    fn runs_in_workspace_with_scrubbed_env() {
        let d = ws();
        std::fs::write(d.path().join("marker"), "here").unwrap();
        let r = run_command("cat marker; echo \" $LC_ALL\"", d.path(), 5000).unwrap();
        assert_eq!(r.stdout, "here C\n");
    }

    #[test]
    fn output_is_capped() {
        let d = ws();
        let cfg = ToolConfig { output_cap: 10, ..ToolConfig::default() };
        let r = run_command_with("printf 'abcdefghijklmnop'", d.path(), 5000, &cfg).unwrap();
        assert_eq!(r.stdout, "abcdefghij");
        assert!(r.stdout_truncated);
    }

    #[test]
    fn precondition_errors() {
        let d = ws();
        assert!(matches!(run_command("true", d.path(), 0), Err(ToolError::InvalidTimeout)));
        assert!(matches!(run_command("true", &d.path().join("nope"), 10), Err(ToolError::WorkspaceMissing(_))));
        assert!(matches!(run_regression(&[], d.path(), 10), Err(ToolError::EmptyRegression)));
    }

    #[test]
    fn check_matches_exact_bytes() {
        let d = ws();
        let check = DeterministicCheck {
            check_id: "c".into(),
            command: r#"printf '{"ok":true}'"#.into(),
            expected_substring: r#""ok":true"#.into(),
            covers: "R1".into(),
        };
        assert!(run_check(&check, d.path(), 5000).unwrap().passed);
        let upper = DeterministicCheck { expected_substring: r#""OK":true"#.into(), ..check.clone() };
        assert!(!run_check(&upper, d.path(), 5000).unwrap().passed);
        let slow = DeterministicCheck { command: "sleep 2; printf '\"ok\":true'".into(), ..check };
        let r = run_check(&slow, d.path(), 100).unwrap();
        assert!(!r.passed && r.tool.timed_out);
    }

    #[test]
    fn regression_status_rules() {
        let d = ws();
        let ok = run_regression(&["true".into(), "true".into()], d.path(), 5000).unwrap();
        assert_eq!(ok.status, RegressionStatus::Passed);
        let failed = run_regression(&["true".into(), "exit 3".into()], d.path(), 5000).unwrap();
        assert_eq!(failed.status, RegressionStatus::Failed);
        let slow = run_regression(&["true".into(), "sleep 3".into()], d.path(), 150).unwrap();
        assert_eq!(slow.status, RegressionStatus::TimedOut);
        assert_eq!(slow.tools.len(), 2);
        assert!(slow.tools[1].timed_out);
    }

    #[test]
    fn classification() {
        let base = ToolResult::not_run("x", "");
        let success = ToolResult { exit_code: Some(0), failure_type: None, ..base.clone() };
        assert!(matches!(classify_failure(&success), Err(ToolError::NotAFailure)));
        let timeout = ToolResult { timed_out: true, ..base.clone() };
        assert_eq!(classify_failure(&timeout).unwrap(), FailureType::Tool);
        assert_eq!(classify_failure(&base).unwrap(), FailureType::Tool);
        let assertion = ToolResult {
            exit_code: Some(1),
            stdout: "FAIL: empty password: expected output to contain 'x'".into(),
            ..base.clone()
        };
        assert_eq!(classify_failure(&assertion).unwrap(), FailureType::Feedback);
        let plain = ToolResult { exit_code: Some(2), stdout: "oops".into(), ..base };
        assert_eq!(classify_failure(&plain).unwrap(), FailureType::Tool);
    }

    #[test]
    fn registries_round_trip_through_markdown() {
        let reg = TestCommandRegistry {
            test_commands: vec![TestCommand {
                name: "full".into(),
                command: "sh scripts/run_tests.sh".into(),
                purpose: CommandPurpose::FullRegression,
                timeout_ms: Some(1000),
            }],
        };
        assert_eq!(TestCommandRegistry::from_markdown(&reg.render_markdown()).unwrap(), reg);
        let checks = CheckList {
            checks: vec![DeterministicCheck {
                check_id: "p".into(),
                command: "sh x.sh alice ''".into(),
                expected_substring: r#""ok":true"#.into(),
                covers: "R2".into(),
            }],
        };
        assert_eq!(CheckList::from_markdown(&checks.render_markdown()).unwrap(), checks);
    }
}
