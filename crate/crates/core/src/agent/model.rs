//! Interface for model-backed agents. No model client ships with the crate;
//! implement [`ModelClient`] to connect one.

use super::{Agent, AgentAction, AgentFault, Observation};

/// Sends a prompt and returns the model's raw reply.
pub trait ModelClient {
    fn complete(&mut self, prompt: &str) -> Result<String, AgentFault>;
}

/// Renders observations into prompts and parses replies into actions. Replies
/// carry one JSON action object, optionally inside a ```json fence.
#[derive(Debug, Clone, Default)]
pub struct ModelAdapter {
    /// Longest file or tool output included verbatim in a prompt.
    pub max_excerpt: usize,
}

impl ModelAdapter {
    pub fn new() -> Self {
        Self { max_excerpt: 8_000 }
    }

    fn excerpt<'a>(&self, s: &'a str) -> &'a str {
        if self.max_excerpt == 0 || s.len() <= self.max_excerpt {
            return s;
        }
        let mut end = self.max_excerpt;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        &s[..end]
    }

    pub fn render_prompt(&self, obs: &Observation) -> String {
        let mut out = format!(
            "# Task\n\n{}\n\n# Harness level {}; {} steps left\n\n# Files\n\n",
            obs.task_text.trim_end(),
            obs.level,
            obs.step_budget_remaining
        );
        for f in &obs.visible_files {
            out.push_str(&format!("- {f}\n"));
        }
        if let Some(m) = &obs.message {
            out.push_str(&format!("\n# Runner\n\n{m}\n"));
        }
        if let Some(f) = &obs.last_file {
            out.push_str(&format!("\n# {}\n\n```\n{}\n```\n", f.path, self.excerpt(&f.content)));
        }
        if let Some(t) = &obs.last_tool_result {
            out.push_str(&format!(
                "\n# `{}` exit {:?}{}\n\n```\n{}{}\n```\n",
                t.command,
                t.exit_code,
                if t.timed_out { " (timed out)" } else { "" },
                self.excerpt(&t.stdout),
                self.excerpt(&t.stderr)
            ));
        }
        if let Some(d) = &obs.last_diff {
            out.push_str(&format!("\n# Diff\n\n```diff\n{}\n```\n", self.excerpt(d)));
        }
        out.push_str("\nReply with one JSON action object, e.g. {\"action\":\"read_file\",\"path\":\"README.md\"}.\n");
        out
    }

    pub fn parse_action(&self, reply: &str) -> Result<AgentAction, AgentFault> {
        let body = match reply.find("```json") {
            Some(start) => {
                let rest = &reply[start + "```json".len()..];
                &rest[..rest.find("```").unwrap_or(rest.len())]
            }
            None => {
                let start = reply.find('{').ok_or_else(|| AgentFault("reply contains no JSON object".into()))?;
                let end = reply.rfind('}').map_or(reply.len(), |e| e + 1);
                &reply[start..end]
            }
        };
        serde_json::from_str(body.trim()).map_err(|e| AgentFault(format!("unparseable action: {e}")))
    }
}

pub struct ModelAgent<C: ModelClient> {
    pub id: String,
    pub client: C,
    pub adapter: ModelAdapter,
}

impl<C: ModelClient> Agent for ModelAgent<C> {
    fn id(&self) -> &str {
        &self.id
    }

    fn next_action(&mut self, obs: &Observation) -> Result<AgentAction, AgentFault> {
        let prompt = self.adapter.render_prompt(obs);
        let reply = self.client.complete(&prompt)?;
        self.adapter.parse_action(&reply)
    }
}
