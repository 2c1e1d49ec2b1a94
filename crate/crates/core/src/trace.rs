//! Execution traces: one step per executor turn.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::skill::SkillRef;
use crate::text::clip;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Call { tool: String, args: Vec<(String, String)> },
    Done,
    Invalid(String),
}

impl Action {
    /// Parses the first non-empty line of an executor reply.
    pub fn parse(reply: &str) -> Action {
        let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        if line.eq_ignore_ascii_case("done") {
            return Action::Done;
        }
        let Some(rest) = line.strip_prefix("CALL ").or_else(|| line.strip_prefix("call ")) else {
            return Action::Invalid(line.to_string());
        };
        let rest = rest.trim();
        let (Some(open), true) = (rest.find('('), rest.ends_with(')')) else {
            return Action::Invalid(line.to_string());
        };
        let tool = rest[..open].trim();
        if tool.is_empty() || !tool.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Action::Invalid(line.to_string());
        }
        let inner = &rest[open + 1..rest.len() - 1];
        let mut args = Vec::new();
        for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let Some((k, v)) = part.split_once('=') else {
                return Action::Invalid(line.to_string());
            };
            let v = v.trim().trim_matches(|c| c == '"' || c == '\'');
            args.push((k.trim().to_string(), v.to_string()));
        }
        Action::Call { tool: tool.to_string(), args }
    }

    pub fn tool(&self) -> Option<&str> {
        match self {
            Action::Call { tool, .. } => Some(tool),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Call { tool, args } => {
                let args: Vec<String> = args.iter().map(|(k, v)| format!("{k}={v}")).collect();
                write!(f, "CALL {tool}({})", args.join(", "))
            }
            Action::Done => f.write_str("DONE"),
            Action::Invalid(raw) => write!(f, "INVALID {raw}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub turn: u32,
    pub action: Action,
    pub observation: String,
    pub is_error: bool,
    /// Skills shown to the executor on this turn.
    pub exposed: Vec<SkillRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Trace {
    pub task_id: String,
    pub instruction: String,
    pub tools: Vec<String>,
    pub steps: Vec<Step>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Trace {
    /// Union of skills exposed on any turn.
    pub fn exposed(&self) -> BTreeSet<SkillRef> {
        self.steps.iter().flat_map(|s| s.exposed.iter().cloned()).collect()
    }

    /// Number of turns on which each skill was retrieved.
    pub fn retrieved_counts(&self) -> BTreeMap<SkillRef, u64> {
        let mut counts = BTreeMap::new();
        for s in &self.steps {
            for r in &s.exposed {
                *counts.entry(r.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Tools successfully called at least once.
    pub fn successful_tools(&self) -> BTreeSet<String> {
        self.steps
            .iter()
            .filter(|s| !s.is_error)
            .filter_map(|s| s.action.tool().map(str::to_string))
            .collect()
    }

    pub fn step_line(step: &Step) -> String {
        format!("turn {}: {} -> {}", step.turn, step.action, step.observation)
    }

    /// Text form shared by every role prompt, clipped to `limit` bytes.
    pub fn render(&self, limit: usize) -> String {
        let mut out = format!(
            "task: {}\ninstruction: {}\ntools: {}\n",
            self.task_id,
            self.instruction,
            self.tools.join(", ")
        );
        for s in &self.steps {
            out.push_str(&Self::step_line(s));
            out.push('\n');
        }
        clip(&out, limit).to_string()
    }
}
