//! Deskworld: a small deterministic tool-use environment. Each task family
//! has a fixed tool contract; some contracts hide a precondition call or an
//! argument value that an executor only learns from rejections or skills.

mod executor;
mod maintainer;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use executor::ScriptedExecutor;
pub use maintainer::ScriptedMaintainer;

use crate::oracle::ScriptedBackend;
use crate::trace::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Look up a record, then act on the returned id.
    Chain,
    /// A parameterless call must precede the main call.
    Precondition,
    /// The preceding call takes an argument whose value is only revealed by
    /// a rejection.
    PreconditionArg,
    /// The main call takes a hidden argument value.
    HiddenArg,
}

impl FamilyKind {
    pub const CYCLE: [FamilyKind; 4] =
        [FamilyKind::Chain, FamilyKind::Precondition, FamilyKind::PreconditionArg, FamilyKind::HiddenArg];

    /// Whether the contract has an argument value the instruction omits.
    pub fn has_hidden_binding(self) -> bool {
        matches!(self, FamilyKind::PreconditionArg | FamilyKind::HiddenArg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub params: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "from")]
pub enum Binding {
    /// Stated in the instruction.
    Literal { value: String },
    /// Returned by an earlier call under `key`.
    Observed { key: String, value: String },
    /// Fixed by the tool contract; `guess` is what an uninformed caller sends.
    Hidden { value: String, guess: String },
}

impl Binding {
    pub fn value(&self) -> &str {
        match self {
            Binding::Literal { value } | Binding::Observed { value, .. } | Binding::Hidden { value, .. } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub binding: Binding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCall {
    pub tool: String,
    pub args: Vec<ArgSpec>,
    #[serde(default)]
    pub outputs: Vec<(String, String)>,
    /// Set when this call is a precondition of the named tool.
    #[serde(default)]
    pub precondition_for: Option<String>,
}

impl ExpectedCall {
    /// The exact action that satisfies this call.
    pub fn action(&self) -> Action {
        Action::Call {
            tool: self.tool.clone(),
            args: self.args.iter().map(|a| (a.name.clone(), a.binding.value().to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeskworldTask {
    pub id: String,
    pub family: String,
    pub kind: FamilyKind,
    pub domain: String,
    pub instruction: String,
    pub tools: Vec<ToolSpec>,
    pub expected: Vec<ExpectedCall>,
}

impl DeskworldTask {
    pub fn tool_names(&self) -> Vec<String> {
        self.tools.iter().map(|t| t.name.clone()).collect()
    }

    pub fn render_tools(&self) -> String {
        self.tools
            .iter()
            .map(|t| format!("- {}({}): {}", t.name, t.params.join(", "), t.description))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TaskSuite {
    pub tasks: Vec<DeskworldTask>,
}

impl TaskSuite {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub is_error: bool,
    pub advanced: bool,
}

/// Outcome of one action against a task whose first `cursor` expected
/// calls have already succeeded.
pub fn step(task: &DeskworldTask, cursor: usize, action: &Action) -> (String, StepResult) {
    let err = |s: String| (s, StepResult { is_error: true, advanced: false });
    let (tool, args) = match action {
        Action::Invalid(_) => return err("error: could not parse action".into()),
        Action::Done => return ("done".into(), StepResult { is_error: false, advanced: false }),
        Action::Call { tool, args } => (tool, args),
    };
    if !task.tools.iter().any(|t| &t.name == tool) {
        return err(format!("error: unknown tool {tool}"));
    }
    let Some(exp) = task.expected.get(cursor) else {
        return err(format!("error: unexpected call {tool}"));
    };
    if &exp.tool != tool {
        if exp.precondition_for.as_deref() == Some(tool.as_str()) {
            return err(format!("error: precondition failed; call {} before {tool}", exp.tool));
        }
        return err(format!("error: unexpected call {tool}"));
    }
    let given: BTreeMap<&str, &str> = args.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if let Some(extra) = given.keys().find(|k| !exp.args.iter().any(|a| a.name == **k)) {
        return err(format!("error: invalid argument for {tool}: unknown parameter {extra}"));
    }
    for a in exp.args.iter().filter(|a| !matches!(a.binding, Binding::Hidden { .. })) {
        if given.get(a.name.as_str()) != Some(&a.binding.value()) {
            return err(format!("error: invalid argument for {tool}: {}", a.name));
        }
    }
    for a in exp.args.iter().filter(|a| matches!(a.binding, Binding::Hidden { .. })) {
        if given.get(a.name.as_str()) != Some(&a.binding.value()) {
            return err(format!("error: invalid argument; use {tool} {}={}", a.name, a.binding.value()));
        }
    }
    let mut obs = format!("ok: {tool}");
    if !exp.outputs.is_empty() {
        let outs: Vec<String> = exp.outputs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        obs.push_str(" -> ");
        obs.push_str(&outs.join(", "));
    }
    (obs, StepResult { is_error: false, advanced: true })
}

fn same_call(a: &Action, b: &Action) -> bool {
    match (a, b) {
        (Action::Call { tool: ta, args: aa }, Action::Call { tool: tb, args: ab }) => {
            let mut x = aa.clone();
            let mut y = ab.clone();
            x.sort();
            y.sort();
            ta == tb && x == y
        }
        _ => false,
    }
}

/// Length of the longest common subsequence of exact call matches.
pub fn matched_calls(expected: &[Action], emitted: &[Action]) -> usize {
    let mut dp = vec![vec![0usize; emitted.len() + 1]; expected.len() + 1];
    for i in 1..=expected.len() {
        for j in 1..=emitted.len() {
            dp[i][j] = if same_call(&expected[i - 1], &emitted[j - 1]) {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[expected.len()][emitted.len()]
}

/// F1 of ordered call matching: recall over expected calls, precision over
/// emitted calls. Non-call actions do not count as emitted calls.
pub fn call_f1(expected: &[Action], emitted: &[Action]) -> f64 {
    let emitted: Vec<Action> = emitted.iter().filter(|a| matches!(a, Action::Call { .. })).cloned().collect();
    if expected.is_empty() {
        return if emitted.is_empty() { 1.0 } else { 0.0 };
    }
    let m = matched_calls(expected, &emitted);
    if m == 0 {
        return 0.0;
    }
    let recall = m as f64 / expected.len() as f64;
    let precision = m as f64 / emitted.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn utility(task: &DeskworldTask, trace: &crate::trace::Trace) -> f64 {
    let expected: Vec<Action> = task.expected.iter().map(ExpectedCall::action).collect();
    let emitted: Vec<Action> = trace.steps.iter().map(|s| s.action.clone()).collect();
    call_f1(&expected, &emitted)
}

const DOMAINS: [&str; 20] = [
    "garden", "vehicle", "trading", "travel", "messaging", "files", "calendar", "billing", "inventory", "ticketing",
    "weather", "music", "banking", "recipes", "fitness", "library", "parking", "shipping", "hotel", "payroll",
];

const MODES: [&str; 6] = ["strict", "full", "manual", "secure", "verified", "archival"];
const LEVELS: [&str; 5] = ["3", "5", "7", "9", "11"];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Family {
    index: usize,
    kind: FamilyKind,
    domain: String,
    hidden: String,
}

fn family_name(i: usize) -> String {
    format!("f{i:02}")
}

fn families(n: usize, rng: &mut ChaCha8Rng) -> Vec<Family> {
    (0..n)
        .map(|i| {
            let kind = FamilyKind::CYCLE[i % 4];
            let base = DOMAINS[i % DOMAINS.len()];
            let domain = if i < DOMAINS.len() { base.to_string() } else { format!("{base}{}", i / DOMAINS.len() + 1) };
            let hidden = match kind {
                FamilyKind::PreconditionArg => LEVELS.choose(rng).expect("non-empty").to_string(),
                _ => MODES.choose(rng).expect("non-empty").to_string(),
            };
            Family { index: i, kind, domain, hidden }
        })
        .collect()
}

fn tool(name: String, params: &[&str], description: String) -> ToolSpec {
    ToolSpec { name, params: params.iter().map(|p| p.to_string()).collect(), description }
}

fn arg(name: &str, binding: Binding) -> ArgSpec {
    ArgSpec { name: name.into(), binding }
}

fn instance(f: &Family, id: String, rng: &mut ChaCha8Rng) -> DeskworldTask {
    let d = &f.domain;
    let target = format!("T-{}", rng.random_range(1000..10000));
    let name = format!("r{}", rng.random_range(1000..10000));
    let record = rng.random_range(10000..100000).to_string();
    let mut tools = vec![
        tool(format!("{d}_get_status"), &[], format!("Show the {d} system status.")),
        tool(format!("{d}_list_records"), &[], format!("List {d} records.")),
    ];
    let (instruction, expected) = match f.kind {
        FamilyKind::Chain => {
            tools.push(tool(format!("{d}_find_record"), &["name"], format!("Find a {d} record by name.")));
            tools.push(tool(format!("{d}_open_record"), &["record_id"], format!("Open a {d} record.")));
            (
                format!("Open the {d} record named {name}."),
                vec![
                    ExpectedCall {
                        tool: format!("{d}_find_record"),
                        args: vec![arg("name", Binding::Literal { value: name })],
                        outputs: vec![("record_id".into(), record.clone())],
                        precondition_for: None,
                    },
                    ExpectedCall {
                        tool: format!("{d}_open_record"),
                        args: vec![arg("record_id", Binding::Observed { key: "record_id".into(), value: record })],
                        outputs: vec![],
                        precondition_for: None,
                    },
                ],
            )
        }
        FamilyKind::Precondition => {
            tools.push(tool(format!("{d}_authorize"), &[], format!("Authorize the {d} session.")));
            tools.push(tool(format!("{d}_submit_request"), &["target"], format!("Submit a {d} request.")));
            (
                format!("Submit a {d} request for target {target}."),
                vec![
                    ExpectedCall {
                        tool: format!("{d}_authorize"),
                        args: vec![],
                        outputs: vec![],
                        precondition_for: Some(format!("{d}_submit_request")),
                    },
                    ExpectedCall {
                        tool: format!("{d}_submit_request"),
                        args: vec![arg("target", Binding::Literal { value: target })],
                        outputs: vec![],
                        precondition_for: None,
                    },
                ],
            )
        }
        FamilyKind::PreconditionArg => {
            tools.push(tool(format!("{d}_calibrate"), &["level"], format!("Calibrate the {d} system.")));
            tools.push(tool(format!("{d}_start_job"), &["target"], format!("Start a {d} job.")));
            (
                format!("Start a {d} job for target {target}."),
                vec![
                    ExpectedCall {
                        tool: format!("{d}_calibrate"),
                        args: vec![arg("level", Binding::Hidden { value: f.hidden.clone(), guess: "1".into() })],
                        outputs: vec![],
                        precondition_for: Some(format!("{d}_start_job")),
                    },
                    ExpectedCall {
                        tool: format!("{d}_start_job"),
                        args: vec![arg("target", Binding::Literal { value: target })],
                        outputs: vec![],
                        precondition_for: None,
                    },
                ],
            )
        }
        FamilyKind::HiddenArg => {
            tools.push(tool(format!("{d}_find_record"), &["name"], format!("Find a {d} record by name.")));
            tools.push(tool(
                format!("{d}_apply_change"),
                &["record_id", "mode"],
                format!("Apply a pending change to a {d} record."),
            ));
            (
                format!("Apply the pending {d} change to record {name}."),
                vec![
                    ExpectedCall {
                        tool: format!("{d}_find_record"),
                        args: vec![arg("name", Binding::Literal { value: name })],
                        outputs: vec![("record_id".into(), record.clone())],
                        precondition_for: None,
                    },
                    ExpectedCall {
                        tool: format!("{d}_apply_change"),
                        args: vec![
                            arg("record_id", Binding::Observed { key: "record_id".into(), value: record }),
                            arg("mode", Binding::Hidden { value: f.hidden.clone(), guess: "default".into() }),
                        ],
                        outputs: vec![],
                        precondition_for: None,
                    },
                ],
            )
        }
    };
    tools.sort_by(|a, b| a.name.cmp(&b.name));
    DeskworldTask { id, family: family_name(f.index), kind: f.kind, domain: d.clone(), instruction, tools, expected }
}

/// Training and held-out suites over `n_families` families, each split
/// cycling through the families in order.
pub fn generate(n_families: usize, per_split: usize, seed: u64) -> (TaskSuite, TaskSuite) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fams = families(n_families.max(1), &mut rng);
    let mut split = |name: &str| TaskSuite {
        tasks: (0..per_split)
            .map(|i| instance(&fams[i % fams.len()], format!("dw-{name}-{i:03}"), &mut rng))
            .collect(),
    };
    let train = split("train");
    let heldout = split("heldout");
    (train, heldout)
}

/// Strict scripted backend answering every role for the given tasks.
pub fn scripted_backend(tasks: impl IntoIterator<Item = DeskworldTask>) -> ScriptedBackend {
    ScriptedBackend::strict()
        .with_responder(Arc::new(ScriptedExecutor::new(tasks)))
        .with_responder(Arc::new(ScriptedMaintainer))
}
