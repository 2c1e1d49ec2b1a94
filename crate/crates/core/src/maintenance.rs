//! Evidence and gates: credit assignment, the credit table, the filter
//! predicate, bundle execution and patching, and refinement.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::draft::{parse_revision, skill_json, DraftOrigin};
use crate::oracle::templates::{render_rules, template};
use crate::oracle::{ChatRequest, OracleSession, RoleTag};
use crate::skill::{
    BundleCase, CaseKind, CreditEvent, EvidenceState, Judgment, LifecycleState, Role, Skill, SkillRef, TestBundle,
};
use crate::text::{clip, squash};
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub kind: CaseKind,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResult {
    pub passed: bool,
    pub cases: Vec<CaseResult>,
    /// Names every failing case; empty on pass.
    pub failure_digest: String,
}

impl GateResult {
    pub fn vacuous_pass() -> Self {
        Self { passed: true, cases: Vec::new(), failure_digest: String::new() }
    }

    pub fn failed(reason: impl Into<String>) -> Self {
        Self { passed: false, cases: Vec::new(), failure_digest: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditCounts {
    pub helpful: u64,
    pub harmful: u64,
    pub neutral: u64,
    pub uncertain: u64,
}

impl CreditCounts {
    pub fn record(&mut self, j: Judgment) {
        match j {
            Judgment::Helpful => self.helpful += 1,
            Judgment::Harmful => self.harmful += 1,
            Judgment::Neutral => self.neutral += 1,
            Judgment::Uncertain => self.uncertain += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.helpful + self.harmful + self.neutral + self.uncertain
    }
}

/// Judgment counts per skill version. A new version starts from zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditTable {
    rows: BTreeMap<SkillRef, CreditCounts>,
}

impl CreditTable {
    pub fn get(&self, r: &SkillRef) -> CreditCounts {
        self.rows.get(r).copied().unwrap_or_default()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&SkillRef, &CreditCounts)> {
        self.rows.iter()
    }

    pub fn record(&mut self, e: &CreditEvent) {
        self.rows.entry(e.skill.clone()).or_default().record(e.judgment);
    }
}

/// Pure table update: `table` plus one count per event.
pub fn update_credit_table(table: &CreditTable, events: &[CreditEvent]) -> CreditTable {
    let mut next = table.clone();
    for e in events {
        next.record(e);
    }
    next
}

/// True when a skill has enough harmful judgments and too few helpful ones
/// to stay exposed.
pub fn filter_gate(harmful: u64, helpful: u64, tau: u64, tau_protect: u64) -> bool {
    harmful >= tau && helpful < tau_protect
}

fn parse_verdict(text: &str) -> (bool, String) {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let upper = line.to_ascii_uppercase();
    if upper.starts_with("PASS") {
        (true, String::new())
    } else if upper.starts_with("FAIL") {
        let reason = line[4..].trim_start_matches([':', ' ', '-']).trim();
        (false, if reason.is_empty() { "failed".to_string() } else { reason.to_string() })
    } else {
        (false, format!("unparseable verdict: {}", clip(line, 80)))
    }
}

/// Runs every case of `bundle` against `skill` with one verdict call per
/// case. A knowledge skill with an empty bundle passes vacuously; any other
/// empty bundle fails.
pub fn run_bundle(session: &mut OracleSession, skill: &Skill, bundle: &TestBundle, body_limit: usize) -> GateResult {
    if bundle.target != skill.skill_ref() {
        return GateResult::failed(format!("bundle targets {} not {}", bundle.target, skill.skill_ref()));
    }
    if bundle.cases.is_empty() {
        return if skill.semantics == crate::skill::Semantics::Knowledge {
            GateResult::vacuous_pass()
        } else {
            GateResult::failed("bundle missing")
        };
    }
    let t = template(RoleTag::BundleVerdict);
    let body = clip(&skill.body, body_limit);
    let mut cases = Vec::with_capacity(bundle.cases.len());
    for (index, case) in bundle.cases.iter().enumerate() {
        let kind = kind_name(case.kind);
        let prompt = t.render(&[
            ("body", body),
            ("kind", kind),
            ("input", &case.input_fragment),
            ("expected", &case.expected_behavior),
            ("rule", &case.verdict_rule),
        ]);
        let (passed, detail) = match session.chat(ChatRequest::prompt(RoleTag::BundleVerdict, prompt, 0.0)) {
            Ok(text) => parse_verdict(&text),
            Err(e) => (false, format!("verdict unavailable: {e}")),
        };
        cases.push(CaseResult { index, kind: case.kind, passed, detail });
    }
    let failures: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("case {} ({}): {}", c.index + 1, kind_name(c.kind), c.detail))
        .collect();
    GateResult { passed: failures.is_empty(), cases, failure_digest: failures.join("; ") }
}

pub fn kind_name(k: CaseKind) -> &'static str {
    match k {
        CaseKind::Unit => "unit",
        CaseKind::Integration => "integration",
        CaseKind::Negative => "negative",
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BundlePatch<'a> {
    Credit(&'a CreditEvent),
    GateFailure(&'a GateResult),
}

/// Adds the smallest case that captures `patch`, deduplicated by input
/// digest. Over `cap`, the oldest unit case goes first, then the oldest case.
pub fn patch_bundle(bundle: &TestBundle, patch: BundlePatch<'_>, cap: usize) -> TestBundle {
    let case = match patch {
        BundlePatch::Credit(e) => match e.judgment {
            Judgment::Harmful => BundleCase {
                kind: CaseKind::Negative,
                input_fragment: e.attribution_scope.clone(),
                expected_behavior: "the skill does not lead to this outcome".into(),
                verdict_rule: format!("The skill must not cause or permit: {}", e.attribution_scope),
            },
            Judgment::Helpful => BundleCase {
                kind: CaseKind::Unit,
                input_fragment: e.attribution_scope.clone(),
                expected_behavior: "the skill still applies here".into(),
                verdict_rule: format!("The skill must remain consistent with: {}", e.attribution_scope),
            },
            Judgment::Neutral | Judgment::Uncertain => return bundle.clone(),
        },
        BundlePatch::GateFailure(g) => {
            if g.passed || g.failure_digest.is_empty() {
                return bundle.clone();
            }
            BundleCase {
                kind: CaseKind::Integration,
                input_fragment: g.failure_digest.clone(),
                expected_behavior: "the failing case passes".into(),
                verdict_rule: format!("The skill must pass: {}", g.failure_digest),
            }
        }
    };
    if case.input_fragment.trim().is_empty() {
        return bundle.clone();
    }
    let digest = case.input_digest();
    if bundle.cases.iter().any(|c| c.input_digest() == digest) {
        return bundle.clone();
    }
    let mut next = bundle.clone();
    next.cases.push(case);
    while next.cases.len() > cap.max(1) {
        let victim = next.cases.iter().position(|c| c.kind == CaseKind::Unit).unwrap_or(0);
        next.cases.remove(victim);
    }
    next
}

#[derive(Debug, Deserialize)]
struct JudgmentList {
    judgments: Vec<WireJudgment>,
}

#[derive(Debug, Deserialize)]
struct WireJudgment {
    #[serde(default)]
    skill: String,
    #[serde(default)]
    judgment: String,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    scope: String,
}

fn parse_judgments(text: &str) -> Option<Vec<WireJudgment>> {
    let obj = crate::draft::json_object(text)?;
    serde_json::from_str::<JudgmentList>(obj).ok().map(|l| l.judgments)
}

fn render_exposed(skills: &[&Skill]) -> String {
    skills
        .iter()
        .map(|s| {
            format!(
                "- id: {} | name: {} | tools: {} | body: {}",
                s.skill_ref(),
                s.name,
                s.allowed_tools.iter().cloned().collect::<Vec<_>>().join(", "),
                clip(&squash(&s.body), 300)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// One judgment per exposed skill, from a single credit call per trace (with
/// output-parse retries). Unjudged or unparseable skills get `Uncertain`;
/// scopes that do not quote the trace fall back to its last line.
pub fn assign_credit(
    session: &mut OracleSession,
    trace: &Trace,
    utility: f64,
    exposed: &[&Skill],
    task_index: u64,
    config: &RunConfig,
) -> Vec<CreditEvent> {
    if exposed.is_empty() {
        return Vec::new();
    }
    let rendered = trace.render(config.limits.trace);
    let fallback_scope =
        rendered.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("(empty trace)").to_string();
    let prompt = template(RoleTag::Credit).render(&[
        ("trace", &rendered),
        ("utility", &format!("{utility:.3}")),
        ("skills", &render_exposed(exposed)),
    ]);
    let mut parsed = None;
    let mut failure = "credit response unparseable";
    for _ in 0..config.parse_attempts() {
        match session.chat(ChatRequest::prompt(RoleTag::Credit, prompt.clone(), 0.0)) {
            Ok(text) => {
                if let Some(j) = parse_judgments(&text) {
                    parsed = Some(j);
                    break;
                }
            }
            Err(_) => {
                failure = "credit oracle unavailable";
                break;
            }
        }
    }
    let parsed_ok = parsed.is_some();
    let judged = parsed.unwrap_or_default();
    exposed
        .iter()
        .map(|s| {
            let r = s.skill_ref();
            let found = judged.iter().find(|j| {
                let id = j.skill.trim();
                id == r.to_string() || id == r.id.as_str()
            });
            match found {
                Some(j) => {
                    let judgment = Judgment::parse(&j.judgment).unwrap_or(Judgment::Uncertain);
                    let scope = j.scope.trim();
                    let attribution_scope = if !scope.is_empty() && rendered.contains(scope) {
                        scope.to_string()
                    } else {
                        fallback_scope.clone()
                    };
                    CreditEvent {
                        skill: r,
                        task_id: task_index,
                        judgment,
                        rationale: j.rationale.trim().to_string(),
                        attribution_scope,
                    }
                }
                None => CreditEvent {
                    skill: r,
                    task_id: task_index,
                    judgment: Judgment::Uncertain,
                    rationale: if parsed_ok { "not judged".into() } else { failure.into() },
                    attribution_scope: fallback_scope.clone(),
                },
            }
        })
        .collect()
}

/// Text digest of a skill's evidence for the refiner.
pub fn render_evidence(e: &EvidenceState, limit: usize) -> String {
    let mut out = format!(
        "usage: retrieved={} exposed={} executed={}\n",
        e.usage.retrieved_count, e.usage.exposed_count, e.usage.executed_count
    );
    for c in &e.credits {
        out.push_str(&format!(
            "task {} {}: {} ({})\n",
            c.task_id,
            judgment_name(c.judgment),
            c.attribution_scope,
            c.rationale
        ));
    }
    clip(&out, limit).to_string()
}

pub fn judgment_name(j: Judgment) -> &'static str {
    match j {
        Judgment::Helpful => "helpful",
        Judgment::Harmful => "harmful",
        Judgment::Neutral => "neutral",
        Judgment::Uncertain => "uncertain",
    }
}

pub fn render_bundle(b: &TestBundle) -> String {
    if b.cases.is_empty() {
        return "(empty)".to_string();
    }
    b.cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            format!(
                "{}. [{}] input: {} | expected: {} | rule: {}",
                i + 1,
                kind_name(c.kind),
                c.input_fragment,
                c.expected_behavior,
                c.verdict_rule
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// True when the evidence asks for a revision.
pub fn needs_refinement(e: &EvidenceState, last_gate: Option<&GateResult>) -> bool {
    e.credits.iter().any(|c| c.judgment == Judgment::Harmful) || last_gate.is_some_and(|g| !g.passed)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RefineError {
    #[error("only trial or active skills can be refined, not {0:?}")]
    NotRefinable(LifecycleState),
}

/// Asks the refiner for one revised candidate of `skill`. `Ok(None)` when
/// the refiner gives nothing usable; the caller gates and publishes.
pub fn refine(
    session: &mut OracleSession,
    skill: &Skill,
    state: LifecycleState,
    evidence: &EvidenceState,
    rules: &[String],
    config: &RunConfig,
    task_index: u64,
) -> Result<Option<(Skill, TestBundle)>, RefineError> {
    if !matches!(state, LifecycleState::Trial | LifecycleState::Active) {
        return Err(RefineError::NotRefinable(state));
    }
    let prompt = template(RoleTag::Refiner).render(&[
        ("rules", &render_rules(rules)),
        ("skill", &skill_json(skill)),
        ("bundle", &render_bundle(&evidence.bundle)),
        ("evidence", &render_evidence(evidence, config.limits.evidence)),
    ]);
    let origin = DraftOrigin {
        id: skill.id.clone(),
        version: skill.version + 1,
        parent: Some(skill.skill_ref()),
        role: Role::Refiner,
        task: task_index,
    };
    for _ in 0..config.parse_attempts() {
        let Ok(text) = session.chat(ChatRequest::prompt(RoleTag::Refiner, prompt.clone(), config.role_temperature))
        else {
            return Ok(None);
        };
        let Some((draft, cases)) = parse_revision(&text) else { continue };
        let Some((candidate, _)) = draft.into_skill(&origin) else { continue };
        let target = candidate.skill_ref();
        let bundle = match cases.map(|c| c.into_iter().filter_map(|c| c.into_case()).collect::<Vec<_>>()) {
            Some(cases) if !cases.is_empty() => TestBundle { target, cases },
            _ => evidence.bundle.clone().retarget(target),
        };
        return Ok(Some((candidate, bundle)));
    }
    Ok(None)
}

/// Tools named by a skill that the trace called successfully.
pub fn executed_tools(skill: &Skill, trace: &Trace) -> BTreeSet<String> {
    let ok = trace.successful_tools();
    skill.allowed_tools.intersection(&ok).cloned().collect()
}
