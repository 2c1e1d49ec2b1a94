//! Skill-producing roles and their learned rules: extraction from single
//! traces, refactoring of overlap groups, replay buffers of produced skills
//! and the rule updates that read them.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::draft::{parse_skill_list, DraftOrigin};
use crate::graph::{CandidateGroup, OverlapGraph};
use crate::maintenance::{judgment_name, CreditCounts, GateResult};
use crate::oracle::templates::{render_rules, template};
use crate::oracle::{ChatRequest, OracleSession, RoleTag};
use crate::skill::{
    BundleCase, CreditEvent, Judgment, LifecycleState, MetaRuleSet, Role, Skill, SkillId, SkillRef, UsageStats,
    MAX_META_RULES,
};
use crate::text::{clip, fnv1a64, squash, words};
use crate::trace::Trace;

/// A drafted skill with its proposed bundle cases, before gating.
pub type Candidate = (Skill, Option<Vec<BundleCase>>);

fn render_existing(existing: &[&Skill]) -> String {
    if existing.is_empty() {
        return "(none)".to_string();
    }
    existing
        .iter()
        .map(|s| format!("- {}: {}", s.name, s.trigger_conditions.join("; ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Samples the extractor `config.extractor_samples` times on one trace and
/// merges the proposals. Drafts that duplicate each other or an existing
/// skill (same name or same signature) are dropped.
pub fn extract(
    session: &mut OracleSession,
    trace: &Trace,
    utility: f64,
    rules: &[String],
    existing: &[&Skill],
    task_index: u64,
    config: &RunConfig,
) -> Vec<Candidate> {
    let t = template(RoleTag::Extractor);
    let rendered = trace.render(config.limits.trace);
    let rules = render_rules(rules);
    let existing_text = render_existing(existing);
    let mut seen: BTreeSet<String> = existing.iter().map(|s| s.signature_digest()).collect();
    let mut names: BTreeSet<String> = existing.iter().map(|s| s.name.to_lowercase()).collect();
    let origin = DraftOrigin { id: SkillId::default(), version: 1, parent: None, role: Role::Extractor, task: task_index };
    let mut out = Vec::new();
    let n = config.extractor_samples;
    for i in 1..=n {
        let prompt = t.render(&[
            ("rules", &rules),
            ("existing", &existing_text),
            ("sample", &i.to_string()),
            ("samples", &n.to_string()),
            ("trace", &rendered),
            ("utility", &format!("{utility:.3}")),
        ]);
        let Ok(text) = session.chat(ChatRequest::prompt(RoleTag::Extractor, prompt, config.extractor_temperature))
        else {
            continue;
        };
        for draft in parse_skill_list(&text).unwrap_or_default() {
            let Some((skill, cases)) = draft.into_skill(&origin) else { continue };
            if !seen.insert(skill.signature_digest()) || !names.insert(skill.name.to_lowercase()) {
                continue;
            }
            out.push((skill, cases));
        }
    }
    out
}

fn render_group(graph: &OverlapGraph, group: &CandidateGroup) -> String {
    group
        .members
        .iter()
        .filter_map(|m| graph.node(m))
        .map(|n| {
            let origin = match n.source_task() {
                Some(t) => format!("task {t}"),
                None => format!("skill {}", n.skill().map(|r| r.to_string()).unwrap_or_default()),
            };
            format!(
                "node {} | {} | tools: {} | errors: {} | text: {}",
                n.id,
                origin,
                n.tools.iter().cloned().collect::<Vec<_>>().join(", "),
                n.errors.join(" ;; "),
                clip(&squash(&n.text), 400)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Whether every member of the group supports the candidate: declared tools
/// must appear in every member; without tools, every member must share a
/// content word with the body.
pub fn supported_by_group(candidate: &Skill, graph: &OverlapGraph, group: &CandidateGroup) -> bool {
    let members: Vec<_> = group.members.iter().filter_map(|m| graph.node(m)).collect();
    if members.is_empty() {
        return false;
    }
    if !candidate.allowed_tools.is_empty() {
        return members.iter().all(|n| candidate.allowed_tools.iter().all(|t| n.tools.contains(t)));
    }
    let body: BTreeSet<String> = words(&candidate.body).into_iter().filter(|w| w.len() >= 4).collect();
    members.iter().all(|n| words(&n.text).iter().any(|w| body.contains(w)))
}

/// One refactoring call for a candidate group. Unsupported drafts are
/// dropped.
pub fn refactor(
    session: &mut OracleSession,
    graph: &OverlapGraph,
    group: &CandidateGroup,
    rules: &[String],
    task_index: u64,
    config: &RunConfig,
) -> Vec<Candidate> {
    let revision = if group.revision {
        let refs: Vec<String> = group.skills(graph).iter().map(|r| r.to_string()).collect();
        format!("yes ({})", refs.join(", "))
    } else {
        "no".to_string()
    };
    let prompt = template(RoleTag::Refactorer).render(&[
        ("rules", &render_rules(rules)),
        ("purity", group.purity.as_str()),
        ("revision", &revision),
        ("group", &render_group(graph, group)),
    ]);
    let origin =
        DraftOrigin { id: SkillId::default(), version: 1, parent: None, role: Role::Refactorer, task: task_index };
    for _ in 0..config.parse_attempts() {
        let Ok(text) = session.chat(ChatRequest::prompt(RoleTag::Refactorer, prompt.clone(), config.role_temperature))
        else {
            return Vec::new();
        };
        let Some(drafts) = parse_skill_list(&text) else { continue };
        return drafts
            .into_iter()
            .filter_map(|d| d.into_skill(&origin))
            .filter(|(s, _)| supported_by_group(s, graph, group))
            .collect();
    }
    Vec::new()
}

/// What became of one produced skill version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub skill: SkillRef,
    pub name: String,
    pub signature: String,
    pub state: LifecycleState,
    pub credit: CreditCounts,
    pub usage: UsageStats,
    pub bundle_cases: usize,
    pub gate_passed: bool,
    pub gate_digest: String,
    /// Most recent non-neutral attribution scopes, oldest first.
    pub scopes: Vec<String>,
    pub parent: Option<SkillRef>,
    pub updated_at_task: u64,
}

impl ReplayRow {
    pub fn is_mature(&self, min_exposures: u64) -> bool {
        self.usage.exposed_count >= min_exposures
    }
}

/// Rows keyed by skill version; recording a version again replaces its row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub role: Role,
    rows: BTreeMap<SkillRef, ReplayRow>,
}

impl ReplayBuffer {
    pub fn new(role: Role) -> Self {
        Self { role, rows: BTreeMap::new() }
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReplayRow> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mature(&self, min_exposures: u64) -> Vec<&ReplayRow> {
        self.rows.values().filter(|r| r.is_mature(min_exposures)).collect()
    }

    pub fn insert(&mut self, row: ReplayRow) {
        self.rows.insert(row.skill.clone(), row);
    }
}

/// Everything the buffer needs to know about a produced version.
#[derive(Debug, Clone, Copy)]
pub struct Outcome<'a> {
    pub skill: &'a Skill,
    pub state: LifecycleState,
    pub gate: &'a GateResult,
    pub credit: CreditCounts,
    pub usage: UsageStats,
    pub bundle_cases: usize,
    pub credits: &'a [CreditEvent],
}

pub const ROW_SCOPES: usize = 3;

/// Upserts the row for `outcome.skill` into the buffer of its source role.
pub fn record_outcome(buffer: &mut ReplayBuffer, outcome: Outcome<'_>, task_index: u64) {
    debug_assert_eq!(buffer.role, outcome.skill.source_role);
    let mut scopes: Vec<String> = outcome
        .credits
        .iter()
        .filter(|c| matches!(c.judgment, Judgment::Helpful | Judgment::Harmful))
        .map(|c| format!("{}: {}", judgment_name(c.judgment), clip(&c.attribution_scope, 200)))
        .collect();
    let start = scopes.len().saturating_sub(ROW_SCOPES);
    scopes.drain(..start);
    buffer.insert(ReplayRow {
        skill: outcome.skill.skill_ref(),
        name: outcome.skill.name.clone(),
        signature: outcome.skill.signature_digest(),
        state: outcome.state,
        credit: outcome.credit,
        usage: outcome.usage,
        bundle_cases: outcome.bundle_cases,
        gate_passed: outcome.gate.passed,
        gate_digest: outcome.gate.failure_digest.clone(),
        scopes,
        parent: outcome.skill.parent.clone(),
        updated_at_task: task_index,
    });
}

fn state_name(s: LifecycleState) -> &'static str {
    match s {
        LifecycleState::Trial => "trial",
        LifecycleState::Active => "active",
        LifecycleState::Disabled => "disabled",
        LifecycleState::Archived => "archived",
    }
}

pub fn render_row(r: &ReplayRow) -> String {
    let mut out = format!(
        "- {} \"{}\" [{}] helpful={} harmful={} neutral={} uncertain={} exposed={} executed={} cases={} gate={}",
        r.skill,
        r.name,
        state_name(r.state),
        r.credit.helpful,
        r.credit.harmful,
        r.credit.neutral,
        r.credit.uncertain,
        r.usage.exposed_count,
        r.usage.executed_count,
        r.bundle_cases,
        if r.gate_passed { "pass".to_string() } else { format!("fail ({})", r.gate_digest) },
    );
    if let Some(p) = &r.parent {
        out.push_str(&format!(" parent={p}"));
    }
    for s in &r.scopes {
        out.push_str("\n  ");
        out.push_str(s);
    }
    out
}

/// Seed for a role's buffer sample at a given task.
pub fn sample_seed(run_seed: u64, task_index: u64, role: Role) -> u64 {
    run_seed ^ fnv1a64(format!("{task_index}:{}", role.as_str()).as_bytes())
}

/// Up to `n` mature rows drawn uniformly without replacement, returned in
/// key order.
pub fn sample_rows<'a>(rows: &[&'a ReplayRow], n: usize, seed: u64) -> Vec<&'a ReplayRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amount = n.min(rows.len());
    let mut idx = rand::seq::index::sample(&mut rng, rows.len(), amount).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

/// Canonical rule text: list markers stripped, whitespace collapsed, first
/// sentence only, ending in a period.
pub fn normalize_rule(raw: &str) -> Option<String> {
    let mut s = squash(raw);
    loop {
        let t = s.trim_start();
        let stripped = if let Some(r) = t.strip_prefix(['-', '*', '•']) {
            r
        } else {
            let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 && t[digits..].starts_with(['.', ')']) {
                &t[digits + 1..]
            } else {
                break;
            }
        };
        s = stripped.trim_start().to_string();
    }
    let s = s.trim();
    let s = match s.find(". ") {
        Some(i) => &s[..i],
        None => s,
    };
    let s = s.trim_end_matches(['.', ' ']);
    if s.is_empty() {
        return None;
    }
    Some(format!("{s}."))
}

/// Normalized, deduplicated (case-insensitively), capped rule list.
pub fn normalize_rules<I: IntoIterator<Item = S>, S: AsRef<str>>(raw: I) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in raw {
        if let Some(n) = normalize_rule(r.as_ref()) {
            if seen.insert(n.to_lowercase()) {
                out.push(n);
            }
        }
        if out.len() == MAX_META_RULES {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaResponse {
    pub analysis: String,
    pub summary: String,
    pub rules: Vec<String>,
}

fn section_of(line: &str) -> Option<&'static str> {
    let t = line.trim();
    if !t.starts_with('#') {
        return None;
    }
    let name = t.trim_start_matches('#').trim().trim_end_matches(':').to_ascii_lowercase();
    match name.as_str() {
        "analysis" => Some("analysis"),
        "summary" => Some("summary"),
        "rules" => Some("rules"),
        _ => None,
    }
}

/// Parses the three-section meta response. `None` unless all three sections
/// are present and at least one rule survives normalization.
pub fn parse_meta_response(text: &str) -> Option<MetaResponse> {
    let mut sections: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut current = None;
    for line in text.lines() {
        if let Some(s) = section_of(line) {
            current = Some(s);
            sections.entry(s).or_default();
            continue;
        }
        if let Some(s) = current {
            sections.entry(s).or_default().push(line);
        }
    }
    let analysis = sections.get("analysis")?.join("\n").trim().to_string();
    let summary = sections.get("summary")?.join("\n").trim().to_string();
    let rules = normalize_rules(sections.get("rules")?.iter().filter(|l| !l.trim().is_empty()));
    if rules.is_empty() {
        return None;
    }
    Some(MetaResponse { analysis, summary, rules })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOutcome {
    /// No mature rows; no call made.
    NoEvidence,
    Updated,
    Unparseable,
    OracleFailed,
}

/// One rule update for `role`. Anything short of a parseable response
/// leaves the rules unchanged.
pub fn update_role_rules(
    session: &mut OracleSession,
    current: &MetaRuleSet,
    buffer: &ReplayBuffer,
    config: &RunConfig,
    task_index: u64,
) -> (MetaRuleSet, MetaOutcome) {
    let mature = buffer.mature(config.maturity_exposures);
    if mature.is_empty() {
        return (current.clone(), MetaOutcome::NoEvidence);
    }
    let sample = sample_rows(&mature, config.buffer_sample, sample_seed(config.seed, task_index, current.role));
    let digest = sample.iter().map(|r| render_row(r)).collect::<Vec<_>>().join("\n");
    let prompt = template(RoleTag::Meta).render(&[
        ("role", current.role.as_str()),
        ("rules", &render_rules(&current.rules)),
        ("evidence", clip(&digest, config.limits.evidence)),
    ]);
    match session.chat(ChatRequest::prompt(RoleTag::Meta, prompt, config.role_temperature)) {
        Err(_) => (current.clone(), MetaOutcome::OracleFailed),
        Ok(text) => match parse_meta_response(&text) {
            None => (current.clone(), MetaOutcome::Unparseable),
            Some(resp) => (
                MetaRuleSet { role: current.role, rules: resp.rules, updated_at_task: task_index },
                MetaOutcome::Updated,
            ),
        },
    }
}

/// Rules per role in the export format: `[role]` headers followed by
/// numbered rules, roles separated by a blank line.
pub fn export_rules(sets: &BTreeMap<Role, MetaRuleSet>) -> String {
    let mut out = String::new();
    for role in Role::ALL {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("[{}]\n", role.as_str()));
        if let Some(set) = sets.get(&role) {
            for (i, r) in set.rules.iter().enumerate() {
                out.push_str(&format!("{}. {r}\n", i + 1));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RulesFileError {
    #[error("line {0}: rule outside a [role] section")]
    NoSection(usize),
    #[error("line {0}: unknown role {1:?}")]
    UnknownRole(usize, String),
}

/// Inverse of [`export_rules`]. Rule text is kept verbatim after the
/// numbering.
pub fn import_rules(text: &str) -> Result<BTreeMap<Role, Vec<String>>, RulesFileError> {
    let mut out: BTreeMap<Role, Vec<String>> = BTreeMap::new();
    let mut current = None;
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let role = Role::parse(name).ok_or_else(|| RulesFileError::UnknownRole(n + 1, name.to_string()))?;
            out.entry(role).or_default();
            current = Some(role);
            continue;
        }
        let role = current.ok_or(RulesFileError::NoSection(n + 1))?;
        let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
        let rule = if digits > 0 && t[digits..].starts_with(". ") { &t[digits + 2..] } else { t };
        out.entry(role).or_default().push(rule.to_string());
    }
    Ok(out)
}
