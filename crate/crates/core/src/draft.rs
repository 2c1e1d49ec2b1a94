//! Parsing of role responses into skill candidates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::skill::{BundleCase, CaseKind, Role, Semantics, Skill, SkillId, SkillRef, TestBundle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CaseDraft {
    #[serde(default)]
    pub kind: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub expected: String,
    #[serde(default)]
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SkillDraft {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub semantics: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub triggers: Vec<String>,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub bundle: Option<Vec<CaseDraft>>,
}

#[derive(Debug, Deserialize)]
struct SkillList {
    skills: Vec<SkillDraft>,
}

#[derive(Debug, Deserialize)]
struct Revision {
    skill: SkillDraft,
    #[serde(default)]
    bundle: Option<Vec<CaseDraft>>,
}

/// The outermost `{ ... }` span of a response, tolerating prose or code
/// fences around it.
pub fn json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// `{"skills":[...]}`. Returns `None` when the response is not parseable.
pub fn parse_skill_list(text: &str) -> Option<Vec<SkillDraft>> {
    let obj = json_object(text)?;
    serde_json::from_str::<SkillList>(obj).ok().map(|l| l.skills)
}

/// `{"skill":{...},"bundle":[...]}`.
pub fn parse_revision(text: &str) -> Option<(SkillDraft, Option<Vec<CaseDraft>>)> {
    let obj = json_object(text)?;
    let rev = serde_json::from_str::<Revision>(obj).ok()?;
    let bundle = rev.bundle.or_else(|| rev.skill.bundle.clone());
    Some((rev.skill, bundle))
}

impl CaseDraft {
    pub fn into_case(self) -> Option<BundleCase> {
        let kind = match self.kind.trim().to_ascii_lowercase().as_str() {
            "unit" | "" => CaseKind::Unit,
            "integration" => CaseKind::Integration,
            "negative" => CaseKind::Negative,
            _ => return None,
        };
        if self.input.trim().is_empty() {
            return None;
        }
        Some(BundleCase {
            kind,
            input_fragment: self.input,
            expected_behavior: self.expected,
            verdict_rule: self.rule,
        })
    }
}

/// Identity and provenance for a draft being turned into a [`Skill`].
#[derive(Debug, Clone)]
pub struct DraftOrigin {
    pub id: SkillId,
    pub version: u32,
    pub parent: Option<SkillRef>,
    pub role: Role,
    pub task: u64,
}

impl SkillDraft {
    /// `None` when a required field is missing or the semantics is unknown.
    pub fn into_skill(self, origin: &DraftOrigin) -> Option<(Skill, Option<Vec<BundleCase>>)> {
        let semantics = Semantics::parse(&self.semantics)?;
        if self.name.trim().is_empty() || self.body.trim().is_empty() {
            return None;
        }
        let clean = |v: Vec<String>| -> BTreeSet<String> {
            v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        let skill = Skill {
            id: origin.id.clone(),
            version: origin.version,
            parent: origin.parent.clone(),
            semantics,
            name: self.name.trim().to_string(),
            description: self.description.trim().to_string(),
            trigger_conditions: self
                .triggers
                .into_iter()
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect(),
            allowed_tools: clean(self.tools),
            domains: clean(self.domains),
            body: self.body,
            source_role: origin.role,
            created_at_task: origin.task,
        };
        let cases = self
            .bundle
            .map(|cases| cases.into_iter().filter_map(CaseDraft::into_case).collect::<Vec<_>>());
        Some((skill, cases))
    }
}

/// Bundle for a freshly drafted skill.
pub fn bundle_for(skill: &Skill, cases: Option<Vec<BundleCase>>) -> TestBundle {
    TestBundle { target: skill.skill_ref(), cases: cases.unwrap_or_default() }
}

/// Renders a skill as the JSON object shape roles read and write.
pub fn skill_json(skill: &Skill) -> String {
    serde_json::json!({
        "id": skill.id.as_str(),
        "version": skill.version,
        "name": skill.name,
        "semantics": match skill.semantics {
            Semantics::CallableFunction => "callable_function",
            Semantics::Workflow => "workflow",
            Semantics::Knowledge => "knowledge",
        },
        "description": skill.description,
        "triggers": skill.trigger_conditions,
        "tools": skill.allowed_tools,
        "domains": skill.domains,
        "body": skill.body,
    })
    .to_string()
}
