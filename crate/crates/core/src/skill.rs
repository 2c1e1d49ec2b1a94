//! Persistent domain types and the skill lifecycle state machine.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable identifier assigned at first publish and shared by every version.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SkillId(pub String);

impl SkillId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A specific version of a skill.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SkillRef {
    pub id: SkillId,
    pub version: u32,
}

impl SkillRef {
    pub fn new(id: SkillId, version: u32) -> Self {
        Self { id, version }
    }
}

impl fmt::Display for SkillRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.id, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semantics {
    CallableFunction,
    Workflow,
    Knowledge,
}

impl Semantics {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "callable_function" | "function" | "callable" => Some(Self::CallableFunction),
            "workflow" => Some(Self::Workflow),
            "knowledge" => Some(Self::Knowledge),
            _ => None,
        }
    }
}

/// The three maintenance roles that produce or revise skills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Extractor,
    Refactorer,
    Refiner,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Extractor, Role::Refactorer, Role::Refiner];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Extractor => "extractor",
            Role::Refactorer => "refactorer",
            Role::Refiner => "refiner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s.trim())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skill {
    pub id: SkillId,
    pub version: u32,
    pub parent: Option<SkillRef>,
    pub semantics: Semantics,
    pub name: String,
    pub description: String,
    pub trigger_conditions: Vec<String>,
    pub allowed_tools: BTreeSet<String>,
    pub domains: BTreeSet<String>,
    pub body: String,
    pub source_role: Role,
    pub created_at_task: u64,
}

impl Skill {
    pub fn skill_ref(&self) -> SkillRef {
        SkillRef::new(self.id.clone(), self.version)
    }

    /// Dedup key over name and trigger conditions.
    pub fn signature_digest(&self) -> String {
        let key = format!(
            "{}\u{1f}{}",
            crate::text::squash(&self.name.to_lowercase()),
            self.trigger_conditions
                .iter()
                .map(|t| crate::text::squash(&t.to_lowercase()))
                .collect::<Vec<_>>()
                .join("\u{1f}")
        );
        crate::text::digest(&key)
    }
}

pub const VIOLATION_VERSION: &str = "version must be at least 1";
pub const VIOLATION_PARENT_REQUIRED: &str = "parent link required";
pub const VIOLATION_PARENT_FORBIDDEN: &str = "parent link not allowed for a first extractor/refactorer version";
pub const VIOLATION_BODY: &str = "body empty";
pub const VIOLATION_NAME: &str = "name empty";

/// Every violated invariant of a candidate, in a fixed order. An empty report
/// means the candidate is storable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

pub fn validate_skill(candidate: &Skill) -> ValidationReport {
    let mut violations = Vec::new();
    if candidate.version < 1 {
        violations.push(VIOLATION_VERSION.to_string());
    }
    let needs_parent = candidate.source_role == Role::Refiner || candidate.version > 1;
    match (needs_parent, candidate.parent.is_some()) {
        (true, false) => violations.push(VIOLATION_PARENT_REQUIRED.to_string()),
        (false, true) => violations.push(VIOLATION_PARENT_FORBIDDEN.to_string()),
        _ => {}
    }
    if candidate.body.trim().is_empty() {
        violations.push(VIOLATION_BODY.to_string());
    }
    if candidate.name.trim().is_empty() {
        violations.push(VIOLATION_NAME.to_string());
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleState {
    Trial,
    Active,
    Disabled,
    Archived,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 4] = [Self::Trial, Self::Active, Self::Disabled, Self::Archived];

    pub fn is_live(self) -> bool {
        self != Self::Archived
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    GatePass,
    GateFail,
    FilterDisable,
    Superseded,
    Retire,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 5] = [
        Self::GatePass,
        Self::GateFail,
        Self::FilterDisable,
        Self::Superseded,
        Self::Retire,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal lifecycle transition: {event:?} from {state:?}")]
pub struct IllegalTransition {
    pub state: LifecycleState,
    pub event: LifecycleEvent,
}

/// Legal transition table. Everything not listed is rejected; archived is
/// terminal and disabled skills are never re-enabled.
pub fn transition(state: LifecycleState, event: LifecycleEvent) -> Result<LifecycleState, IllegalTransition> {
    use LifecycleEvent as E;
    use LifecycleState as S;
    match (state, event) {
        (S::Trial, E::GatePass) => Ok(S::Active),
        (S::Trial, E::GateFail) => Ok(S::Archived),
        (S::Trial, E::Superseded) => Ok(S::Archived),
        (S::Active, E::FilterDisable) => Ok(S::Disabled),
        (S::Active, E::Superseded) => Ok(S::Archived),
        (S::Disabled, E::Retire) => Ok(S::Archived),
        _ => Err(IllegalTransition { state, event }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Unit,
    Integration,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleCase {
    pub kind: CaseKind,
    pub input_fragment: String,
    pub expected_behavior: String,
    pub verdict_rule: String,
}

impl BundleCase {
    pub fn input_digest(&self) -> String {
        crate::text::digest(&crate::text::squash(&self.input_fragment))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBundle {
    pub target: SkillRef,
    pub cases: Vec<BundleCase>,
}

impl TestBundle {
    pub fn new(target: SkillRef) -> Self {
        Self { target, cases: Vec::new() }
    }

    pub fn retarget(mut self, target: SkillRef) -> Self {
        self.target = target;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Helpful,
    Harmful,
    Neutral,
    Uncertain,
}

impl Judgment {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "helpful" => Some(Self::Helpful),
            "harmful" => Some(Self::Harmful),
            "neutral" => Some(Self::Neutral),
            "uncertain" => Some(Self::Uncertain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditEvent {
    pub skill: SkillRef,
    pub task_id: u64,
    pub judgment: Judgment,
    pub rationale: String,
    pub attribution_scope: String,
}

/// Lifetime counters. All three only ever grow, and a skill can only be
/// executed in a task where it was exposed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub retrieved_count: u64,
    pub executed_count: u64,
    pub exposed_count: u64,
}

impl UsageStats {
    pub fn add(&mut self, other: UsageStats) {
        self.retrieved_count += other.retrieved_count;
        self.executed_count += other.executed_count;
        self.exposed_count += other.exposed_count;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceState {
    pub bundle: TestBundle,
    pub credits: Vec<CreditEvent>,
    pub usage: UsageStats,
}

/// Hard cap on rules per role.
pub const MAX_META_RULES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaRuleSet {
    pub role: Role,
    pub rules: Vec<String>,
    pub updated_at_task: u64,
}

impl MetaRuleSet {
    pub fn empty(role: Role) -> Self {
        Self { role, rules: Vec::new(), updated_at_task: 0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn workflow_skill() -> Skill {
        Skill {
            id: SkillId::new("sk-0001"),
            version: 1,
            parent: None,
            semantics: Semantics::Workflow,
            name: "brake before start".into(),
            description: "press the brake before starting the engine".into(),
            trigger_conditions: vec!["start the engine".into()],
            allowed_tools: BTreeSet::from(["vehicle_press_brake".to_string()]),
            domains: BTreeSet::from(["vehicle".to_string()]),
            body: "Always call vehicle_press_brake before vehicle_start_engine.".into(),
            source_role: Role::Extractor,
            created_at_task: 1,
        }
    }

    #[test]
    fn valid_workflow_has_empty_report() {
        assert!(validate_skill(&workflow_skill()).is_empty());
    }

    #[test]
    fn version_two_without_parent_is_reported() {
        let mut s = workflow_skill();
        s.version = 2;
        assert!(validate_skill(&s).contains("parent link required"));
    }

    #[test]
    fn empty_body_is_reported() {
        let mut s = workflow_skill();
        s.body = "   ".into();
        assert!(validate_skill(&s).contains("body empty"));
    }

    #[test]
    fn refiner_output_needs_parent_even_at_version_one() {
        let mut s = workflow_skill();
        s.source_role = Role::Refiner;
        assert!(validate_skill(&s).contains("parent link required"));
        s.parent = Some(SkillRef::new(SkillId::new("sk-0001"), 1));
        assert!(validate_skill(&s).is_empty());
    }

    #[test]
    fn several_violations_are_all_listed() {
        let mut s = workflow_skill();
        s.version = 0;
        s.body.clear();
        s.parent = Some(SkillRef::new(SkillId::new("x"), 1));
        let r = validate_skill(&s);
        assert!(r.contains(VIOLATION_VERSION));
        assert!(r.contains(VIOLATION_BODY));
        assert!(r.contains("parent link not allowed"));
    }

    #[test]
    fn legal_transitions_move_as_expected() {
        use LifecycleEvent as E;
        use LifecycleState as S;
        assert_eq!(transition(S::Trial, E::GatePass), Ok(S::Active));
        assert_eq!(transition(S::Active, E::FilterDisable), Ok(S::Disabled));
        assert!(transition(S::Archived, E::GatePass).is_err());
    }

    #[test]
    fn transition_table_is_exhaustively_as_declared() {
        use LifecycleEvent as E;
        use LifecycleState as S;
        let legal = [
            (S::Trial, E::GatePass, S::Active),
            (S::Trial, E::GateFail, S::Archived),
            (S::Trial, E::Superseded, S::Archived),
            (S::Active, E::FilterDisable, S::Disabled),
            (S::Active, E::Superseded, S::Archived),
            (S::Disabled, E::Retire, S::Archived),
        ];
        let mut rejected = 0;
        for s in LifecycleState::ALL {
            for e in LifecycleEvent::ALL {
                match legal.iter().find(|(ls, le, _)| *ls == s && *le == e) {
                    Some((_, _, next)) => assert_eq!(transition(s, e), Ok(*next)),
                    None => {
                        assert_eq!(transition(s, e), Err(IllegalTransition { state: s, event: e }));
                        rejected += 1;
                    }
                }
            }
        }
        assert_eq!(rejected, 14);
        for e in LifecycleEvent::ALL {
            assert!(transition(S::Archived, e).is_err());
        }
        assert!(transition(S::Disabled, E::GatePass).is_err());
    }

    #[test]
    fn semantics_and_judgment_parse() {
        assert_eq!(Semantics::parse("callable-function"), Some(Semantics::CallableFunction));
        assert_eq!(Semantics::parse("Workflow"), Some(Semantics::Workflow));
        assert_eq!(Semantics::parse("poem"), None);
        assert_eq!(Judgment::parse(" Helpful "), Some(Judgment::Helpful));
        assert_eq!(Judgment::parse("meh"), None);
    }
}
