//! Versioned skill repository: skills, bundles, the evidence ledger, role
//! rules and buffers, and the overlap graph, with checksummed persistence.

mod ledger;
mod persist;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ledger::{LedgerEntry, LedgerRecord};
pub use persist::{read_checked, with_trailer, CALL_LOG_FILE};

use crate::config::RunConfig;
use crate::graph::OverlapGraph;
use crate::maintenance::{CreditTable, GateResult};
use crate::retrieval::{SkillRetrievalView, TrustInputs};
use crate::roles::ReplayBuffer;
use crate::skill::{
    transition, validate_skill, CreditEvent, EvidenceState, IllegalTransition, LifecycleEvent, LifecycleState,
    MetaRuleSet, Role, Skill, SkillId, SkillRef, TestBundle, UsageStats, ValidationReport,
};
use crate::text::{digest, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillVersion {
    pub skill: Skill,
    pub state: LifecycleState,
    /// The gate that decided whether this version was released.
    pub release_gate: GateResult,
    pub bundle: TestBundle,
    /// Bundle size when the bundle last passed a gate.
    pub gated_cases: usize,
}

impl SkillVersion {
    pub fn bundle_dirty(&self) -> bool {
        self.bundle.cases.len() != self.gated_cases
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("invalid candidate: {}", .0.violations.join("; "))]
    InvalidCandidate(ValidationReport),
    #[error("duplicate version {0}")]
    DuplicateVersion(SkillRef),
    #[error("unknown skill {0}")]
    UnknownSkill(String),
    #[error("skill {skill} is {state:?} and cannot be revised")]
    IllegalState { skill: SkillRef, state: LifecycleState },
    #[error(transparent)]
    Lifecycle(#[from] IllegalTransition),
    #[error("{0} cannot be released without a passing gate")]
    UngatedRelease(SkillRef),
    #[error("bundle targets {bundle}, expected {skill}")]
    BundleMismatch { skill: SkillRef, bundle: SkillRef },
    #[error("corrupt repository: {0}")]
    CorruptRepository(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub next_skill: u64,
    pub tasks_seen: u64,
    /// Bumped by every mutation.
    pub revision: u64,
}

/// Outcome of a revision attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Revision {
    /// New version is live; the previous one is archived.
    Released(SkillRef),
    /// Gate failed; the new version is stored archived and the previous one
    /// is untouched.
    Rejected(SkillRef),
}

/// Read-only view of the exposable skills, taken at a batch boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreSnapshot {
    pub views: Vec<SkillRetrievalView>,
    pub skills: BTreeMap<SkillRef, Skill>,
}

impl StoreSnapshot {
    pub fn skill(&self, r: &SkillRef) -> Option<&Skill> {
        self.skills.get(r)
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub released_versions: usize,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    config: RunConfig,
    skills: BTreeMap<SkillId, BTreeMap<u32, SkillVersion>>,
    ledger: Vec<LedgerRecord>,
    credit: CreditTable,
    usage: BTreeMap<SkillRef, UsageStats>,
    meta: BTreeMap<Role, MetaRuleSet>,
    buffers: BTreeMap<Role, ReplayBuffer>,
    pub graph: OverlapGraph,
    counters: Counters,
}

impl Repository {
    pub fn new(config: RunConfig) -> Self {
        Self {
            config,
            skills: BTreeMap::new(),
            ledger: Vec::new(),
            credit: CreditTable::default(),
            usage: BTreeMap::new(),
            meta: Role::ALL.into_iter().map(|r| (r, MetaRuleSet::empty(r))).collect(),
            buffers: Role::ALL.into_iter().map(|r| (r, ReplayBuffer::new(r))).collect(),
            graph: OverlapGraph::default(),
            counters: Counters::default(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: RunConfig) {
        self.config = config;
        self.counters.revision += 1;
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn tasks_seen(&self) -> u64 {
        self.counters.tasks_seen
    }

    pub fn mark_task_seen(&mut self) -> u64 {
        self.counters.tasks_seen += 1;
        self.counters.revision += 1;
        self.counters.tasks_seen
    }

    fn append(&mut self, entry: LedgerEntry) {
        let ordinal = self.ledger.len() as u64 + 1;
        self.ledger.push(LedgerRecord { ordinal, entry });
        self.counters.revision += 1;
    }

    pub fn ledger(&self) -> &[LedgerRecord] {
        &self.ledger
    }

    fn fresh_id(&mut self) -> SkillId {
        loop {
            self.counters.next_skill += 1;
            let id = SkillId::new(format!("sk-{:04}", self.counters.next_skill));
            if !self.skills.contains_key(&id) {
                return id;
            }
        }
    }

    /// Stores a first version. A passing gate releases it on trial; a
    /// failing gate stores it archived with the failure.
    pub fn publish(
        &mut self,
        mut candidate: Skill,
        bundle: TestBundle,
        gate: GateResult,
        task: u64,
    ) -> Result<SkillRef, StoreError> {
        if candidate.id.is_empty() {
            candidate.id = self.fresh_id();
        } else if let Some(v) = self.skills.get(&candidate.id) {
            let version = if v.contains_key(&candidate.version) { candidate.version } else { 1 };
            return Err(StoreError::DuplicateVersion(SkillRef::new(candidate.id, version)));
        }
        let report = validate_skill(&candidate);
        if !report.is_empty() {
            return Err(StoreError::InvalidCandidate(report));
        }
        if candidate.version != 1 {
            return Err(StoreError::UnknownSkill(candidate.id.to_string()));
        }
        let r = candidate.skill_ref();
        let bundle = bundle.retarget(r.clone());
        let (state, event) = if gate.passed {
            (LifecycleState::Trial, None)
        } else {
            (LifecycleState::Archived, Some(LifecycleEvent::GateFail))
        };
        let gated_cases = if gate.passed { bundle.cases.len() } else { 0 };
        self.append(LedgerEntry::Lifecycle {
            task,
            skill: r.clone(),
            from: None,
            to: state,
            event,
            gate_passed: Some(gate.passed),
        });
        self.skills.entry(r.id.clone()).or_default().insert(
            1,
            SkillVersion { skill: candidate, state, release_gate: gate, bundle, gated_cases },
        );
        Ok(r)
    }

    /// Latest trial, active or disabled version of a skill.
    pub fn live(&self, id: &SkillId) -> Option<&SkillVersion> {
        self.skills.get(id)?.values().rev().find(|v| v.state.is_live())
    }

    /// Stores the next version of `id`. The candidate's id, version and
    /// parent link are set from the current live version, which must be on
    /// trial or active.
    pub fn revise(
        &mut self,
        id: &SkillId,
        mut candidate: Skill,
        bundle: TestBundle,
        gate: GateResult,
        task: u64,
    ) -> Result<Revision, StoreError> {
        let versions = self.skills.get(id).ok_or_else(|| StoreError::UnknownSkill(id.to_string()))?;
        let next_version = versions.keys().next_back().copied().unwrap_or(0) + 1;
        let current = versions
            .values()
            .rev()
            .find(|v| v.state.is_live())
            .ok_or_else(|| StoreError::IllegalState {
                skill: SkillRef::new(id.clone(), next_version - 1),
                state: LifecycleState::Archived,
            })?;
        if !matches!(current.state, LifecycleState::Trial | LifecycleState::Active) {
            return Err(StoreError::IllegalState { skill: current.skill.skill_ref(), state: current.state });
        }
        let old_ref = current.skill.skill_ref();
        let old_state = current.state;
        candidate.id = id.clone();
        candidate.version = next_version;
        candidate.parent = Some(old_ref.clone());
        let report = validate_skill(&candidate);
        if !report.is_empty() {
            return Err(StoreError::InvalidCandidate(report));
        }
        let new_ref = candidate.skill_ref();
        let bundle = bundle.retarget(new_ref.clone());
        if gate.passed {
            let archived = transition(old_state, LifecycleEvent::Superseded)?;
            self.append(LedgerEntry::Lifecycle {
                task,
                skill: old_ref.clone(),
                from: Some(old_state),
                to: archived,
                event: Some(LifecycleEvent::Superseded),
                gate_passed: None,
            });
            self.append(LedgerEntry::Lifecycle {
                task,
                skill: new_ref.clone(),
                from: None,
                to: old_state,
                event: None,
                gate_passed: Some(true),
            });
            let versions = self.skills.get_mut(id).expect("checked above");
            versions.get_mut(&old_ref.version).expect("current version").state = archived;
            let gated_cases = bundle.cases.len();
            versions.insert(
                next_version,
                SkillVersion { skill: candidate, state: old_state, release_gate: gate, bundle, gated_cases },
            );
            Ok(Revision::Released(new_ref))
        } else {
            self.append(LedgerEntry::Lifecycle {
                task,
                skill: new_ref.clone(),
                from: None,
                to: LifecycleState::Archived,
                event: Some(LifecycleEvent::GateFail),
                gate_passed: Some(false),
            });
            self.skills.get_mut(id).expect("checked above").insert(
                next_version,
                SkillVersion {
                    skill: candidate,
                    state: LifecycleState::Archived,
                    release_gate: gate,
                    bundle,
                    gated_cases: 0,
                },
            );
            Ok(Revision::Rejected(new_ref))
        }
    }

    fn version_mut(&mut self, r: &SkillRef) -> Result<&mut SkillVersion, StoreError> {
        self.skills
            .get_mut(&r.id)
            .and_then(|v| v.get_mut(&r.version))
            .ok_or_else(|| StoreError::UnknownSkill(r.to_string()))
    }

    /// Applies a lifecycle event. Releasing events go through
    /// [`Repository::apply_gate`] instead.
    pub fn apply_event(&mut self, r: &SkillRef, event: LifecycleEvent, task: u64) -> Result<LifecycleState, StoreError> {
        if event == LifecycleEvent::GatePass {
            return Err(StoreError::UngatedRelease(r.clone()));
        }
        self.apply(r, event, task, None)
    }

    /// Applies `GatePass` or `GateFail` according to `gate`, recording the
    /// gate outcome with the transition.
    pub fn apply_gate(&mut self, r: &SkillRef, gate: &GateResult, task: u64) -> Result<LifecycleState, StoreError> {
        let event = if gate.passed { LifecycleEvent::GatePass } else { LifecycleEvent::GateFail };
        let state = self.apply(r, event, task, Some(gate.passed))?;
        if gate.passed {
            let v = self.version_mut(r)?;
            v.gated_cases = v.bundle.cases.len();
        }
        Ok(state)
    }

    fn apply(
        &mut self,
        r: &SkillRef,
        event: LifecycleEvent,
        task: u64,
        gate_passed: Option<bool>,
    ) -> Result<LifecycleState, StoreError> {
        let v = self.version_mut(r)?;
        let from = v.state;
        let to = transition(from, event)?;
        v.state = to;
        self.append(LedgerEntry::Lifecycle { task, skill: r.clone(), from: Some(from), to, event: Some(event), gate_passed });
        Ok(to)
    }

    /// Records that `r`'s current bundle passed a gate without a state change.
    pub fn mark_gated(&mut self, r: &SkillRef) -> Result<(), StoreError> {
        let v = self.version_mut(r)?;
        v.gated_cases = v.bundle.cases.len();
        self.counters.revision += 1;
        Ok(())
    }

    pub fn set_bundle(&mut self, r: &SkillRef, bundle: TestBundle) -> Result<(), StoreError> {
        if &bundle.target != r {
            return Err(StoreError::BundleMismatch { skill: r.clone(), bundle: bundle.target });
        }
        let v = self.version_mut(r)?;
        if v.bundle != bundle {
            v.bundle = bundle;
            self.counters.revision += 1;
        }
        Ok(())
    }

    pub fn record_credit(&mut self, events: &[CreditEvent]) {
        for e in events {
            self.credit.record(e);
            self.append(LedgerEntry::Credit {
                task: e.task_id,
                skill: e.skill.clone(),
                judgment: e.judgment,
                scope_digest: digest(&e.attribution_scope),
                scope: e.attribution_scope.clone(),
                rationale: e.rationale.clone(),
            });
        }
    }

    pub fn record_usage(&mut self, task: u64, skill: &SkillRef, usage: UsageStats) {
        debug_assert!(usage.executed_count <= usage.exposed_count);
        self.usage.entry(skill.clone()).or_default().add(usage);
        self.append(LedgerEntry::Usage { task, skill: skill.clone(), usage });
    }

    pub fn version(&self, r: &SkillRef) -> Option<&SkillVersion> {
        self.skills.get(&r.id)?.get(&r.version)
    }

    pub fn versions(&self, id: &SkillId) -> impl Iterator<Item = &SkillVersion> {
        self.skills.get(id).into_iter().flat_map(|v| v.values())
    }

    pub fn all_versions(&self) -> impl Iterator<Item = &SkillVersion> {
        self.skills.values().flat_map(|v| v.values())
    }

    pub fn skill_ids(&self) -> impl Iterator<Item = &SkillId> {
        self.skills.keys()
    }

    pub fn in_state(&self, state: LifecycleState) -> Vec<&SkillVersion> {
        self.all_versions().filter(|v| v.state == state).collect()
    }

    pub fn credit_table(&self) -> &CreditTable {
        &self.credit
    }

    pub fn usage(&self, r: &SkillRef) -> UsageStats {
        self.usage.get(r).copied().unwrap_or_default()
    }

    pub fn credits_for(&self, r: &SkillRef) -> Vec<CreditEvent> {
        self.ledger
            .iter()
            .filter_map(|rec| match &rec.entry {
                LedgerEntry::Credit { task, skill, judgment, scope, rationale, .. } if skill == r => Some(CreditEvent {
                    skill: skill.clone(),
                    task_id: *task,
                    judgment: *judgment,
                    rationale: rationale.clone(),
                    attribution_scope: scope.clone(),
                }),
                _ => None,
            })
            .collect()
    }

    pub fn evidence(&self, r: &SkillRef) -> Option<EvidenceState> {
        let v = self.version(r)?;
        Some(EvidenceState { bundle: v.bundle.clone(), credits: self.credits_for(r), usage: self.usage(r) })
    }

    pub fn trust_inputs(&self, v: &SkillVersion) -> TrustInputs {
        let r = v.skill.skill_ref();
        let c = self.credit.get(&r);
        TrustInputs { helpful: c.helpful, harmful: c.harmful, exposed: self.usage(&r).exposed_count, state: v.state }
    }

    /// Trial and active versions as of now.
    pub fn snapshot(&self) -> StoreSnapshot {
        let mut snap = StoreSnapshot::default();
        for v in self.all_versions() {
            if matches!(v.state, LifecycleState::Trial | LifecycleState::Active) {
                snap.views.push(SkillRetrievalView::new(&v.skill, self.trust_inputs(v)));
                snap.skills.insert(v.skill.skill_ref(), v.skill.clone());
            }
        }
        snap
    }

    pub fn meta(&self, role: Role) -> &MetaRuleSet {
        &self.meta[&role]
    }

    pub fn meta_sets(&self) -> &BTreeMap<Role, MetaRuleSet> {
        &self.meta
    }

    pub fn set_meta(&mut self, set: MetaRuleSet) {
        if self.meta.get(&set.role) != Some(&set) {
            self.meta.insert(set.role, set);
            self.counters.revision += 1;
        }
    }

    pub fn buffer(&self, role: Role) -> &ReplayBuffer {
        &self.buffers[&role]
    }

    pub fn buffer_mut(&mut self, role: Role) -> &mut ReplayBuffer {
        self.counters.revision += 1;
        self.buffers.get_mut(&role).expect("every role has a buffer")
    }

    /// Checks the release invariant over the ledger: every version that was
    /// ever on trial or active got there through a passing gate, and every
    /// recorded transition is legal.
    pub fn audit_release(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let mut released: BTreeMap<&SkillRef, bool> = BTreeMap::new();
        for rec in &self.ledger {
            let LedgerEntry::Lifecycle { skill, from, to, event, gate_passed, .. } = &rec.entry else { continue };
            if let (Some(f), Some(e)) = (from, event) {
                if transition(*f, *e).ok() != Some(*to) {
                    report.violations.push(format!("#{}: illegal {f:?} --{e:?}--> {to:?} for {skill}", rec.ordinal));
                }
            }
            if matches!(to, LifecycleState::Trial | LifecycleState::Active) {
                if gate_passed != &Some(true) {
                    report.violations.push(format!("#{}: {skill} entered {to:?} without a passing gate", rec.ordinal));
                }
                released.insert(skill, true);
            }
        }
        for v in self.all_versions() {
            let r = v.skill.skill_ref();
            let ever_released = released.get(&r).copied().unwrap_or(false);
            if matches!(v.state, LifecycleState::Trial | LifecycleState::Active | LifecycleState::Disabled)
                && !ever_released
            {
                report.violations.push(format!("{r} is {:?} with no release record", v.state));
            }
        }
        report.released_versions = released.len();
        report
    }

    /// Canonical file set: relative path to full file contents, trailers
    /// included.
    pub fn files(&self) -> BTreeMap<String, String> {
        persist::render_files(self)
    }

    /// SHA-256 over the canonical files in path order.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        for (path, content) in self.files() {
            buf.extend_from_slice(path.as_bytes());
            buf.push(b'\n');
            buf.extend_from_slice(content.as_bytes());
        }
        sha256_hex(&buf)
    }

    pub fn persist(&self, dir: &std::path::Path) -> Result<(), StoreError> {
        persist::write_dir(self, dir)
    }

    pub fn restore(dir: &std::path::Path) -> Result<Self, StoreError> {
        persist::read_dir(dir)
    }
}
