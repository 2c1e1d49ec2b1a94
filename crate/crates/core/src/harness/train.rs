use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{execute, mean, run_ordered, usage_from_trace};
use crate::config::RunConfig;
use crate::deskworld::{self, DeskworldTask};
use crate::draft::bundle_for;
use crate::graph::{find_candidate_groups, project, Segment};
use crate::maintenance::{assign_credit, filter_gate, patch_bundle, refine, run_bundle, BundlePatch, GateResult};
use crate::oracle::{CallLog, Oracle, OracleSession, Scope};
use crate::retrieval::RetrievalMode;
use crate::roles::{extract, record_outcome, refactor, update_role_rules, MetaOutcome, Outcome};
use crate::skill::{
    CreditEvent, Judgment, LifecycleEvent, LifecycleState, MetaRuleSet, Role, Skill, SkillId, SkillRef, TestBundle,
    UsageStats,
};
use crate::store::{Repository, Revision, StoreSnapshot};
use crate::text::HashingEmbedder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: u64,
    pub task_id: String,
    pub family: String,
    pub utility: f64,
    pub exposed: usize,
    pub published: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub tasks: Vec<TaskRecord>,
    /// Candidates released on trial.
    pub published: usize,
    /// Candidates that failed their first gate.
    pub gate_rejected: usize,
    pub promoted: usize,
    pub archived_on_trial: usize,
    pub disabled: usize,
    pub refined: usize,
    pub refine_rejected: usize,
    pub refactored: usize,
    pub macro_steps: usize,
    /// Meta-rule update attempts, one per role per macro step when enabled.
    pub meta_attempts: usize,
    pub meta_updates: usize,
    #[serde(skip)]
    pub calls: CallLog,
}

impl TrainingReport {
    pub fn mean_utility(&self) -> f64 {
        mean(self.tasks.iter().map(|t| t.utility))
    }
}

/// Replaces the rules of every listed role, as of task 0.
pub fn install_rules(repo: &mut Repository, rules: &BTreeMap<Role, Vec<String>>) {
    for (role, rules) in rules {
        repo.set_meta(MetaRuleSet { role: *role, rules: rules.clone(), updated_at_task: 0 });
    }
}

/// Result of the per-task phase, computed against a fixed snapshot so that
/// tasks in one window can run concurrently.
struct TaskPhase {
    trace_exposed: usize,
    utility: f64,
    prompt_tokens: u64,
    completion_tokens: u64,
    segments: Vec<Segment>,
    usage: Vec<(SkillRef, UsageStats)>,
    credit: Vec<CreditEvent>,
    candidates: Vec<(Skill, TestBundle, GateResult)>,
    log: CallLog,
}

struct WindowInput<'a> {
    snapshot: &'a StoreSnapshot,
    extractor_rules: &'a [String],
    config: &'a RunConfig,
    oracle: &'a Oracle,
    embedder: &'a HashingEmbedder,
}

fn task_phase(input: &WindowInput<'_>, task: &DeskworldTask, index: u64) -> TaskPhase {
    let config = input.config;
    let mut s = input.oracle.session(Scope::Task(index));
    let trace = execute(&mut s, task, input.snapshot, RetrievalMode::Training, config, input.embedder);
    let utility = deskworld::utility(task, &trace);
    let exposed: Vec<&Skill> = trace.exposed().iter().filter_map(|r| input.snapshot.skill(r)).collect();
    let credit = assign_credit(&mut s, &trace, utility, &exposed, index, config);
    let usage = usage_from_trace(&trace, input.snapshot);
    let segments = project(&trace, utility, index, config.limits.segment);
    let existing: Vec<&Skill> = input.snapshot.skills.values().collect();
    let candidates = extract(&mut s, &trace, utility, input.extractor_rules, &existing, index, config)
        .into_iter()
        .map(|(skill, cases)| {
            let bundle = bundle_for(&skill, cases);
            let gate = run_bundle(&mut s, &skill, &bundle, config.limits.skill_body);
            (skill, bundle, gate)
        })
        .collect();
    TaskPhase {
        trace_exposed: exposed.len(),
        utility,
        prompt_tokens: trace.prompt_tokens,
        completion_tokens: trace.completion_tokens,
        segments,
        usage,
        credit,
        candidates,
        log: s.into_log(),
    }
}

/// True when a skill with the same name or signature was ever stored.
fn already_stored(repo: &Repository, skill: &Skill) -> bool {
    let name = skill.name.to_lowercase();
    let sig = skill.signature_digest();
    repo.all_versions().any(|v| v.skill.name.to_lowercase() == name || v.skill.signature_digest() == sig)
}

fn live_skills(repo: &Repository) -> Vec<Skill> {
    repo.all_versions()
        .filter(|v| matches!(v.state, LifecycleState::Trial | LifecycleState::Active))
        .map(|v| v.skill.clone())
        .collect()
}

struct Barrier<'a> {
    repo: &'a mut Repository,
    session: OracleSession,
    index: u64,
    config: RunConfig,
    embedder: &'a HashingEmbedder,
    report: &'a mut TrainingReport,
    refine_budget: &'a mut BTreeMap<SkillId, u32>,
}

impl Barrier<'_> {
    fn publish(&mut self, skill: Skill, bundle: TestBundle, gate: GateResult) -> bool {
        if already_stored(self.repo, &skill) {
            return false;
        }
        let passed = gate.passed;
        match self.repo.publish(skill, bundle, gate, self.index) {
            Ok(_) if passed => {
                self.report.published += 1;
                true
            }
            Ok(_) => {
                self.report.gate_rejected += 1;
                false
            }
            Err(_) => false,
        }
    }

    fn try_refine(&mut self, r: &SkillRef) {
        let Some(v) = self.repo.version(r) else { return };
        if !matches!(v.state, LifecycleState::Trial | LifecycleState::Active) {
            return;
        }
        let used = self.refine_budget.entry(r.id.clone()).or_insert(0);
        if *used >= self.config.refine_budget {
            return;
        }
        *used += 1;
        let Some(evidence) = self.repo.evidence(r) else { return };
        let rules = self.repo.meta(Role::Refiner).rules.clone();
        let skill = v.skill.clone();
        let Ok(Some((candidate, bundle))) =
            refine(&mut self.session, &skill, v.state, &evidence, &rules, &self.config, self.index)
        else {
            return;
        };
        let gate = run_bundle(&mut self.session, &candidate, &bundle, self.config.limits.skill_body);
        match self.repo.revise(&r.id, candidate, bundle, gate, self.index) {
            Ok(Revision::Released(_)) => self.report.refined += 1,
            Ok(Revision::Rejected(_)) => self.report.refine_rejected += 1,
            Err(_) => {}
        }
    }

    /// Patches bundles from this task's credit and refines skills judged
    /// harmful.
    fn micro(&mut self, credit: &[CreditEvent]) {
        let mut harmful = BTreeSet::new();
        for e in credit.iter().filter(|e| matches!(e.judgment, Judgment::Helpful | Judgment::Harmful)) {
            let Some(v) = self.repo.version(&e.skill) else { continue };
            if !matches!(v.state, LifecycleState::Trial | LifecycleState::Active) {
                continue;
            }
            let bundle = patch_bundle(&v.bundle, BundlePatch::Credit(e), self.config.bundle_cap);
            let _ = self.repo.set_bundle(&e.skill, bundle);
            if e.judgment == Judgment::Harmful {
                harmful.insert(e.skill.clone());
            }
        }
        for r in harmful {
            self.try_refine(&r);
        }
    }

    fn refactor_groups(&mut self) {
        let groups: Vec<_> = find_candidate_groups(
            &self.repo.graph,
            self.config.clique_min,
            self.config.clique_max,
            usize::MAX,
            self.embedder,
        )
        .into_iter()
        .filter(|g| !self.repo.graph.refactored.contains(&g.digest()))
        .take(self.config.clique_top_k)
        .collect();
        let rules = self.repo.meta(Role::Refactorer).rules.clone();
        for group in groups {
            self.repo.graph.refactored.insert(group.digest());
            let drafts = refactor(&mut self.session, &self.repo.graph, &group, &rules, self.index, &self.config);
            for (skill, cases) in drafts {
                let bundle = bundle_for(&skill, cases);
                let gate = run_bundle(&mut self.session, &skill, &bundle, self.config.limits.skill_body);
                if self.publish(skill, bundle, gate) {
                    self.report.refactored += 1;
                }
            }
        }
    }

    /// Trial skills that have been visible for a full window are re-gated
    /// and promoted, unless the filter or their credit says otherwise.
    fn promote(&mut self, window_start: u64) {
        let trial: Vec<SkillRef> = self
            .repo
            .in_state(LifecycleState::Trial)
            .into_iter()
            .filter(|v| v.skill.created_at_task < window_start)
            .map(|v| v.skill.skill_ref())
            .collect();
        for r in trial {
            let c = self.repo.credit_table().get(&r);
            let gate = if filter_gate(c.harmful, c.helpful, self.config.filter_harmful, self.config.filter_helpful) {
                GateResult::failed("filtered on trial")
            } else if c.harmful > c.helpful {
                GateResult::failed("more harmful than helpful on trial")
            } else {
                let v = self.repo.version(&r).expect("listed version exists");
                let (skill, bundle) = (v.skill.clone(), v.bundle.clone());
                run_bundle(&mut self.session, &skill, &bundle, self.config.limits.skill_body)
            };
            match self.repo.apply_gate(&r, &gate, self.index) {
                Ok(LifecycleState::Active) => self.report.promoted += 1,
                Ok(_) => self.report.archived_on_trial += 1,
                Err(_) => {}
            }
        }
    }

    fn regate_active(&mut self) {
        let dirty: Vec<SkillRef> = self
            .repo
            .in_state(LifecycleState::Active)
            .into_iter()
            .filter(|v| v.bundle_dirty())
            .map(|v| v.skill.skill_ref())
            .collect();
        for r in dirty {
            let v = self.repo.version(&r).expect("listed version exists");
            let (skill, bundle) = (v.skill.clone(), v.bundle.clone());
            let gate = run_bundle(&mut self.session, &skill, &bundle, self.config.limits.skill_body);
            if gate.passed {
                let _ = self.repo.mark_gated(&r);
            } else {
                self.try_refine(&r);
            }
        }
    }

    fn filter_active(&mut self) {
        let hit: Vec<SkillRef> = self
            .repo
            .in_state(LifecycleState::Active)
            .into_iter()
            .filter(|v| {
                let c = self.repo.credit_table().get(&v.skill.skill_ref());
                filter_gate(c.harmful, c.helpful, self.config.filter_harmful, self.config.filter_helpful)
            })
            .map(|v| v.skill.skill_ref())
            .collect();
        for r in hit {
            if self.repo.apply_event(&r, LifecycleEvent::FilterDisable, self.index).is_ok() {
                self.report.disabled += 1;
            }
        }
    }

    fn rebuild_buffers(&mut self) {
        let mut credits: BTreeMap<SkillRef, Vec<CreditEvent>> = BTreeMap::new();
        for v in self.repo.all_versions() {
            let r = v.skill.skill_ref();
            credits.insert(r.clone(), self.repo.credits_for(&r));
        }
        let rows: Vec<_> = self
            .repo
            .all_versions()
            .map(|v| {
                let r = v.skill.skill_ref();
                (v.skill.clone(), v.state, v.release_gate.clone(), v.bundle.cases.len(), self.repo.credit_table().get(&r), self.repo.usage(&r))
            })
            .collect();
        for (skill, state, gate, cases, credit, usage) in rows {
            let events = &credits[&skill.skill_ref()];
            let outcome =
                Outcome { skill: &skill, state, gate: &gate, credit, usage, bundle_cases: cases, credits: events };
            record_outcome(self.repo.buffer_mut(skill.source_role), outcome, self.index);
        }
    }

    fn update_rules(&mut self) {
        if !self.config.meta_updates_enabled() {
            return;
        }
        for role in Role::ALL {
            self.report.meta_attempts += 1;
            let current = self.repo.meta(role).clone();
            let (next, outcome) =
                update_role_rules(&mut self.session, &current, self.repo.buffer(role), &self.config, self.index);
            if outcome == MetaOutcome::Updated {
                self.repo.set_meta(next);
                self.report.meta_updates += 1;
            }
        }
    }

    fn macro_step(&mut self, window_start: u64) {
        self.report.macro_steps += 1;
        self.refactor_groups();
        self.promote(window_start);
        self.regate_active();
        self.filter_active();
        self.rebuild_buffers();
        self.update_rules();
        self.refine_budget.clear();
    }
}

/// Trains on `tasks` in order, continuing the repository's task count.
///
/// Tasks are processed in windows of `k_macro`. Each task in a window runs
/// against the snapshot taken at the window start (possibly in parallel);
/// results are then applied strictly in task order: usage, credit,
/// publication, the overlap graph, bundle patches and refinement. The last
/// task of a window also runs the macro step: refactoring, promotion,
/// filtering and rule updates.
pub fn run_training(repo: &mut Repository, tasks: &[DeskworldTask], oracle: &Oracle) -> TrainingReport {
    let config = repo.config().clone();
    let embedder = HashingEmbedder::default();
    let mut report = TrainingReport::default();
    let mut refine_budget: BTreeMap<SkillId, u32> = BTreeMap::new();
    let k_macro = config.k_macro.max(1);
    let k_micro = config.k_micro.max(1);
    let mut pos = 0;
    while pos < tasks.len() {
        let first = repo.tasks_seen() + 1;
        let len = (k_macro - (first - 1) % k_macro) as usize;
        let window = &tasks[pos..(pos + len).min(tasks.len())];
        let snapshot = repo.snapshot();
        let extractor_rules = repo.meta(Role::Extractor).rules.clone();
        let input = WindowInput {
            snapshot: &snapshot,
            extractor_rules: &extractor_rules,
            config: &config,
            oracle,
            embedder: &embedder,
        };
        let phases = run_ordered(window, config.parallelism, |i, task| task_phase(&input, task, first + i as u64));
        for (task, phase) in window.iter().zip(phases) {
            let index = repo.mark_task_seen();
            report.calls.extend(phase.log);
            for (r, u) in &phase.usage {
                repo.record_usage(index, r, *u);
            }
            repo.record_credit(&phase.credit);
            let mut barrier = Barrier {
                session: oracle.session(Scope::Barrier(index)),
                repo: &mut *repo,
                index,
                config: config.clone(),
                embedder: &embedder,
                report: &mut report,
                refine_budget: &mut refine_budget,
            };
            let mut published = 0;
            for (skill, bundle, gate) in phase.candidates {
                if barrier.publish(skill, bundle, gate) {
                    published += 1;
                }
            }
            let live = live_skills(barrier.repo);
            let live_refs: Vec<&Skill> = live.iter().collect();
            barrier.repo.graph.update(
                index,
                &phase.segments,
                &live_refs,
                &config.graph,
                config.graph_window,
                &embedder,
            );
            if index.is_multiple_of(k_micro) {
                barrier.micro(&phase.credit);
            }
            if index.is_multiple_of(k_macro) {
                barrier.macro_step(first);
            }
            let log = barrier.session.into_log();
            report.calls.extend(log);
            report.tasks.push(TaskRecord {
                index,
                task_id: task.id.clone(),
                family: task.family.clone(),
                utility: phase.utility,
                exposed: phase.trace_exposed,
                published,
                prompt_tokens: phase.prompt_tokens,
                completion_tokens: phase.completion_tokens,
            });
        }
        pos += window.len();
    }
    report
}
