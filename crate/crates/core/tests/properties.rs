use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use skillmeta::deskworld::{self, call_f1};
use skillmeta::graph::{edge_weight, GraphNode, OutcomeTag, OverlapGraph, Segment};
use skillmeta::maintenance::{update_credit_table, CreditTable, GateResult};
use skillmeta::retrieval::{combine, rank_order, select_top_k, Exposure, RetrievalMode, RetrievalQuery, SkillRetrievalView, TrustInputs};
use skillmeta::roles::{export_rules, import_rules, normalize_rules};
use skillmeta::skill::{CreditEvent, Judgment, MetaRuleSet, Semantics, TestBundle};
use skillmeta::text::{jaccard, trigrams, HashingEmbedder};
use skillmeta::trace::{Action, Step, Trace};
use skillmeta::{EdgeWeights, LifecycleEvent, LifecycleState, Repository, Role, RunConfig, Skill, SkillId, SkillRef, Weights};

const WORDS: [&str; 10] = ["open", "record", "ledger", "submit", "request", "authorize", "level", "job", "status", "before"];

fn phrase() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..8).prop_map(|w| w.join(" "))
}

fn skill(name: String, body: String) -> Skill {
    Skill {
        id: SkillId::new(""),
        version: 1,
        parent: None,
        semantics: Semantics::Workflow,
        name: format!("n {name}"),
        description: name.clone(),
        trigger_conditions: vec![],
        allowed_tools: BTreeSet::new(),
        domains: BTreeSet::new(),
        body: format!("b {body}"),
        source_role: Role::Extractor,
        created_at_task: 0,
    }
}

#[derive(Debug, Clone)]
enum Op {
    Publish(bool),
    Revise(usize, bool),
    Event(usize, usize),
    Gate(usize, bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        any::<bool>().prop_map(Op::Publish),
        (0..8usize, any::<bool>()).prop_map(|(i, p)| Op::Revise(i, p)),
        (0..8usize, 0..5usize).prop_map(|(i, e)| Op::Event(i, e)),
        (0..8usize, any::<bool>()).prop_map(|(i, p)| Op::Gate(i, p)),
    ]
}

fn gate(pass: bool) -> GateResult {
    if pass { GateResult::vacuous_pass() } else { GateResult::failed("x") }
}

fn apply_ops(ops: &[Op]) -> Repository {
    let mut repo = Repository::new(RunConfig::default());
    for (t, op) in ops.iter().enumerate() {
        let t = t as u64;
        let refs: Vec<SkillRef> = repo.all_versions().map(|v| v.skill.skill_ref()).collect();
        let pick = |i: usize| refs.get(i % refs.len().max(1)).cloned();
        let dummy = TestBundle::new(SkillRef::new(SkillId::new(""), 1));
        match op {
            Op::Publish(p) => {
                repo.publish(skill(format!("s{t}"), "x".into()), dummy, gate(*p), t).unwrap();
            }
            Op::Revise(i, p) => {
                if let Some(r) = pick(*i) {
                    let _ = repo.revise(&r.id, skill(format!("r{t}"), "y".into()), dummy, gate(*p), t);
                }
            }
            Op::Event(i, e) => {
                if let Some(r) = pick(*i) {
                    let _ = repo.apply_event(&r, LifecycleEvent::ALL[*e], t);
                }
            }
            Op::Gate(i, p) => {
                if let Some(r) = pick(*i) {
                    let _ = repo.apply_gate(&r, &gate(*p), t);
                }
            }
        }
    }
    repo
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_keeps_one_live_version_and_a_clean_audit(ops in prop::collection::vec(op(), 0..40)) {
        let repo = apply_ops(&ops);
        let mut live: BTreeMap<&SkillId, usize> = BTreeMap::new();
        for v in repo.all_versions().filter(|v| v.state.is_live()) {
            *live.entry(&v.skill.id).or_default() += 1;
        }
        prop_assert!(live.values().all(|n| *n == 1));
        prop_assert!(repo.audit_release().violations.is_empty());
        for v in repo.all_versions().filter(|v| matches!(v.state, LifecycleState::Trial | LifecycleState::Active)) {
            prop_assert!(v.release_gate.passed);
        }
    }

    #[test]
    fn persisted_repository_restores_identically(ops in prop::collection::vec(op(), 0..25)) {
        let repo = apply_ops(&ops);
        let dir = tempfile::tempdir().unwrap();
        repo.persist(dir.path()).unwrap();
        let back = Repository::restore(dir.path()).unwrap();
        prop_assert_eq!(back.checksum(), repo.checksum());
        prop_assert_eq!(back.files(), repo.files());
    }

    #[test]
    fn retrieval_is_bounded_sorted_and_safe(
        views in prop::collection::vec((phrase(), phrase(), 0..4usize, 0..5u64, 0..5u64, 0..40u32), 0..30),
        request in phrase(),
        k in 0..6usize,
        heldout in any::<bool>(),
    ) {
        let views: Vec<SkillRetrievalView> = views
            .into_iter()
            .map(|(name, body, state, helpful, harmful, id)| {
                let mut s = skill(name, body);
                s.id = SkillId::new(format!("sk-{id:04}"));
                let trust = TrustInputs { helpful, harmful, exposed: helpful + harmful, state: LifecycleState::ALL[state] };
                SkillRetrievalView::new(&s, trust)
            })
            .collect();
        let q = RetrievalQuery {
            request_text: request,
            dialogue_state_digest: String::new(),
            recent_tool_errors: vec![],
            previous_assistant_digest: String::new(),
            tools: BTreeSet::new(),
        };
        let mode = if heldout { RetrievalMode::Heldout } else { RetrievalMode::Training };
        let got = select_top_k(&HashingEmbedder::default(), &q, &views, k, mode, &Weights::default()).unwrap();
        prop_assert!(got.len() <= k);
        for pair in got.windows(2) {
            prop_assert_ne!(rank_order(&pair[0], &pair[1]), std::cmp::Ordering::Greater);
        }
        for e in &got {
            let s = e.view.trust_inputs.state;
            prop_assert!(s == LifecycleState::Active || (s == LifecycleState::Trial && !heldout));
            prop_assert!((0.0..=1.0).contains(&e.score.total));
        }
    }

    #[test]
    fn incremental_graph_matches_rebuild(
        batches in prop::collection::vec(prop::collection::vec((phrase(), prop::option::of(phrase())), 1..4), 1..6),
        window in 1..5u64,
    ) {
        let embedder = HashingEmbedder::default();
        let w = EdgeWeights::default();
        let mut g = OverlapGraph::default();
        for (t, batch) in batches.iter().enumerate() {
            let task = t as u64 + 1;
            let segments: Vec<Segment> = batch
                .iter()
                .enumerate()
                .map(|(i, (text, err))| Segment {
                    id: format!("seg:{task:06}:{i:02}"),
                    source_task: task,
                    task_id: format!("t{task}"),
                    span: (i as u32 + 1, i as u32 + 1),
                    fragment_text: text.clone(),
                    tool_calls: vec![],
                    error_texts: err.iter().cloned().collect(),
                    arg_names: vec![],
                    outcome: OutcomeTag::Success,
                })
                .collect();
            g.update(task, &segments, &[], &w, window, &embedder);
        }
        let nodes: Vec<GraphNode> = g.nodes().cloned().collect();
        let rebuilt = OverlapGraph::rebuild(nodes, &w, &embedder);
        let a: Vec<_> = g.edges().map(|(x, y, wt)| (x.to_string(), y.to_string(), wt)).collect();
        let b: Vec<_> = rebuilt.edges().map(|(x, y, wt)| (x.to_string(), y.to_string(), wt)).collect();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|(_, _, wt)| *wt >= 0.18 && *wt <= 1.0));
        let newest = batches.len() as u64;
        prop_assert!(g.nodes().all(|n| n.source_task().is_some_and(|s| s + window > newest)));
        prop_assert_eq!(OverlapGraph::from_snapshot(&g.to_snapshot()).unwrap(), g);
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in phrase(), b in phrase()) {
        let (ga, gb) = (trigrams(&a), trigrams(&b));
        let ab: f64 = jaccard(&ga, &gb);
        let ba: f64 = jaccard(&gb, &ga);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        if !ga.is_empty() {
            prop_assert_eq!(jaccard::<f64>(&ga, &ga), 1.0);
        }
    }

    #[test]
    fn exported_rules_import_back(rules in prop::collection::vec(prop::collection::vec("[A-Za-z][a-z ]{0,30}[a-z]\\.", 0..7), 3)) {
        let sets: BTreeMap<Role, MetaRuleSet> = Role::ALL
            .into_iter()
            .zip(rules)
            .map(|(role, raw)| (role, MetaRuleSet { role, rules: normalize_rules(raw), updated_at_task: 0 }))
            .collect();
        prop_assert!(sets.values().all(|s| s.rules.len() <= 5));
        let back = import_rules(&export_rules(&sets)).unwrap();
        for (role, set) in &sets {
            prop_assert_eq!(&back[role], &set.rules);
        }
    }

    #[test]
    fn task_utility_is_a_bounded_f1(seed in 0..200u64, drop in 0..4usize, noise in 0..3usize) {
        let (suite, _) = deskworld::generate(4, 4, seed);
        for task in &suite.tasks {
            let mut actions: Vec<Action> = task.expected.iter().map(|e| e.action()).collect();
            let gold = call_f1(&actions, &actions);
            prop_assert_eq!(gold, 1.0);
            let keep = actions.len().saturating_sub(drop.min(actions.len() - 1));
            actions.truncate(keep);
            for i in 0..noise {
                actions.push(Action::Call { tool: format!("noise_{i}"), args: vec![] });
            }
            let trace = Trace {
                steps: actions
                    .into_iter()
                    .enumerate()
                    .map(|(i, action)| Step { turn: i as u32 + 1, action, observation: String::new(), is_error: false, exposed: vec![] })
                    .collect(),
                ..Trace::default()
            };
            let u = deskworld::utility(task, &trace);
            prop_assert!((0.0..=1.0).contains(&u));
            prop_assert_eq!(u == 1.0, drop == 0 && noise == 0);
        }
    }
}

fn views_with_components(n: usize) -> Vec<SkillRetrievalView> {
    (0..n)
        .map(|i| {
            let mut s = skill(format!("s{i}"), String::new());
            s.id = SkillId::new(format!("sk-{i:04}"));
            SkillRetrievalView::new(&s, TrustInputs { helpful: 0, harmful: 0, exposed: 0, state: LifecycleState::Active })
        })
        .collect()
}

fn rank_of(components: &[[f64; 4]], views: &[SkillRetrievalView], who: usize) -> usize {
    let w = Weights::default();
    let mut ranked: Vec<Exposure<f64>> = components
        .iter()
        .zip(views)
        .map(|(c, v)| Exposure { view: v.clone(), score: combine(c[0], c[1], c[2], c[3], &w).unwrap(), tier: 0 })
        .collect();
    ranked.sort_by(rank_order);
    ranked.iter().position(|e| e.view.skill == views[who].skill).unwrap()
}

proptest! {
    #[test]
    fn raising_one_component_never_lowers_rank(
        components in prop::collection::vec(prop::array::uniform4(0.0..=1.0f64), 1..12),
        who in 0..12usize,
        which in 0..4usize,
        bump in 0.0..=1.0f64,
    ) {
        let who = who % components.len();
        let views = views_with_components(components.len());
        let before = rank_of(&components, &views, who);
        let mut raised = components.clone();
        raised[who][which] = (raised[who][which] + bump).min(1.0);
        prop_assert!(rank_of(&raised, &views, who) <= before);
    }

    #[test]
    fn edge_weight_is_symmetric(a in phrase(), b in phrase(), ea in prop::option::of(phrase()), eb in prop::option::of(phrase())) {
        let node = |id: &str, text: &str, err: &Option<String>| GraphNode::from_segment(&Segment {
            id: id.to_string(),
            source_task: 1,
            task_id: "t".into(),
            span: (1, 1),
            fragment_text: text.to_string(),
            tool_calls: vec![],
            error_texts: err.iter().cloned().collect(),
            arg_names: vec![],
            outcome: OutcomeTag::Failure,
        });
        let (x, y) = (node("x", &a, &ea), node("y", &b, &eb));
        let e = HashingEmbedder::default();
        let w = EdgeWeights::default();
        let xy: f64 = edge_weight(&e, &x, &y, &w);
        let yx: f64 = edge_weight(&e, &y, &x, &w);
        prop_assert_eq!(xy, yx);
        prop_assert!((0.0..=1.0).contains(&xy));
    }

    #[test]
    fn credit_merge_order_does_not_matter(
        events in prop::collection::vec((0..4u32, 0..4usize, 0..20u64), 0..30),
        seed in any::<u64>(),
    ) {
        let events: Vec<CreditEvent> = events
            .into_iter()
            .map(|(id, j, task)| CreditEvent {
                skill: SkillRef::new(SkillId::new(format!("sk-{id}")), 1),
                task_id: task,
                judgment: [Judgment::Helpful, Judgment::Harmful, Judgment::Neutral, Judgment::Uncertain][j],
                rationale: String::new(),
                attribution_scope: String::new(),
            })
            .collect();
        let mut shuffled = events.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let base = CreditTable::default();
        prop_assert_eq!(update_credit_table(&base, &events), update_credit_table(&base, &shuffled));
        let (head, tail) = events.split_at(events.len() / 2);
        prop_assert_eq!(update_credit_table(&update_credit_table(&base, head), tail), update_credit_table(&base, &events));
    }
}
