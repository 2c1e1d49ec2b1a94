//! Cross-trajectory overlap graph: trace segments and live skills as nodes,
//! weighted similarity edges, and clique-based refactoring candidates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::scalar::{unit, Scalar};
use crate::skill::{Skill, SkillRef};
use crate::text::{clip, cosine, jaccard, trigrams, HashingEmbedder};
use crate::trace::{Action, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphWeights<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    /// Edges below this weight are dropped.
    pub eta: T,
    /// Multiplier on error-text overlap before clamping to 1.
    pub error_scale: T,
}

impl<T: Scalar> Default for GraphWeights<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.45),
            beta: T::lit(0.35),
            gamma: T::lit(0.20),
            eta: T::lit(0.18),
            error_scale: T::lit(1.7),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeTag {
    Success,
    Partial,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub source_task: u64,
    pub task_id: String,
    pub span: (u32, u32),
    pub fragment_text: String,
    pub tool_calls: Vec<String>,
    pub error_texts: Vec<String>,
    pub arg_names: Vec<String>,
    pub outcome: OutcomeTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NodeKind {
    Segment { source_task: u64, task_id: String, span: (u32, u32), outcome: OutcomeTag },
    Skill { skill: SkillRef },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub text: String,
    pub tools: BTreeSet<String>,
    pub arg_names: Vec<String>,
    pub errors: Vec<String>,
}

impl GraphNode {
    pub fn from_segment(s: &Segment) -> Self {
        let tools = s.tool_calls.iter().filter_map(|c| Action::parse(c).tool().map(str::to_string)).collect();
        Self {
            id: s.id.clone(),
            kind: NodeKind::Segment {
                source_task: s.source_task,
                task_id: s.task_id.clone(),
                span: s.span,
                outcome: s.outcome,
            },
            text: s.fragment_text.clone(),
            tools,
            arg_names: s.arg_names.clone(),
            errors: s.error_texts.clone(),
        }
    }

    pub fn from_skill(skill: &Skill) -> Self {
        Self {
            id: skill_node_id(&skill.skill_ref()),
            kind: NodeKind::Skill { skill: skill.skill_ref() },
            text: format!(
                "{}\n{}\n{}\n{}",
                skill.name,
                skill.description,
                skill.trigger_conditions.join("\n"),
                clip(&skill.body, 1000)
            ),
            tools: skill.allowed_tools.clone(),
            arg_names: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn source_task(&self) -> Option<u64> {
        match &self.kind {
            NodeKind::Segment { source_task, .. } => Some(*source_task),
            NodeKind::Skill { .. } => None,
        }
    }

    pub fn skill(&self) -> Option<&SkillRef> {
        match &self.kind {
            NodeKind::Skill { skill } => Some(skill),
            NodeKind::Segment { .. } => None,
        }
    }
}

pub fn skill_node_id(r: &SkillRef) -> String {
    format!("skill:{}", r.id)
}

pub fn segment_node_id(task_index: u64, idx: usize) -> String {
    format!("seg:{task_index:06}:{idx:02}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SegKey {
    Error,
    Family(String),
}

/// Tool family: the prefix before the first underscore.
pub fn tool_family(tool: &str) -> &str {
    tool.split('_').next().unwrap_or(tool)
}

/// Splits a trace into maximal runs of turns sharing a tool family or a
/// shared error episode. `DONE` turns end a run but belong to none.
pub fn project(trace: &Trace, utility: f64, task_index: u64, text_limit: usize) -> Vec<Segment> {
    let mut runs: Vec<(SegKey, Vec<usize>)> = Vec::new();
    for (i, step) in trace.steps.iter().enumerate() {
        let key = if step.is_error {
            SegKey::Error
        } else {
            match &step.action {
                Action::Call { tool, .. } => SegKey::Family(tool_family(tool).to_string()),
                Action::Done => continue,
                Action::Invalid(_) => SegKey::Error,
            }
        };
        match runs.last_mut() {
            Some((k, idx)) if *k == key && idx.last() == Some(&(i - 1)) => idx.push(i),
            _ => runs.push((key, vec![i])),
        }
    }
    runs.into_iter()
        .enumerate()
        .map(|(n, (key, idx))| {
            let steps: Vec<_> = idx.iter().map(|&i| &trace.steps[i]).collect();
            let mut text = format!("{}\n", trace.instruction);
            for s in &steps {
                text.push_str(&Trace::step_line(s));
                text.push('\n');
            }
            let tool_calls = steps
                .iter()
                .filter(|s| matches!(s.action, Action::Call { .. }))
                .map(|s| s.action.to_string())
                .collect();
            let error_texts = steps.iter().filter(|s| s.is_error).map(|s| s.observation.clone()).collect();
            let arg_names: BTreeSet<String> = steps
                .iter()
                .filter_map(|s| match &s.action {
                    Action::Call { args, .. } => Some(args.iter().map(|(k, _)| k.clone())),
                    _ => None,
                })
                .flatten()
                .collect();
            let outcome = match key {
                SegKey::Error => OutcomeTag::Failure,
                SegKey::Family(_) if utility >= 0.999 => OutcomeTag::Success,
                SegKey::Family(_) => OutcomeTag::Partial,
            };
            Segment {
                id: segment_node_id(task_index, n),
                source_task: task_index,
                task_id: trace.task_id.clone(),
                span: (steps[0].turn, steps[steps.len() - 1].turn),
                fragment_text: clip(&text, text_limit).to_string(),
                tool_calls,
                error_texts,
                arg_names: arg_names.into_iter().collect(),
                outcome,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeComponents<T> {
    pub sparse: T,
    pub emb: T,
    pub err: T,
    pub weight: T,
}

/// Error-text overlap, amplified and clamped to [0, 1]. Zero unless both
/// nodes carry error text.
pub fn error_overlap<T: Scalar>(a: &[String], b: &[String], scale: T) -> T {
    if a.is_empty() || b.is_empty() {
        return T::zero();
    }
    let j: T = jaccard(&trigrams(&a.join("\n")), &trigrams(&b.join("\n")));
    (scale * j).min(T::one())
}

/// Edge weight from precomputed embeddings. Negative cosine counts as no
/// semantic overlap.
pub fn edge_components<T: Scalar>(
    a: &GraphNode,
    b: &GraphNode,
    emb_a: &[T],
    emb_b: &[T],
    w: &GraphWeights<T>,
) -> EdgeComponents<T> {
    let sparse: T = jaccard(&trigrams(&a.text), &trigrams(&b.text));
    let emb = cosine(emb_a, emb_b).max(T::zero());
    let err = error_overlap(&a.errors, &b.errors, w.error_scale);
    let weight = unit(w.alpha * sparse + w.beta * emb + w.gamma * err);
    EdgeComponents { sparse, emb, err, weight }
}

pub fn edge_weight<T: Scalar>(embedder: &HashingEmbedder, a: &GraphNode, b: &GraphNode, w: &GraphWeights<T>) -> T {
    edge_components(a, b, &embedder.embed::<T>(&a.text), &embedder.embed::<T>(&b.text), w).weight
}

/// Stored weights carry six decimals so snapshots round-trip exactly.
pub fn quantize(w: f64) -> f64 {
    (w * 1e6).round() / 1e6
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapGraph {
    nodes: BTreeMap<String, GraphNode>,
    /// Undirected edges keyed by (smaller id, larger id).
    edges: BTreeMap<(String, String), f64>,
    /// Digests of groups already handed to the refactorer.
    pub refactored: BTreeSet<String>,
}

fn edge_key(a: &str, b: &str) -> (String, String) {
    if a < b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl OverlapGraph {
    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.edges.iter().map(|((a, b), w)| (a.as_str(), b.as_str(), *w))
    }

    pub fn weight(&self, a: &str, b: &str) -> Option<f64> {
        self.edges.get(&edge_key(a, b)).copied()
    }

    pub fn neighbors(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut adj: BTreeMap<&str, BTreeSet<&str>> = self.nodes.keys().map(|k| (k.as_str(), BTreeSet::new())).collect();
        for (a, b) in self.edges.keys() {
            adj.entry(a.as_str()).or_default().insert(b.as_str());
            adj.entry(b.as_str()).or_default().insert(a.as_str());
        }
        adj
    }

    /// Graph over `nodes` with every edge recomputed from scratch.
    pub fn rebuild(nodes: Vec<GraphNode>, w: &GraphWeights<f64>, embedder: &HashingEmbedder) -> Self {
        let mut g = OverlapGraph::default();
        for n in nodes {
            g.nodes.insert(n.id.clone(), n);
        }
        let all: Vec<&GraphNode> = g.nodes.values().collect();
        let embs: Vec<Vec<f64>> = all.iter().map(|n| embedder.embed(&n.text)).collect();
        let mut edges = BTreeMap::new();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let c = edge_components(all[i], all[j], &embs[i], &embs[j], w);
                if c.weight >= w.eta {
                    edges.insert(edge_key(&all[i].id, &all[j].id), quantize(c.weight));
                }
            }
        }
        g.edges = edges;
        g
    }

    fn remove_node(&mut self, id: &str) {
        self.nodes.remove(id);
        self.edges.retain(|(a, b), _| a != id && b != id);
    }

    /// Adds the segments of task `task_index`, syncs skill nodes with the
    /// live skill set, evicts segments older than the window, and scores
    /// every pair that involves a new node.
    pub fn update(
        &mut self,
        task_index: u64,
        segments: &[Segment],
        live_skills: &[&Skill],
        w: &GraphWeights<f64>,
        window: u64,
        embedder: &HashingEmbedder,
    ) {
        let wanted: BTreeMap<String, GraphNode> =
            live_skills.iter().map(|s| GraphNode::from_skill(s)).map(|n| (n.id.clone(), n)).collect();
        let stale: Vec<String> = self
            .nodes
            .values()
            .filter(|n| match &n.kind {
                NodeKind::Skill { .. } => wanted.get(&n.id) != Some(n),
                NodeKind::Segment { source_task, .. } => source_task + window <= task_index,
            })
            .map(|n| n.id.clone())
            .collect();
        for id in stale {
            self.remove_node(&id);
        }
        let mut fresh: Vec<GraphNode> = Vec::new();
        for n in wanted.into_values() {
            if !self.nodes.contains_key(&n.id) {
                fresh.push(n);
            }
        }
        for s in segments {
            if !self.nodes.contains_key(&s.id) {
                fresh.push(GraphNode::from_segment(s));
            }
        }
        let fresh_ids: BTreeSet<String> = fresh.iter().map(|n| n.id.clone()).collect();
        for n in fresh {
            self.nodes.insert(n.id.clone(), n);
        }
        let all: Vec<&GraphNode> = self.nodes.values().collect();
        let embs: Vec<Vec<f64>> = all.iter().map(|n| embedder.embed(&n.text)).collect();
        let mut new_edges = Vec::new();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if !fresh_ids.contains(&all[i].id) && !fresh_ids.contains(&all[j].id) {
                    continue;
                }
                let c = edge_components(all[i], all[j], &embs[i], &embs[j], w);
                if c.weight >= w.eta {
                    new_edges.push((edge_key(&all[i].id, &all[j].id), quantize(c.weight)));
                }
            }
        }
        self.edges.extend(new_edges);
    }

    /// Canonical text snapshot: nodes, adjacency lists with six-decimal
    /// weights, and refactored group digests.
    pub fn to_snapshot(&self) -> String {
        let adjacency: Vec<(String, Vec<(String, String)>)> = {
            let mut adj: BTreeMap<&str, Vec<(String, String)>> = BTreeMap::new();
            for ((a, b), w) in &self.edges {
                adj.entry(a).or_default().push((b.clone(), format!("{w:.6}")));
                adj.entry(b).or_default().push((a.clone(), format!("{w:.6}")));
            }
            adj.into_iter()
                .map(|(k, mut v)| {
                    v.sort();
                    (k.to_string(), v)
                })
                .collect()
        };
        let snap = Snapshot {
            nodes: self.nodes.values().cloned().collect(),
            adjacency,
            refactored: self.refactored.iter().cloned().collect(),
        };
        serde_json::to_string(&snap).expect("graph snapshot serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, String> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut g = OverlapGraph { refactored: snap.refactored.into_iter().collect(), ..Default::default() };
        for n in snap.nodes {
            g.nodes.insert(n.id.clone(), n);
        }
        for (a, list) in snap.adjacency {
            for (b, w) in list {
                if !g.nodes.contains_key(&a) || !g.nodes.contains_key(&b) {
                    return Err(format!("edge {a} -> {b} references a missing node"));
                }
                let w: f64 = w.parse().map_err(|_| format!("bad weight {w:?}"))?;
                g.edges.insert(edge_key(&a, &b), w);
            }
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    nodes: Vec<GraphNode>,
    adjacency: Vec<(String, Vec<(String, String)>)>,
    refactored: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuritySignal {
    SharedPreconditionFailure,
    SharedTools,
    SharedArgumentPattern,
    AlignedTaskStructure,
}

impl PuritySignal {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SharedPreconditionFailure => "shared_precondition_failure",
            Self::SharedTools => "shared_tools",
            Self::SharedArgumentPattern => "shared_argument_pattern",
            Self::AlignedTaskStructure => "aligned_task_structure",
        }
    }
}

/// Minimum pairwise cosine for aligned task structure.
pub const ALIGNED_COSINE: f64 = 0.6;

/// First purity signal that holds for all members, in priority order.
pub fn purity(members: &[&GraphNode], embedder: &HashingEmbedder) -> Option<PuritySignal> {
    if members.is_empty() {
        return None;
    }
    if members.iter().all(|m| !m.errors.is_empty()) {
        let mut common = trigrams(&members[0].errors.join("\n"));
        for m in &members[1..] {
            let g = trigrams(&m.errors.join("\n"));
            common.retain(|x| g.contains(x));
        }
        if !common.is_empty() {
            return Some(PuritySignal::SharedPreconditionFailure);
        }
    }
    let mut tools = members[0].tools.clone();
    for m in &members[1..] {
        tools.retain(|t| m.tools.contains(t));
    }
    if !tools.is_empty() {
        return Some(PuritySignal::SharedTools);
    }
    if !members[0].arg_names.is_empty() && members.iter().all(|m| m.arg_names == members[0].arg_names) {
        return Some(PuritySignal::SharedArgumentPattern);
    }
    let embs: Vec<Vec<f64>> = members.iter().map(|m| embedder.embed(&m.text)).collect();
    let aligned = (0..embs.len())
        .all(|i| (i + 1..embs.len()).all(|j| cosine(&embs[i], &embs[j]) >= ALIGNED_COSINE));
    aligned.then_some(PuritySignal::AlignedTaskStructure)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGroup {
    /// Sorted node ids.
    pub members: Vec<String>,
    pub purity: PuritySignal,
    /// True when the group contains an existing skill node.
    pub revision: bool,
    pub mean_weight: f64,
}

impl CandidateGroup {
    pub fn digest(&self) -> String {
        crate::text::digest(&self.members.join("\n"))
    }

    pub fn skills(&self, graph: &OverlapGraph) -> Vec<SkillRef> {
        self.members.iter().filter_map(|m| graph.node(m).and_then(|n| n.skill().cloned())).collect()
    }
}

/// Maximal cliques of size in `[c_min, c_max]`, each sorted, in
/// lexicographic order.
pub fn maximal_cliques(graph: &OverlapGraph, c_min: usize, c_max: usize) -> Vec<Vec<String>> {
    let adj = graph.neighbors();
    let mut out = Vec::new();
    let p: BTreeSet<&str> = adj.keys().copied().collect();
    bron_kerbosch(&adj, &mut Vec::new(), p, BTreeSet::new(), c_min, c_max, &mut out);
    let mut cliques: Vec<Vec<String>> = out
        .into_iter()
        .map(|c| {
            let mut v: Vec<String> = c.into_iter().map(str::to_string).collect();
            v.sort();
            v
        })
        .collect();
    cliques.sort();
    cliques
}

fn bron_kerbosch<'a>(
    adj: &BTreeMap<&'a str, BTreeSet<&'a str>>,
    r: &mut Vec<&'a str>,
    mut p: BTreeSet<&'a str>,
    mut x: BTreeSet<&'a str>,
    c_min: usize,
    c_max: usize,
    out: &mut Vec<Vec<&'a str>>,
) {
    if r.len() > c_max || r.len() + p.len() < c_min {
        return;
    }
    if p.is_empty() {
        if x.is_empty() && r.len() >= c_min {
            out.push(r.clone());
        }
        return;
    }
    let pivot = p
        .iter()
        .chain(x.iter())
        .max_by_key(|u| adj[*u].iter().filter(|v| p.contains(*v)).count())
        .copied()
        .expect("p is non-empty");
    let candidates: Vec<&str> = p.iter().filter(|v| !adj[pivot].contains(*v)).copied().collect();
    for v in candidates {
        let nv = &adj[v];
        r.push(v);
        bron_kerbosch(
            adj,
            r,
            p.iter().filter(|u| nv.contains(*u)).copied().collect(),
            x.iter().filter(|u| nv.contains(*u)).copied().collect(),
            c_min,
            c_max,
            out,
        );
        r.pop();
        p.remove(v);
        x.insert(v);
    }
}

fn mean_internal_weight(graph: &OverlapGraph, members: &[String]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            sum += graph.weight(&members[i], &members[j]).unwrap_or(0.0);
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// Whether a clique qualifies as a refactoring candidate, and with which
/// purity signal. Groups without a skill node must span two source tasks.
pub fn qualify(graph: &OverlapGraph, members: &[String], embedder: &HashingEmbedder) -> Option<CandidateGroup> {
    let nodes: Vec<&GraphNode> = members.iter().filter_map(|m| graph.node(m)).collect();
    let revision = nodes.iter().any(|n| n.skill().is_some());
    if !revision {
        let tasks: BTreeSet<u64> = nodes.iter().filter_map(|n| n.source_task()).collect();
        if tasks.len() < 2 {
            return None;
        }
    }
    let purity = purity(&nodes, embedder)?;
    Some(CandidateGroup {
        members: members.to_vec(),
        purity,
        revision,
        mean_weight: mean_internal_weight(graph, members),
    })
}

/// Every qualifying group, best first: mean internal weight descending,
/// ties broken by the sorted member list.
pub fn candidate_groups(graph: &OverlapGraph, c_min: usize, c_max: usize, embedder: &HashingEmbedder) -> Vec<CandidateGroup> {
    let mut groups: Vec<CandidateGroup> = maximal_cliques(graph, c_min, c_max)
        .into_iter()
        .filter_map(|c| qualify(graph, &c, embedder))
        .collect();
    groups.sort_by(|a, b| {
        b.mean_weight
            .partial_cmp(&a.mean_weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.members.cmp(&b.members))
    });
    groups
}

pub fn find_candidate_groups(
    graph: &OverlapGraph,
    c_min: usize,
    c_max: usize,
    top_k: usize,
    embedder: &HashingEmbedder,
) -> Vec<CandidateGroup> {
    let mut g = candidate_groups(graph, c_min, c_max, embedder);
    g.truncate(top_k);
    g
}
