//! Per-turn skill retrieval: query construction, the four-component score,
//! top-K selection with lifecycle-aware exposure, and prompt rendering.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::scalar::{unit, Scalar};
use crate::skill::{LifecycleState, Skill, SkillRef};
use crate::text::{clip, cosine, jaccard, trigrams, HashingEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalWeights<T> {
    pub sparse: T,
    pub emb: T,
    pub tool: T,
    pub trust: T,
}

impl<T: Scalar> Default for RetrievalWeights<T> {
    fn default() -> Self {
        Self { sparse: T::lit(0.30), emb: T::lit(0.40), tool: T::lit(0.20), trust: T::lit(0.10) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("retrieval weights must be non-negative and sum to 1")]
pub struct InvalidWeights;

impl<T: Scalar> RetrievalWeights<T> {
    pub fn validate(&self) -> Result<(), InvalidWeights> {
        let all = [self.sparse, self.emb, self.tool, self.trust];
        if all.iter().any(|w| w.is_nan() || *w < T::zero()) {
            return Err(InvalidWeights);
        }
        let sum = all.iter().fold(T::zero(), |a, b| a + *b);
        if (sum - T::one()).abs() > T::lit(1e-6) {
            return Err(InvalidWeights);
        }
        Ok(())
    }
}

/// Per-turn retrieval query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub request_text: String,
    pub dialogue_state_digest: String,
    pub recent_tool_errors: Vec<String>,
    pub previous_assistant_digest: String,
    /// Tool names mentioned anywhere in the digests.
    pub tools: BTreeSet<String>,
}

impl RetrievalQuery {
    /// Text matched against skill views.
    pub fn text(&self) -> String {
        let mut t = self.request_text.clone();
        for e in &self.recent_tool_errors {
            t.push('\n');
            t.push_str(e);
        }
        t
    }
}

/// What the query builder needs to know about one past turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnDigest<'a> {
    pub action: &'a str,
    pub observation: &'a str,
    pub is_error: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryLimits {
    pub state_digest_bytes: usize,
    pub assistant_digest_bytes: usize,
    pub error_bytes: usize,
    pub recent_errors: usize,
}

impl Default for QueryLimits {
    fn default() -> Self {
        Self { state_digest_bytes: 512, assistant_digest_bytes: 256, error_bytes: 256, recent_errors: 3 }
    }
}

/// Deterministic query for turn `turn_index` (1-based) given the turns so far.
pub fn build_query(
    request_text: &str,
    available_tools: &[String],
    turn_index: usize,
    history: &[TurnDigest<'_>],
    limits: QueryLimits,
) -> RetrievalQuery {
    debug_assert!(turn_index >= 1 && turn_index == history.len() + 1);
    let mut state = format!("turn {turn_index}; tools: {}", available_tools.join(", "));
    let recent: Vec<&str> = history.iter().rev().take(3).map(|t| t.action).collect();
    if !recent.is_empty() {
        state.push_str("; recent: ");
        state.push_str(&recent.into_iter().rev().collect::<Vec<_>>().join(" | "));
    }
    let dialogue_state_digest = clip(&state, limits.state_digest_bytes).to_string();
    let recent_tool_errors: Vec<String> = history
        .iter()
        .rev()
        .take(limits.recent_errors)
        .filter(|t| t.is_error)
        .map(|t| clip(t.observation, limits.error_bytes).to_string())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    let previous_assistant_digest =
        history.last().map(|t| clip(t.action, limits.assistant_digest_bytes).to_string()).unwrap_or_default();

    let haystack = format!("{dialogue_state_digest}\n{previous_assistant_digest}\n{}", recent_tool_errors.join("\n"));
    let words: BTreeSet<String> = crate::text::words(&haystack).into_iter().collect();
    let tools = available_tools.iter().filter(|t| words.contains(&t.to_lowercase())).cloned().collect();
    RetrievalQuery {
        request_text: request_text.to_string(),
        dialogue_state_digest,
        recent_tool_errors,
        previous_assistant_digest,
        tools,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustInputs {
    pub helpful: u64,
    pub harmful: u64,
    pub exposed: u64,
    pub state: LifecycleState,
}

/// Compact retrieval view of a skill version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRetrievalView {
    pub skill: SkillRef,
    pub name: String,
    pub description: String,
    pub trigger_conditions: Vec<String>,
    pub allowed_tools: BTreeSet<String>,
    pub domains: BTreeSet<String>,
    pub body_summary: String,
    pub trust_inputs: TrustInputs,
}

pub const BODY_SUMMARY_BYTES: usize = 240;

impl SkillRetrievalView {
    pub fn new(skill: &Skill, trust_inputs: TrustInputs) -> Self {
        Self {
            skill: skill.skill_ref(),
            name: skill.name.clone(),
            description: skill.description.clone(),
            trigger_conditions: skill.trigger_conditions.clone(),
            allowed_tools: skill.allowed_tools.clone(),
            domains: skill.domains.clone(),
            body_summary: clip(&skill.body, BODY_SUMMARY_BYTES).to_string(),
            trust_inputs,
        }
    }

    pub fn lexical_text(&self) -> String {
        format!("{}\n{}\n{}", self.name, self.description, self.trigger_conditions.join("\n"))
    }

    pub fn semantic_text(&self) -> String {
        format!(
            "{}\n{}\n{}\n{}\n{}",
            self.name,
            self.description,
            self.trigger_conditions.join("\n"),
            self.domains.iter().cloned().collect::<Vec<_>>().join(" "),
            self.body_summary
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown<T> {
    pub sparse: T,
    pub emb: T,
    pub tool: T,
    pub trust: T,
    pub total: T,
}

/// Jaccard over word 3-grams of the query text and the skill's lexical text.
pub fn sparse_score<T: Scalar>(q: &RetrievalQuery, v: &SkillRetrievalView) -> T {
    jaccard(&trigrams(&q.text()), &trigrams(&v.lexical_text()))
}

/// Cosine of hashed embeddings, mapped from [-1, 1] onto [0, 1].
pub fn emb_score<T: Scalar>(embedder: &HashingEmbedder, q: &RetrievalQuery, v: &SkillRetrievalView) -> T {
    let c: T = cosine(&embedder.embed::<T>(&q.text()), &embedder.embed::<T>(&v.semantic_text()));
    unit((c + T::one()) / T::lit(2.0))
}

/// Fraction of query tools the skill allows; 0.5 for tool-agnostic skills.
pub fn tool_score<T: Scalar>(q: &RetrievalQuery, v: &SkillRetrievalView) -> T {
    if v.allowed_tools.is_empty() {
        return T::lit(0.5);
    }
    let inter = q.tools.intersection(&v.allowed_tools).count();
    T::ratio(inter, q.tools.len().max(1))
}

/// Laplace-smoothed helpful ratio, halved while the skill is on trial.
pub fn trust_score<T: Scalar>(t: &TrustInputs) -> T {
    let base = T::ratio(t.helpful as usize + 1, (t.helpful + t.harmful) as usize + 2);
    if t.state == LifecycleState::Trial {
        base * T::lit(0.5)
    } else {
        base
    }
}

/// Weighted sum of already-computed components.
pub fn combine<T: Scalar>(
    sparse: T,
    emb: T,
    tool: T,
    trust: T,
    w: &RetrievalWeights<T>,
) -> Result<ScoreBreakdown<T>, InvalidWeights> {
    w.validate()?;
    let total = unit(w.sparse * sparse + w.emb * emb + w.tool * tool + w.trust * trust);
    Ok(ScoreBreakdown { sparse, emb, tool, trust, total })
}

pub fn score<T: Scalar>(
    embedder: &HashingEmbedder,
    q: &RetrievalQuery,
    v: &SkillRetrievalView,
    w: &RetrievalWeights<T>,
) -> Result<ScoreBreakdown<T>, InvalidWeights> {
    combine(sparse_score(q, v), emb_score(embedder, q, v), tool_score(q, v), trust_score(&v.trust_inputs), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Training,
    Heldout,
}

/// Exposure tier; `None` means the state is never exposed in this mode.
pub fn exposure_tier(state: LifecycleState, mode: RetrievalMode) -> Option<u8> {
    match (state, mode) {
        (LifecycleState::Active, _) => Some(0),
        (LifecycleState::Trial, RetrievalMode::Training) => Some(1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exposure<T> {
    pub view: SkillRetrievalView,
    pub score: ScoreBreakdown<T>,
    pub tier: u8,
}

/// Total order used for ranking: lower tier first, then higher score, then
/// higher trust, then lexicographic id.
pub fn rank_order<T: Scalar>(a: &Exposure<T>, b: &Exposure<T>) -> Ordering {
    a.tier
        .cmp(&b.tier)
        .then_with(|| b.score.total.partial_cmp(&a.score.total).unwrap_or(Ordering::Equal))
        .then_with(|| b.score.trust.partial_cmp(&a.score.trust).unwrap_or(Ordering::Equal))
        .then_with(|| a.view.skill.cmp(&b.view.skill))
}

struct Ranked<T: Scalar>(Exposure<T>);

impl<T: Scalar> PartialEq for Ranked<T> {
    fn eq(&self, other: &Self) -> bool {
        rank_order(&self.0, &other.0) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Ranked<T> {}
impl<T: Scalar> PartialOrd for Ranked<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Ranked<T> {
    // Max-heap on "worse", so the heap top is the weakest kept candidate.
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// Top-K exposable skills, best first. Uses a bounded heap, so cost is
/// O(n log K) over the candidate views.
pub fn select_top_k<'a, T, I>(
    embedder: &HashingEmbedder,
    q: &RetrievalQuery,
    views: I,
    k: usize,
    mode: RetrievalMode,
    w: &RetrievalWeights<T>,
) -> Result<Vec<Exposure<T>>, InvalidWeights>
where
    T: Scalar,
    I: IntoIterator<Item = &'a SkillRetrievalView>,
{
    w.validate()?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let q_grams = trigrams(&q.text());
    let q_emb = embedder.embed::<T>(&q.text());
    let mut heap: BinaryHeap<Ranked<T>> = BinaryHeap::with_capacity(k + 1);
    for v in views {
        let Some(tier) = exposure_tier(v.trust_inputs.state, mode) else { continue };
        let sparse = jaccard(&q_grams, &trigrams(&v.lexical_text()));
        let c: T = cosine(&q_emb, &embedder.embed::<T>(&v.semantic_text()));
        let emb = unit((c + T::one()) / T::lit(2.0));
        let score = combine(sparse, emb, tool_score(q, v), trust_score(&v.trust_inputs), w)?;
        heap.push(Ranked(Exposure { view: v.clone(), score, tier }));
        if heap.len() > k {
            heap.pop();
        }
    }
    Ok(heap.into_sorted_vec().into_iter().map(|r| r.0).collect())
}

/// Prompt block for the exposed skills; empty when nothing is exposed.
///
/// Format, per skill, separated by one blank line:
/// ```text
/// <skill id="ID" version="N">
/// name: NAME
/// trigger: T1; T2
/// body:
/// BODY
/// </skill>
/// ```
/// preceded by the header line `### Retrieved skills (guidance only, not tools)`.
pub fn render_skills(skills: &[&Skill], body_limit: usize) -> String {
    if skills.is_empty() {
        return String::new();
    }
    let mut out = String::from("### Retrieved skills (guidance only, not tools)\n");
    let blocks: Vec<String> = skills
        .iter()
        .map(|s| {
            format!(
                "<skill id=\"{}\" version=\"{}\">\nname: {}\ntrigger: {}\nbody:\n{}\n</skill>",
                s.id,
                s.version,
                s.name,
                s.trigger_conditions.join("; "),
                clip(&s.body, body_limit).trim_end()
            )
        })
        .collect();
    out.push_str(&blocks.join("\n\n"));
    out.push('\n');
    out
}
