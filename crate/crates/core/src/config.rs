//! Run configuration. Every field is persisted with the repository.

use serde::{Deserialize, Serialize};

use crate::graph::GraphWeights;
use crate::retrieval::RetrievalWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextLimits {
    /// Bytes of rendered trace shown to any role.
    pub trace: usize,
    /// Bytes of skill body rendered into executor prompts.
    pub skill_body: usize,
    /// Bytes of evidence digest shown to the refiner and meta updates.
    pub evidence: usize,
    /// Bytes of segment text kept in the overlap graph.
    pub segment: usize,
}

impl Default for TextLimits {
    fn default() -> Self {
        Self { trace: 8000, skill_body: 2000, evidence: 4000, segment: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Skills exposed per executor turn.
    pub top_k: usize,
    pub k_micro: u64,
    pub k_macro: u64,
    pub extractor_samples: usize,
    /// Harmful judgments at which a skill is filtered.
    pub filter_harmful: u64,
    /// Helpful judgments that protect a skill from the filter.
    pub filter_helpful: u64,
    pub retrieval: RetrievalWeights<f64>,
    pub graph: GraphWeights<f64>,
    pub clique_min: usize,
    pub clique_max: usize,
    pub clique_top_k: usize,
    /// Tasks of segment history kept in the overlap graph.
    pub graph_window: u64,
    pub buffer_sample: usize,
    pub maturity_exposures: u64,
    pub retry_budget: u32,
    pub seed: u64,
    pub max_rounds: u32,
    pub bundle_cap: usize,
    /// Refinement attempts per skill per macro window.
    pub refine_budget: u32,
    pub parallelism: usize,
    pub extractor_temperature: f64,
    pub role_temperature: f64,
    pub limits: TextLimits,
    /// Skill maintenance on, meta-rule updates off.
    pub static_mode: bool,
    /// Keep the current meta rules fixed.
    pub freeze_meta: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            k_micro: 1,
            k_macro: 5,
            extractor_samples: 3,
            filter_harmful: 2,
            filter_helpful: 1,
            retrieval: RetrievalWeights::default(),
            graph: GraphWeights::default(),
            clique_min: 3,
            clique_max: 6,
            clique_top_k: 4,
            graph_window: 25,
            buffer_sample: 20,
            maturity_exposures: 3,
            retry_budget: 2,
            seed: 0,
            max_rounds: 20,
            bundle_cap: 12,
            refine_budget: 2,
            parallelism: 1,
            extractor_temperature: 0.7,
            role_temperature: 0.2,
            limits: TextLimits::default(),
            static_mode: false,
            freeze_meta: false,
        }
    }
}

impl RunConfig {
    /// Output-parse attempts per role call.
    pub fn parse_attempts(&self) -> u32 {
        self.retry_budget.max(1)
    }

    pub fn meta_updates_enabled(&self) -> bool {
        !self.static_mode && !self.freeze_meta
    }
}
