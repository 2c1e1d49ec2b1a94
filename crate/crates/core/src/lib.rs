//! Skill repository maintenance for a frozen tool-using executor.
//!
//! An executor model works through tasks with a handful of retrieved skills
//! in its prompt. After each task the trace is credited, new skills are
//! extracted and gated by their test bundles, and the repository is
//! maintained: bundles are patched from credit, harmful skills are refined
//! or filtered, overlapping trace segments are refactored into shared
//! skills, and the rules that guide the skill-producing roles are rewritten
//! from how their earlier output fared.
//!
//! Numeric kernels (retrieval scores, overlap edge weights, similarity) are
//! generic over [`scalar::Scalar`]; the aliases below fix them to `f64`,
//! which the rest of the crate uses.

pub mod config;
pub mod deskworld;
pub mod draft;
pub mod graph;
pub mod harness;
pub mod maintenance;
pub mod oracle;
pub mod retrieval;
pub mod roles;
pub mod scalar;
pub mod skill;
pub mod store;
pub mod text;
pub mod trace;

pub use config::RunConfig;
pub use harness::{evaluate, run_training, EvalReport, TrainingReport};
pub use oracle::{Oracle, OracleSession, ScriptedBackend};
pub use skill::{LifecycleEvent, LifecycleState, Role, Skill, SkillId, SkillRef};
pub use store::Repository;

pub type Score = f64;
pub type Weights = retrieval::RetrievalWeights<Score>;
pub type EdgeWeights = graph::GraphWeights<Score>;
pub type Breakdown = retrieval::ScoreBreakdown<Score>;
