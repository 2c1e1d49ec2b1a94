//! Running the executor on tasks with retrieved skills, the training loop
//! that maintains the repository between tasks, and frozen evaluation.

mod train;

use serde::{Deserialize, Serialize};

pub use train::{install_rules, run_training, TaskRecord, TrainingReport};

use crate::config::RunConfig;
use crate::deskworld::{self, DeskworldTask};
use crate::maintenance::executed_tools;
use crate::oracle::templates::template;
use crate::oracle::{CallLog, ChatRequest, Message, Oracle, OracleSession, RoleTag, Scope};
use crate::retrieval::{build_query, render_skills, select_top_k, QueryLimits, RetrievalMode, TurnDigest};
use crate::skill::{Skill, SkillRef, UsageStats};
use crate::store::StoreSnapshot;
use crate::text::HashingEmbedder;
use crate::trace::{Action, Step, Trace};

fn approx_tokens(text_len: usize) -> u64 {
    text_len.div_ceil(4) as u64
}

/// Runs one task to `DONE` or the round limit. Retrieval is redone every
/// turn against `snapshot`; the selected skills are appended to the latest
/// user message.
pub fn execute(
    session: &mut OracleSession,
    task: &DeskworldTask,
    snapshot: &StoreSnapshot,
    mode: RetrievalMode,
    config: &RunConfig,
    embedder: &HashingEmbedder,
) -> Trace {
    let tool_names = task.tool_names();
    let system = template(RoleTag::Executor).render(&[("tools", &task.render_tools())]);
    let opening = format!("Task {}: {}", task.id, task.instruction);
    let mut trace = Trace {
        task_id: task.id.clone(),
        instruction: task.instruction.clone(),
        tools: tool_names.clone(),
        ..Trace::default()
    };
    let mut transcript: Vec<(String, String)> = Vec::new();
    let mut cursor = 0;
    for turn in 1..=config.max_rounds {
        let digests: Vec<String> = trace.steps.iter().map(|s| s.action.to_string()).collect();
        let history: Vec<TurnDigest<'_>> = trace
            .steps
            .iter()
            .zip(&digests)
            .map(|(s, a)| TurnDigest { action: a, observation: &s.observation, is_error: s.is_error })
            .collect();
        let query = build_query(&task.instruction, &tool_names, turn as usize, &history, QueryLimits::default());
        let picked = select_top_k(embedder, &query, &snapshot.views, config.top_k, mode, &config.retrieval)
            .expect("run config weights are validated on load");
        let exposed: Vec<SkillRef> = picked.iter().map(|e| e.view.skill.clone()).collect();
        let skills: Vec<&Skill> = exposed.iter().filter_map(|r| snapshot.skill(r)).collect();
        let block = render_skills(&skills, config.limits.skill_body);

        let mut messages = vec![Message::system(system.clone()), Message::user(opening.clone())];
        for (action, obs) in &transcript {
            messages.push(Message::assistant(action.clone()));
            messages.push(Message::user(format!("observation: {obs}")));
        }
        if !block.is_empty() {
            let last = messages.last_mut().expect("opening message present");
            last.text = format!("{}\n\n{block}", last.text);
        }
        trace.prompt_tokens += approx_tokens(messages.iter().map(|m| m.text.len()).sum());
        let Ok(reply) = session.chat(ChatRequest::new(RoleTag::Executor, messages, 0.0)) else {
            break;
        };
        trace.completion_tokens += approx_tokens(reply.len());
        let action = Action::parse(&reply);
        let (observation, result) = deskworld::step(task, cursor, &action);
        if result.advanced {
            cursor += 1;
        }
        let done = action == Action::Done;
        transcript.push((action.to_string(), observation.clone()));
        trace.steps.push(Step { turn, action, observation, is_error: result.is_error, exposed });
        if done {
            break;
        }
    }
    trace
}

/// Per-skill usage counters contributed by one trace.
pub fn usage_from_trace(trace: &Trace, snapshot: &StoreSnapshot) -> Vec<(SkillRef, UsageStats)> {
    trace
        .retrieved_counts()
        .into_iter()
        .map(|(r, retrieved)| {
            let executed = snapshot.skill(&r).is_some_and(|s| !executed_tools(s, trace).is_empty());
            (r, UsageStats { retrieved_count: retrieved, executed_count: u64::from(executed), exposed_count: 1 })
        })
        .collect()
}

/// Runs `f` over `items` on up to `parallelism` threads and returns results
/// in item order.
pub(crate) fn run_ordered<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let p = parallelism.max(1).min(items.len().max(1));
    if p == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..p)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % p == w)
                        .map(|(i, t)| (i, f(i, t)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub family: String,
    pub utility: f64,
    pub exposed: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    #[serde(skip)]
    pub calls: CallLog,
}

impl EvalReport {
    pub fn mean_utility(&self) -> f64 {
        mean(self.records.iter().map(|r| r.utility))
    }

    pub fn mean_tokens(&self) -> f64 {
        mean(self.records.iter().map(|r| (r.prompt_tokens + r.completion_tokens) as f64))
    }
}

pub(crate) fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Frozen evaluation: active skills only, no credit, no maintenance. Pass
/// an empty snapshot for the no-skill baseline.
pub fn evaluate(snapshot: &StoreSnapshot, tasks: &[DeskworldTask], oracle: &Oracle, config: &RunConfig) -> EvalReport {
    let embedder = HashingEmbedder::default();
    let results = run_ordered(tasks, config.parallelism, |i, task| {
        let mut session = oracle.session(Scope::Eval(i as u64 + 1));
        let trace = execute(&mut session, task, snapshot, RetrievalMode::Heldout, config, &embedder);
        let record = EvalRecord {
            task_id: task.id.clone(),
            family: task.family.clone(),
            utility: deskworld::utility(task, &trace),
            exposed: trace.exposed().len(),
            prompt_tokens: trace.prompt_tokens,
            completion_tokens: trace.completion_tokens,
        };
        (record, session.into_log())
    });
    let mut report = EvalReport::default();
    for (record, log) in results {
        report.records.push(record);
        report.calls.extend(log);
    }
    report
}
