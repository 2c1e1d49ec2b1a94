use std::collections::BTreeMap;

use super::{Binding, DeskworldTask};
use crate::oracle::{CallKey, ChatRequest, Responder, RoleTag, Speaker};
use crate::trace::Action;

/// Deterministic stand-in for a frozen executor model on deskworld tasks.
///
/// It knows each task's instruction and call sequence but not the hidden
/// parts of the contract: a precondition is only honoured once the context
/// says "`pre` before `main`", and a hidden argument value only once the
/// context contains "`tool` `arg`=`value`". Both can come from a rejection
/// earlier in the episode or from a retrieved skill.
#[derive(Debug, Clone, Default)]
pub struct ScriptedExecutor {
    tasks: BTreeMap<String, DeskworldTask>,
}

impl ScriptedExecutor {
    pub fn new(tasks: impl IntoIterator<Item = DeskworldTask>) -> Self {
        Self { tasks: tasks.into_iter().map(|t| (t.id.clone(), t)).collect() }
    }

    fn task_for(&self, request: &ChatRequest) -> Option<&DeskworldTask> {
        let first = request.messages.iter().find(|m| m.speaker == Speaker::User)?;
        let rest = first.text.strip_prefix("Task ")?;
        let id = rest.split(':').next()?.trim();
        self.tasks.get(id)
    }

    pub fn next_action(task: &DeskworldTask, request: &ChatRequest) -> Action {
        let context = request.flat_text();
        let observations: Vec<&str> = request
            .messages
            .iter()
            .filter(|m| m.speaker == Speaker::User)
            .filter_map(|m| m.text.strip_prefix("observation: "))
            .map(|o| o.lines().next().unwrap_or_default())
            .collect();
        let done = observations.iter().filter(|o| o.starts_with("ok:")).count();
        let Some(mut exp) = task.expected.get(done) else {
            return Action::Done;
        };
        if let Some(main) = &exp.precondition_for {
            if !context.contains(&format!("{} before {main}", exp.tool)) {
                if let Some(next) = task.expected.get(done + 1) {
                    exp = next;
                }
            }
        }
        let args = exp
            .args
            .iter()
            .map(|a| {
                let value = match &a.binding {
                    Binding::Literal { value } => value.clone(),
                    Binding::Observed { key, .. } => observed(&observations, key).unwrap_or_else(|| "unknown".into()),
                    Binding::Hidden { value, guess } => {
                        if context.contains(&format!("{} {}={value}", exp.tool, a.name)) {
                            value.clone()
                        } else {
                            guess.clone()
                        }
                    }
                };
                (a.name.clone(), value)
            })
            .collect();
        Action::Call { tool: exp.tool.clone(), args }
    }
}

fn observed(observations: &[&str], key: &str) -> Option<String> {
    let prefix = format!("{key}=");
    observations.iter().rev().find_map(|o| {
        let (_, outs) = o.split_once(" -> ")?;
        outs.split(", ").find_map(|kv| kv.strip_prefix(&prefix).map(str::to_string))
    })
}

impl Responder for ScriptedExecutor {
    fn respond(&self, _key: &CallKey, request: &ChatRequest) -> Option<String> {
        if request.role_tag != RoleTag::Executor {
            return None;
        }
        Some(match self.task_for(request) {
            Some(task) => Self::next_action(task, request).to_string(),
            None => "DONE".to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deskworld::{generate, step, FamilyKind};
    use crate::oracle::Message;

    fn run(task: &DeskworldTask, hint: &str) -> Vec<String> {
        let mut messages = vec![Message::system("tools"), Message::user(format!("Task {}: {}\n{hint}", task.id, task.instruction))];
        let mut cursor = 0;
        let mut obs_log = Vec::new();
        for _ in 0..10 {
            let req = ChatRequest::new(RoleTag::Executor, messages.clone(), 0.0);
            let action = ScriptedExecutor::next_action(task, &req);
            if action == Action::Done {
                break;
            }
            let (obs, r) = step(task, cursor, &action);
            if r.advanced {
                cursor += 1;
            }
            obs_log.push(obs.clone());
            messages.push(Message::assistant(action.to_string()));
            messages.push(Message::user(format!("observation: {obs}")));
        }
        obs_log
    }

    #[test]
    fn learns_hidden_contract_from_rejections() {
        let (suite, _) = generate(4, 4, 3);
        let h = suite.tasks.iter().find(|t| t.kind == FamilyKind::PreconditionArg).unwrap();
        let log = run(h, "");
        assert_eq!(log.len(), 4);
        assert!(log[0].starts_with("error: precondition failed"));
        assert!(log[1].starts_with("error: invalid argument; use"));
        assert!(log[2].starts_with("ok:") && log[3].starts_with("ok:"));
    }

    #[test]
    fn follows_skill_hints() {
        let (suite, _) = generate(4, 4, 3);
        let h = suite.tasks.iter().find(|t| t.kind == FamilyKind::PreconditionArg).unwrap();
        let pre = &h.expected[0];
        let hint = format!(
            "Always call {} before {}. Use {} level={}.",
            pre.tool,
            h.expected[1].tool,
            pre.tool,
            pre.args[0].binding.value()
        );
        let log = run(h, &hint);
        assert_eq!(log.len(), 2, "{log:?}");
        let k = suite.tasks.iter().find(|t| t.kind == FamilyKind::Chain).unwrap();
        assert!(run(k, "").iter().all(|o| o.starts_with("ok:")));
    }
}
