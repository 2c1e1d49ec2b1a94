use serde_json::{json, Value};

use crate::oracle::{CallKey, ChatRequest, Responder, RoleTag};

/// Rule text that switches the scripted extractor, refactorer and refiner
/// from describing contracts loosely to copying exact argument values.
pub const EXACT_RULE: &str =
    "Specify exact argument values required by the tool contract, copying tool arg=value from observed rejections.";
pub const ORDER_RULE: &str = "State call-before-call ordering explicitly whenever a tool reports a failed precondition.";
const DEFAULT_RULE: &str = "Prefer skills grounded in observed tool behavior.";

/// Deterministic stand-in for the maintenance model roles on deskworld
/// traces. It reads only what the prompts show it. Whether it writes exact
/// argument values into skills depends on its learned rules, which is what
/// lets rule updates change downstream behavior.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedMaintainer;

#[derive(Debug, Default, PartialEq, Eq)]
struct Hints {
    /// (precondition tool, main tool)
    order: Vec<(String, String)>,
    /// (tool, arg, value)
    bind: Vec<(String, String, String)>,
}

fn is_tool_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn take_tool(s: &str) -> (&str, &str) {
    let end = s.find(|c: char| !is_tool_char(c)).unwrap_or(s.len());
    (&s[..end], &s[end..])
}

fn take_value(s: &str) -> &str {
    let end = s.find(|c: char| c.is_whitespace() || matches!(c, ',' | ';' | ')' | '"' | '|')).unwrap_or(s.len());
    s[..end].trim_end_matches('.')
}

fn hints(text: &str) -> Hints {
    let mut h = Hints::default();
    for (i, _) in text.match_indices("precondition failed; call ") {
        let rest = &text[i + "precondition failed; call ".len()..];
        let (pre, rest) = take_tool(rest);
        let Some(rest) = rest.strip_prefix(" before ") else { continue };
        let (main, _) = take_tool(rest);
        let pair = (pre.to_string(), main.to_string());
        if !pre.is_empty() && !main.is_empty() && !h.order.contains(&pair) {
            h.order.push(pair);
        }
    }
    for (i, _) in text.match_indices("invalid argument; use ") {
        let rest = &text[i + "invalid argument; use ".len()..];
        let (tool, rest) = take_tool(rest);
        let Some(rest) = rest.strip_prefix(' ') else { continue };
        let Some((arg, rest)) = rest.split_once('=') else { continue };
        let value = take_value(rest);
        let triple = (tool.to_string(), arg.to_string(), value.to_string());
        if !tool.is_empty() && !value.is_empty() && arg.chars().all(is_tool_char) && !h.bind.contains(&triple) {
            h.bind.push(triple);
        }
    }
    h
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(i) = text.find(start) else { return "" };
    let rest = &text[i + start.len()..];
    match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    }
}

fn wants_exact(rules: &str) -> bool {
    rules.to_ascii_lowercase().contains("exact argument")
}

fn domain_of(tool: &str) -> &str {
    tool.split('_').next().unwrap_or(tool)
}

fn generalize(instruction: &str) -> String {
    instruction
        .split_whitespace()
        .filter(|w| !w.chars().any(|c| c.is_ascii_digit()))
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_string()
}

fn case(kind: &str, input: &str, expected: &str, required: &str) -> Value {
    json!({"kind": kind, "input": input, "expected": expected, "rule": format!("require: {required}")})
}

fn skills(list: Vec<Value>) -> String {
    json!({ "skills": list }).to_string()
}

/// A value passed from one successful call's output into a later call.
fn chain(trace: &str) -> Option<(String, String, String)> {
    let mut produced: Vec<(String, String)> = Vec::new();
    for line in trace.lines() {
        let Some((call, obs)) = line.split_once(" -> ") else { continue };
        let Some(call) = call.split_once(": CALL ").map(|(_, c)| c) else { continue };
        if !obs.starts_with("ok:") {
            continue;
        }
        let (tool, args) = take_tool(call);
        for (src, kv) in &produced {
            if src != tool && args.contains(kv.as_str()) {
                let key = kv.split('=').next().unwrap_or_default().to_string();
                return Some((src.clone(), tool.to_string(), key));
            }
        }
        if let Some((_, outs)) = line.rsplit_once(" -> ") {
            for kv in outs.split(", ").filter(|kv| kv.contains('=')) {
                produced.push((tool.to_string(), kv.trim().to_string()));
            }
        }
    }
    None
}

impl ScriptedMaintainer {
    fn extractor(text: &str) -> String {
        let sample: usize = between(text, "Candidate sample ", " of").trim().parse().unwrap_or(1);
        if sample >= 3 {
            return skills(vec![]);
        }
        let exact = wants_exact(between(text, "Learned rules for the extractor role:", "Existing skills"));
        let existing: Vec<String> = between(text, "Existing skills (do not duplicate):", "Candidate sample")
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .map(|l| l.split(": ").next().unwrap_or_default().to_ascii_lowercase())
            .collect();
        let trace = between(text, "=== TRACE ===", "=== END TRACE ===");
        let instruction = trace.lines().find_map(|l| l.strip_prefix("instruction: ")).unwrap_or_default();
        let trigger = generalize(instruction);
        let h = hints(trace);
        let mut out = Vec::new();
        let mut covered = Vec::new();
        for (pre, main) in &h.order {
            let related: Vec<_> = h.bind.iter().filter(|(t, ..)| t == pre || t == main).collect();
            let mut body = format!("Always call {pre} before {main}.");
            let mut bundle = vec![case("unit", &trigger, &format!("calls {pre} before {main}"), &format!("{pre} before {main}"))];
            for (t, a, v) in &related {
                covered.push((t.clone(), a.clone()));
                if exact {
                    body.push_str(&format!(" Use {t} {a}={v}."));
                    bundle.push(case("unit", &format!("{t} arguments"), &format!("uses {a}={v}"), &format!("{t} {a}={v}")));
                } else {
                    body.push_str(&format!(" {t} rejects guessed {a} values."));
                }
            }
            let name = if exact && !related.is_empty() {
                format!("{pre} before {main} with exact arguments")
            } else {
                format!("{pre} before {main}")
            };
            out.push(json!({
                "name": name,
                "semantics": "workflow",
                "description": format!("Precondition ordering for {main}"),
                "triggers": [trigger],
                "tools": [pre, main],
                "domains": [domain_of(main)],
                "body": body,
                "bundle": bundle,
            }));
        }
        for (t, a, v) in h.bind.iter().filter(|(t, a, _)| !covered.contains(&(t.clone(), a.clone()))) {
            let (name, body, bundle) = if exact {
                (
                    format!("{t} {a} exact value"),
                    format!("Use {t} {a}={v}."),
                    vec![case("unit", &format!("{t} arguments"), &format!("uses {a}={v}"), &format!("{t} {a}={v}"))],
                )
            } else {
                (format!("{t} {a} contract"), format!("{t} rejects guessed {a} values; read the rejection message."), vec![])
            };
            out.push(json!({
                "name": name,
                "semantics": "knowledge",
                "description": format!("Argument contract of {t}"),
                "triggers": [trigger],
                "tools": [t],
                "domains": [domain_of(t)],
                "body": body,
                "bundle": bundle,
            }));
        }
        if out.is_empty() {
            if let Some((src, dst, key)) = chain(trace) {
                out.push(json!({
                    "name": format!("{src} then {dst}"),
                    "semantics": "workflow",
                    "description": format!("Look up with {src} before {dst}"),
                    "triggers": [trigger],
                    "tools": [src, dst],
                    "domains": [domain_of(&dst)],
                    "body": format!("Call {src} first, then pass its {key} to {dst}."),
                    "bundle": [case("unit", &trigger, &format!("passes {key}"), &format!("pass its {key} to {dst}"))],
                }));
            }
        }
        out.retain(|s| !existing.contains(&s["name"].as_str().unwrap_or_default().to_ascii_lowercase()));
        skills(out)
    }

    fn refactorer(text: &str) -> String {
        let exact = wants_exact(between(text, "Learned rules for the refactorer role:", "Purity signal"));
        let group = between(text, "=== GROUP ===", "=== END GROUP ===");
        let mut common: Option<Vec<String>> = None;
        for line in group.lines().filter(|l| l.starts_with("node ")) {
            let tools: Vec<String> = between(line, "| tools: ", " |")
                .split(", ")
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect();
            common = Some(match common {
                None => tools,
                Some(c) => c.into_iter().filter(|t| tools.contains(t)).collect(),
            });
        }
        let common = common.unwrap_or_default();
        let h = hints(group);
        let mut body = Vec::new();
        let mut tools = Vec::new();
        let mut bundle = Vec::new();
        for (pre, main) in h.order.iter().filter(|(_, m)| common.contains(m)) {
            body.push(format!("Always call {pre} before {main}."));
            bundle.push(case("unit", &format!("{main} requests"), "orders the calls", &format!("{pre} before {main}")));
            tools.extend([pre.clone(), main.clone()].into_iter().filter(|t| common.contains(t)));
        }
        let mut bound = false;
        if exact {
            for (t, a, v) in h.bind.iter().filter(|(t, ..)| common.contains(t)) {
                bound = true;
                body.push(format!("Use {t} {a}={v}."));
                bundle.push(case("unit", &format!("{t} arguments"), &format!("uses {a}={v}"), &format!("{t} {a}={v}")));
                tools.push(t.clone());
            }
        }
        if body.is_empty() {
            return skills(vec![]);
        }
        tools.sort();
        tools.dedup();
        let domain = domain_of(&tools[0]).to_string();
        let name = if bound {
            format!("{domain} shared contract exact")
        } else {
            format!("{domain} shared contract")
        };
        skills(vec![json!({
            "name": name,
            "semantics": "workflow",
            "description": format!("Shared call contract of {domain} tools"),
            "triggers": [format!("{domain} requests")],
            "tools": tools,
            "domains": [domain],
            "body": body.join(" "),
            "bundle": bundle,
        })])
    }

    fn refiner(text: &str) -> String {
        let exact = wants_exact(between(text, "Learned rules for the refiner role:", "=== SKILL ==="));
        let raw = between(text, "=== SKILL ===", "=== END SKILL ===").trim();
        let Ok(mut skill) = serde_json::from_str::<Value>(raw) else {
            return "no revision".to_string();
        };
        let tools: Vec<String> = skill["tools"]
            .as_array()
            .map(|a| a.iter().filter_map(|t| t.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        let evidence = format!(
            "{}\n{}",
            between(text, "=== BUNDLE ===", "=== END BUNDLE ==="),
            between(text, "=== EVIDENCE ===", "=== END EVIDENCE ===")
        );
        let h = hints(&evidence);
        let mut body = skill["body"].as_str().unwrap_or_default().to_string();
        let mut changed = false;
        if exact {
            for (t, a, v) in h.bind.iter().filter(|(t, ..)| tools.contains(t)) {
                let needle = format!("{t} {a}={v}");
                if !body.contains(&needle) {
                    body.push_str(&format!(" Use {needle}."));
                    changed = true;
                }
            }
        }
        if changed {
            skill["body"] = Value::String(body);
        } else if let Some(first) = tools.first() {
            let narrowed = format!("only when {first} is available");
            if let Some(triggers) = skill["triggers"].as_array_mut() {
                if !triggers.iter().any(|t| t.as_str() == Some(narrowed.as_str())) {
                    triggers.push(Value::String(narrowed));
                }
            }
        }
        if let Some(obj) = skill.as_object_mut() {
            obj.remove("id");
            obj.remove("version");
        }
        json!({ "skill": skill }).to_string()
    }

    fn credit(text: &str) -> String {
        let trace = between(text, "=== TRACE ===", "=== END TRACE ===");
        let steps: Vec<&str> = trace.lines().filter(|l| l.starts_with("turn ")).collect();
        let fallback = trace.lines().find(|l| !l.trim().is_empty()).unwrap_or_default();
        let mut judgments = Vec::new();
        for line in between(text, "=== EXPOSED SKILLS ===", "=== END EXPOSED SKILLS ===").lines() {
            let Some(id) = line.strip_prefix("- id: ").and_then(|r| r.split(" |").next()) else { continue };
            let tools: Vec<&str> = between(line, "| tools: ", " |").split(", ").filter(|t| !t.is_empty()).collect();
            let mentions = |l: &&str| tools.iter().any(|t| l.contains(t));
            let (judgment, rationale, scope) =
                if let Some(l) = steps.iter().find(|l| l.contains("-> error:") && mentions(l)) {
                    ("harmful", "error on a tool the skill covers", *l)
                } else if let Some(l) = steps.iter().find(|l| l.contains("-> ok:") && mentions(l)) {
                    ("helpful", "the skill's tools succeeded", *l)
                } else {
                    ("neutral", "the skill's tools were not used", fallback)
                };
            judgments.push(json!({"skill": id, "judgment": judgment, "rationale": rationale, "scope": scope}));
        }
        json!({ "judgments": judgments }).to_string()
    }

    fn verdict(text: &str) -> String {
        let body = between(text, "=== SKILL BODY ===", "=== END SKILL BODY ===");
        let rule = text.lines().find_map(|l| l.strip_prefix("Verdict rule: ")).unwrap_or_default().trim();
        let mut required = Vec::new();
        if let Some(x) = rule.strip_prefix("require: ") {
            required.push(x.trim().to_string());
        } else if let Some(scope) = rule.strip_prefix("The skill must not cause or permit: ") {
            let h = hints(scope);
            required.extend(h.order.iter().map(|(p, m)| format!("{p} before {m}")));
            required.extend(h.bind.iter().map(|(t, a, v)| format!("{t} {a}={v}")));
        }
        match required.iter().find(|r| !body.contains(r.as_str())) {
            Some(missing) => format!("FAIL: body does not state {missing}"),
            None => "PASS".to_string(),
        }
    }

    fn meta(text: &str) -> String {
        let role = between(text, "guide the ", " role").trim().to_string();
        let mut rules: Vec<String> = between(text, "Current rules:", "=== EVIDENCE ===")
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .map(str::to_string)
            .collect();
        let evidence = between(text, "=== EVIDENCE ===", "=== END EVIDENCE ===");
        let mut findings = Vec::new();
        if evidence.contains("invalid argument; use") {
            findings.push("skills were blamed for rejected argument values");
            if !rules.iter().any(|r| r == EXACT_RULE) {
                rules.push(EXACT_RULE.to_string());
            }
        }
        if evidence.contains("precondition failed") {
            findings.push("skills were blamed for failed preconditions");
            if !rules.iter().any(|r| r == ORDER_RULE) {
                rules.push(ORDER_RULE.to_string());
            }
        }
        if rules.is_empty() {
            rules.push(DEFAULT_RULE.to_string());
        }
        rules.truncate(5);
        let analysis = if findings.is_empty() { "no recurring failure".to_string() } else { findings.join("; ") };
        let numbered: Vec<String> = rules.iter().enumerate().map(|(i, r)| format!("{}. {r}", i + 1)).collect();
        format!(
            "## Analysis\n{analysis}\n## Summary\nRules for the {role} role after reviewing {} rows.\n## Rules\n{}\n",
            evidence.lines().filter(|l| l.starts_with("- ")).count(),
            numbered.join("\n")
        )
    }
}

impl Responder for ScriptedMaintainer {
    fn respond(&self, _key: &CallKey, request: &ChatRequest) -> Option<String> {
        let text = request.flat_text();
        Some(match request.role_tag {
            RoleTag::Executor => return None,
            RoleTag::Extractor => Self::extractor(&text),
            RoleTag::Refactorer => Self::refactorer(&text),
            RoleTag::Refiner => Self::refiner(&text),
            RoleTag::Credit => Self::credit(&text),
            RoleTag::BundleVerdict => Self::verdict(&text),
            RoleTag::Meta => Self::meta(&text),
        })
    }
}
