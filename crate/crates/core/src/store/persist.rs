//! On-disk layout. Every file ends with a `#sha256:<hex>` trailer over the
//! bytes before it; a missing or mismatched trailer means corruption.
//!
//! ```text
//! config                     run configuration (JSON)
//! manifest                   counters (JSON)
//! skills/<id>/v<N>.skill     one skill version with state and release gate
//! bundles/<id>/v<N>.bundle   test bundle of that version
//! credit.ledger              append-only evidence ledger, one JSON record per line
//! buffers/<role>.buffer      replay rows, one JSON object per line
//! meta/<role>.rules          numbered rules with an updated-at header
//! graph.snapshot             overlap graph nodes and adjacency lists
//! calls.log                  oracle call log; not part of the checksum
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Counters, LedgerEntry, LedgerRecord, Repository, SkillVersion, StoreError};
use crate::config::RunConfig;
use crate::graph::OverlapGraph;
use crate::maintenance::{CreditTable, GateResult};
use crate::roles::{ReplayBuffer, ReplayRow};
use crate::skill::{LifecycleState, MetaRuleSet, Role, Skill, TestBundle};
use crate::text::sha256_hex;

pub const CALL_LOG_FILE: &str = "calls.log";
const TRAILER: &str = "#sha256:";
const FORMAT: u32 = 1;

pub fn with_trailer(body: &str) -> String {
    format!("{body}{TRAILER}{}\n", sha256_hex(body.as_bytes()))
}

/// Body of a trailered file, or `None` when the trailer is missing or does
/// not match.
pub fn read_checked(content: &str) -> Option<&str> {
    let trimmed = content.strip_suffix('\n')?;
    let cut = trimmed.rfind(TRAILER)?;
    if cut != 0 && !trimmed[..cut].ends_with('\n') {
        return None;
    }
    let body = &content[..cut];
    (trimmed[cut + TRAILER.len()..] == sha256_hex(body.as_bytes())).then_some(body)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    counters: Counters,
}

#[derive(Serialize, Deserialize)]
struct SkillFile {
    skill: Skill,
    state: LifecycleState,
    release_gate: GateResult,
    gated_cases: usize,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("repository types serialize")
}

fn json_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&json(&item));
        out.push('\n');
    }
    out
}

fn rules_text(set: &MetaRuleSet) -> String {
    let mut out = format!("# role: {}\n# updated_at_task: {}\n", set.role.as_str(), set.updated_at_task);
    for (i, r) in set.rules.iter().enumerate() {
        out.push_str(&format!("{}. {r}\n", i + 1));
    }
    out
}

fn parse_rules(role: Role, body: &str) -> Result<MetaRuleSet, String> {
    let mut set = MetaRuleSet::empty(role);
    for line in body.lines() {
        if let Some(v) = line.strip_prefix("# updated_at_task: ") {
            set.updated_at_task = v.trim().parse().map_err(|_| format!("bad updated_at_task {v:?}"))?;
        } else if line.starts_with('#') || line.trim().is_empty() {
            continue;
        } else {
            let (n, rule) = line.split_once(". ").ok_or_else(|| format!("bad rule line {line:?}"))?;
            if n.parse::<usize>().ok() != Some(set.rules.len() + 1) {
                return Err(format!("rule numbering broken at {line:?}"));
            }
            set.rules.push(rule.to_string());
        }
    }
    Ok(set)
}

pub(super) fn render_files(repo: &Repository) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    let mut put = |path: String, body: String| {
        files.insert(path, with_trailer(&body));
    };
    put("config".into(), format!("{}\n", json(&repo.config)));
    put("manifest".into(), format!("{}\n", json(&Manifest { format: FORMAT, counters: repo.counters })));
    for (id, versions) in &repo.skills {
        for (n, v) in versions {
            let file = SkillFile {
                skill: v.skill.clone(),
                state: v.state,
                release_gate: v.release_gate.clone(),
                gated_cases: v.gated_cases,
            };
            put(format!("skills/{id}/v{n}.skill"), format!("{}\n", json(&file)));
            put(format!("bundles/{id}/v{n}.bundle"), format!("{}\n", json(&v.bundle)));
        }
    }
    put("credit.ledger".into(), json_lines(&repo.ledger));
    for (role, buf) in &repo.buffers {
        put(format!("buffers/{}.buffer", role.as_str()), json_lines(buf.rows()));
    }
    for (role, set) in &repo.meta {
        put(format!("meta/{}.rules", role.as_str()), rules_text(set));
    }
    put("graph.snapshot".into(), format!("{}\n", repo.graph.to_snapshot()));
    files
}

pub(super) fn write_dir(repo: &Repository, dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir)?;
    let files = render_files(repo);
    for sub in ["skills", "bundles", "buffers", "meta"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p)?;
        }
    }
    for (rel, content) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, content)?;
        fs::rename(&tmp, &path)?;
    }
    Ok(())
}

fn corrupt(what: impl Into<String>) -> StoreError {
    StoreError::CorruptRepository(what.into())
}

fn load(dir: &Path, rel: &str) -> Result<String, StoreError> {
    let path = dir.join(rel);
    let content = fs::read_to_string(&path).map_err(|e| corrupt(format!("{rel}: {e}")))?;
    read_checked(&content)
        .map(str::to_string)
        .ok_or_else(|| corrupt(format!("{rel}: checksum trailer missing or wrong")))
}

fn parse_json<T: for<'de> Deserialize<'de>>(rel: &str, body: &str) -> Result<T, StoreError> {
    serde_json::from_str(body.trim_end()).map_err(|e| corrupt(format!("{rel}: {e}")))
}

fn parse_lines<T: for<'de> Deserialize<'de>>(rel: &str, body: &str) -> Result<Vec<T>, StoreError> {
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| corrupt(format!("{rel}: {e}"))))
        .collect()
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>, StoreError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<_> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

pub(super) fn read_dir(dir: &Path) -> Result<Repository, StoreError> {
    if !dir.is_dir() {
        return Err(corrupt(format!("{} is not a repository directory", dir.display())));
    }
    let config: RunConfig = parse_json("config", &load(dir, "config")?)?;
    let manifest: Manifest = parse_json("manifest", &load(dir, "manifest")?)?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("manifest: unsupported format {}", manifest.format)));
    }
    let mut repo = Repository::new(config);
    repo.counters = manifest.counters;

    for skill_dir in sorted_entries(&dir.join("skills"))? {
        let id = skill_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        for path in sorted_entries(&skill_dir)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Some(n) = name.strip_prefix('v').and_then(|r| r.strip_suffix(".skill")) else { continue };
            let rel = format!("skills/{id}/{name}");
            let file: SkillFile = parse_json(&rel, &load(dir, &rel)?)?;
            let version: u32 = n.parse().map_err(|_| corrupt(format!("{rel}: bad version")))?;
            if file.skill.id.as_str() != id || file.skill.version != version {
                return Err(corrupt(format!("{rel}: skill identity does not match its path")));
            }
            let brel = format!("bundles/{id}/v{version}.bundle");
            let bundle: TestBundle = parse_json(&brel, &load(dir, &brel)?)?;
            if bundle.target != file.skill.skill_ref() {
                return Err(corrupt(format!("{brel}: bundle targets {}", bundle.target)));
            }
            repo.skills.entry(file.skill.id.clone()).or_default().insert(
                version,
                SkillVersion {
                    skill: file.skill,
                    state: file.state,
                    release_gate: file.release_gate,
                    bundle,
                    gated_cases: file.gated_cases,
                },
            );
        }
    }

    let ledger: Vec<LedgerRecord> = parse_lines("credit.ledger", &load(dir, "credit.ledger")?)?;
    for (i, rec) in ledger.iter().enumerate() {
        if rec.ordinal != i as u64 + 1 {
            return Err(corrupt(format!("credit.ledger: ordinal {} out of sequence", rec.ordinal)));
        }
    }
    let mut credit = CreditTable::default();
    for rec in &ledger {
        match &rec.entry {
            LedgerEntry::Credit { skill, judgment, .. } => {
                credit.record(&crate::skill::CreditEvent {
                    skill: skill.clone(),
                    task_id: 0,
                    judgment: *judgment,
                    rationale: String::new(),
                    attribution_scope: String::new(),
                });
            }
            LedgerEntry::Usage { skill, usage, .. } => repo.usage.entry(skill.clone()).or_default().add(*usage),
            LedgerEntry::Lifecycle { .. } => {}
        }
    }
    repo.credit = credit;
    repo.ledger = ledger;

    for role in Role::ALL {
        let rel = format!("buffers/{}.buffer", role.as_str());
        let rows: Vec<ReplayRow> = parse_lines(&rel, &load(dir, &rel)?)?;
        let mut buf = ReplayBuffer::new(role);
        for row in rows {
            buf.insert(row);
        }
        repo.buffers.insert(role, buf);
        let rel = format!("meta/{}.rules", role.as_str());
        let set = parse_rules(role, &load(dir, &rel)?).map_err(|e| corrupt(format!("{rel}: {e}")))?;
        repo.meta.insert(role, set);
    }
    let graph = load(dir, "graph.snapshot")?;
    repo.graph = OverlapGraph::from_snapshot(graph.trim_end()).map_err(|e| corrupt(format!("graph.snapshot: {e}")))?;
    Ok(repo)
}
