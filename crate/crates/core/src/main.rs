use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use skillmeta::deskworld::{self, DeskworldTask, TaskSuite};
use skillmeta::harness::{self, install_rules};
use skillmeta::oracle::{CallLog, ChatBackend, RemoteBackend, RemoteConfig, ScriptedBackend};
use skillmeta::roles::{export_rules, import_rules};
use skillmeta::store::CALL_LOG_FILE;
use skillmeta::{LifecycleState, Oracle, Repository, RunConfig, SkillId};

#[derive(Parser)]
#[command(name = "skillmeta", version, about = "Maintain a skill repository for a frozen tool-using executor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    /// Deterministic deskworld executor and maintainer.
    Scripted,
    /// Chat-completions endpoint from SKILLMETA_ENDPOINT / SKILLMETA_API_KEY / SKILLMETA_MODEL.
    Remote,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: Backend,
    /// Answer every call from a recorded call log instead.
    #[arg(long)]
    replay_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop over a task file, creating the repository if needed.
    Train {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Run configuration (JSON) for a new repository.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Keep skill maintenance but never update meta rules.
        #[arg(long = "static")]
        static_mode: bool,
        /// Keep the current meta rules fixed.
        #[arg(long)]
        freeze_meta: bool,
        /// Install rules from a meta-export file before training.
        #[arg(long)]
        init_meta: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// Frozen evaluation of the active skills on a task file.
    Eval {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Also run the no-skill baseline and report the difference.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// Summarize a repository, or one skill with --skill.
    Inspect {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        skill: Option<String>,
    },
    /// Print the learned meta rules in the import format.
    MetaExport {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deskworld task suites.
    Deskworld {
        #[command(subcommand)]
        command: DeskworldCommand,
    },
}

#[derive(Subcommand)]
enum DeskworldCommand {
    /// Write train.json and heldout.json.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        families: usize,
        #[arg(long, default_value_t = 50)]
        per_split: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_tasks(path: &Path) -> Result<Vec<DeskworldTask>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TaskSuite::from_json(&text).with_context(|| format!("parsing {}", path.display()))?.tasks)
}

fn build_oracle(args: &OracleArgs, tasks: &[DeskworldTask], retry_budget: u32) -> Result<Oracle> {
    let backend: Arc<dyn ChatBackend> = if let Some(path) = &args.replay_log {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Arc::new(ScriptedBackend::from_call_log(&CallLog::from_jsonl(&text)?))
    } else {
        match args.backend {
            Backend::Scripted => Arc::new(deskworld::scripted_backend(tasks.iter().cloned())),
            Backend::Remote => {
                let config = RemoteConfig::from_env().context("SKILLMETA_ENDPOINT is not set")?;
                Arc::new(RemoteBackend::with_reqwest(config)?)
            }
        }
    };
    Ok(Oracle::new(backend, retry_budget))
}

fn open_repo(dir: &Path, config: Option<&Path>) -> Result<Repository> {
    if dir.join("manifest").exists() {
        return Ok(Repository::restore(dir)?);
    }
    let config = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(Repository::new(config))
}

fn append_calls(dir: &Path, log: &CallLog) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(CALL_LOG_FILE))?;
    f.write_all(log.to_jsonl().as_bytes())?;
    Ok(())
}

/// Writes to stdout; a reader that went away early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn state_name(s: LifecycleState) -> &'static str {
    match s {
        LifecycleState::Trial => "trial",
        LifecycleState::Active => "active",
        LifecycleState::Disabled => "disabled",
        LifecycleState::Archived => "archived",
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { repo: dir, tasks, config, static_mode, freeze_meta, init_meta, parallelism, oracle } => {
            let tasks = load_tasks(&tasks)?;
            let mut repo = open_repo(&dir, config.as_deref())?;
            let mut cfg = repo.config().clone();
            cfg.static_mode |= static_mode;
            cfg.freeze_meta |= freeze_meta;
            if let Some(p) = parallelism {
                cfg.parallelism = p;
            }
            if cfg.retrieval.validate().is_err() {
                bail!("retrieval weights must be non-negative and sum to 1");
            }
            repo.set_config(cfg.clone());
            if let Some(path) = init_meta {
                let rules = import_rules(&fs::read_to_string(&path)?)?;
                install_rules(&mut repo, &rules);
            }
            let oracle = build_oracle(&oracle, &tasks, cfg.retry_budget)?;
            let report = harness::run_training(&mut repo, &tasks, &oracle);
            repo.persist(&dir)?;
            append_calls(&dir, &report.calls)?;
            let summary = json!({
                "tasks": report.tasks.len(),
                "mean_utility": report.mean_utility(),
                "published": report.published,
                "gate_rejected": report.gate_rejected,
                "promoted": report.promoted,
                "disabled": report.disabled,
                "refined": report.refined,
                "refactored": report.refactored,
                "meta_attempts": report.meta_attempts,
                "meta_updates": report.meta_updates,
                "checksum": repo.checksum(),
            });
            emit(&format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
        }
        Command::Eval { repo: dir, tasks, baseline, oracle } => {
            let tasks = load_tasks(&tasks)?;
            let repo = Repository::restore(&dir)?;
            let cfg = repo.config().clone();
            let oracle = build_oracle(&oracle, &tasks, cfg.retry_budget)?;
            let report = harness::evaluate(&repo.snapshot(), &tasks, &oracle, &cfg);
            let mut summary = json!({
                "tasks": report.records.len(),
                "mean_utility": report.mean_utility(),
                "mean_tokens": report.mean_tokens(),
                "records": report.records,
            });
            if baseline {
                let base = harness::evaluate(&Default::default(), &tasks, &oracle, &cfg);
                summary["baseline_mean_utility"] = json!(base.mean_utility());
                summary["baseline_mean_tokens"] = json!(base.mean_tokens());
                summary["delta"] = json!(report.mean_utility() - base.mean_utility());
            }
            emit(&format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
        }
        Command::Inspect { repo: dir, skill } => {
            let repo = Repository::restore(&dir)?;
            if let Some(id) = skill {
                let id = SkillId::new(id);
                let versions: Vec<_> = repo
                    .versions(&id)
                    .map(|v| {
                        let r = v.skill.skill_ref();
                        json!({
                            "skill": v.skill,
                            "state": state_name(v.state),
                            "release_gate": v.release_gate,
                            "bundle": v.bundle,
                            "credit": repo.credit_table().get(&r),
                            "usage": repo.usage(&r),
                        })
                    })
                    .collect();
                if versions.is_empty() {
                    bail!("no skill {id}");
                }
                emit(&format!("{}\n", serde_json::to_string_pretty(&versions)?))?;
            } else {
                let mut states = serde_json::Map::new();
                for s in LifecycleState::ALL {
                    states.insert(state_name(s).into(), json!(repo.in_state(s).len()));
                }
                let skills: Vec<_> = repo
                    .all_versions()
                    .map(|v| format!("{} [{}] {}", v.skill.skill_ref(), state_name(v.state), v.skill.name))
                    .collect();
                let summary = json!({
                    "tasks_seen": repo.tasks_seen(),
                    "versions": states,
                    "ledger_entries": repo.ledger().len(),
                    "meta": repo.meta_sets().values().map(|m| (m.role.as_str(), m.rules.clone())).collect::<std::collections::BTreeMap<_, _>>(),
                    "skills": skills,
                    "audit_violations": repo.audit_release().violations,
                    "checksum": repo.checksum(),
                });
                emit(&format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
            }
        }
        Command::MetaExport { repo: dir, out } => {
            let repo = Repository::restore(&dir)?;
            let text = export_rules(repo.meta_sets());
            match out {
                Some(p) => fs::write(p, text)?,
                None => emit(&text)?,
            }
        }
        Command::Deskworld { command: DeskworldCommand::Generate { out, families, per_split, seed } } => {
            let (train, heldout) = deskworld::generate(families, per_split, seed);
            fs::create_dir_all(&out)?;
            fs::write(out.join("train.json"), train.to_json())?;
            fs::write(out.join("heldout.json"), heldout.to_json())?;
            emit(&format!("{}\n", out.display()))?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
