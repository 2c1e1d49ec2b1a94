use serde::{Deserialize, Serialize};

use crate::skill::{Judgment, LifecycleEvent, LifecycleState, SkillRef, UsageStats};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LedgerEntry {
    Credit {
        task: u64,
        skill: SkillRef,
        judgment: Judgment,
        scope_digest: String,
        scope: String,
        rationale: String,
    },
    Usage {
        task: u64,
        skill: SkillRef,
        usage: UsageStats,
    },
    /// `from == None` marks the creation of a version; `gate_passed` is set
    /// whenever a gate decided the move.
    Lifecycle {
        task: u64,
        skill: SkillRef,
        from: Option<LifecycleState>,
        to: LifecycleState,
        event: Option<LifecycleEvent>,
        gate_passed: Option<bool>,
    },
}

impl LedgerEntry {
    pub fn skill(&self) -> &SkillRef {
        match self {
            LedgerEntry::Credit { skill, .. } | LedgerEntry::Usage { skill, .. } | LedgerEntry::Lifecycle { skill, .. } => {
                skill
            }
        }
    }
}

/// One append-only ledger line. Ordinals are dense and start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub ordinal: u64,
    pub entry: LedgerEntry,
}
