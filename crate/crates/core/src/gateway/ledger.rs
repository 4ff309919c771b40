use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::RoleTag;

/// API-call counters shared by every request of a run.
#[derive(Debug, Default)]
pub struct RunLedger {
    inner: Mutex<LedgerSnapshot>,
}

/// Point-in-time copy of the ledger. Maps are ordered so serialized
/// snapshots are stable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub calls_by_role: BTreeMap<RoleTag, u64>,
    pub calls_by_phase: BTreeMap<String, u64>,
    /// Keyed `"<role>/<phase>"`.
    pub calls_by_cell: BTreeMap<String, u64>,
    pub retries: u64,
    pub failures: u64,
}

impl LedgerSnapshot {
    pub fn total_calls(&self) -> u64 {
        self.calls_by_role.values().sum()
    }

    pub fn role(&self, role: RoleTag) -> u64 {
        self.calls_by_role.get(&role).copied().unwrap_or(0)
    }

    pub fn phase(&self, phase: &str) -> u64 {
        self.calls_by_phase.get(phase).copied().unwrap_or(0)
    }
}

impl RunLedger {
    pub(super) fn record_call(&self, role: RoleTag, phase: &str, failed: bool) {
        let mut s = self.inner.lock().expect("ledger poisoned");
        *s.calls_by_role.entry(role).or_default() += 1;
        *s.calls_by_phase.entry(phase.to_string()).or_default() += 1;
        *s.calls_by_cell.entry(format!("{role}/{phase}")).or_default() += 1;
        if failed {
            s.failures += 1;
        }
    }

    pub(super) fn record_retry(&self) {
        self.inner.lock().expect("ledger poisoned").retries += 1;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.inner.lock().expect("ledger poisoned").clone()
    }
}
