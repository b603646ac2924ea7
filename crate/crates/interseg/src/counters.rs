//! Thread-local operation counters (FLOPs, bytes touched).
//!
//! Every numeric kernel records an estimate of its arithmetic work here.
//! Counters are per-thread so instrumented ops stay safe to call
//! concurrently; snapshots are taken on the thread that did the work.

use serde::Serialize;
use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct OpCount {
    pub calls: u64,
    pub flops: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CounterReport {
    pub ops: BTreeMap<&'static str, OpCount>,
}

impl CounterReport {
    pub fn flops(&self, op: &str) -> u64 {
        self.ops.get(op).map(|c| c.flops).unwrap_or(0)
    }

    pub fn total_flops(&self) -> u64 {
        self.ops.values().map(|c| c.flops).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("counter report serializes")
    }
}

thread_local! {
    static COUNTS: RefCell<BTreeMap<&'static str, OpCount>> = RefCell::new(BTreeMap::new());
}

/// Add `flops`/`bytes` to the named op on the current thread.
pub fn record(op: &'static str, flops: u64, bytes: u64) {
    COUNTS.with(|c| {
        let mut map = c.borrow_mut();
        let e = map.entry(op).or_default();
        e.calls += 1;
        e.flops += flops;
        e.bytes += bytes;
    });
}

/// Clear the current thread's counters.
pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

/// Snapshot the current thread's counters.
pub fn snapshot() -> CounterReport {
    COUNTS.with(|c| CounterReport {
        ops: c.borrow().clone(),
    })
}
