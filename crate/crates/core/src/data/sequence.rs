use std::sync::atomic::{AtomicU64, Ordering};

use super::{Interaction, Side};
use crate::error::{Error, Result};

/// A user's chronologically ordered counterparts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    pub owner: usize,
    pub side: Side,
    /// `(counterpart index, timestamp)`, timestamps non-decreasing.
    pub events: Vec<(usize, i64)>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn counterparts(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.0).collect()
    }

    /// Fails if any event is at or after `cutoff`.
    pub fn audit(&self, cutoff: i64) -> Result<()> {
        match self.events.iter().find(|e| e.1 >= cutoff) {
            Some(&(_, t)) => Err(Error::Leakage {
                owner: format!("{} user #{}", self.side, self.owner),
                event: t,
                cutoff,
            }),
            None => Ok(()),
        }
    }
}

/// Counters for the leakage audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuditStats {
    pub sequences: u64,
    pub events: u64,
    pub violations: u64,
}

impl AuditStats {
    pub fn merge(&mut self, other: AuditStats) {
        self.sequences += other.sequences;
        self.events += other.events;
        self.violations += other.violations;
    }
}

#[derive(Debug, Default)]
struct AuditCounters {
    sequences: AtomicU64,
    events: AtomicU64,
    violations: AtomicU64,
}

impl AuditCounters {
    fn snapshot(&self) -> AuditStats {
        AuditStats {
            sequences: self.sequences.load(Ordering::Relaxed),
            events: self.events.load(Ordering::Relaxed),
            violations: self.violations.load(Ordering::Relaxed),
        }
    }
}

/// Immutable per-user event lists for both sides. Safe to share across
/// threads; the audit counters are atomic.
#[derive(Debug)]
pub struct SequenceStore {
    u_events: Vec<Vec<(usize, i64)>>,
    v_events: Vec<Vec<(usize, i64)>>,
    audit: AuditCounters,
}

impl Clone for SequenceStore {
    fn clone(&self) -> Self {
        SequenceStore {
            u_events: self.u_events.clone(),
            v_events: self.v_events.clone(),
            audit: AuditCounters::default(),
        }
    }
}

impl SequenceStore {
    pub fn new(num_u: usize, num_v: usize, interactions: &[Interaction]) -> Self {
        let mut u_events = vec![Vec::new(); num_u];
        let mut v_events = vec![Vec::new(); num_v];
        for i in interactions {
            u_events[i.u].push((i.v, i.timestamp));
            v_events[i.v].push((i.u, i.timestamp));
        }
        for list in u_events.iter_mut().chain(v_events.iter_mut()) {
            list.sort_by_key(|&(c, t)| (t, c));
        }
        SequenceStore {
            u_events,
            v_events,
            audit: AuditCounters::default(),
        }
    }

    fn events(&self, side: Side) -> &[Vec<(usize, i64)>] {
        match side {
            Side::U => &self.u_events,
            Side::V => &self.v_events,
        }
    }

    pub fn num_users(&self, side: Side) -> usize {
        self.events(side).len()
    }

    pub fn full_history(&self, side: Side, owner: usize) -> Result<&[(usize, i64)]> {
        self.events(side)
            .get(owner)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownUser {
                side: side.to_string(),
                id: format!("#{owner}"),
            })
    }

    /// Number of events strictly before `cutoff`.
    pub fn count_before(&self, side: Side, owner: usize, cutoff: i64) -> Result<usize> {
        let h = self.full_history(side, owner)?;
        Ok(h.partition_point(|e| e.1 < cutoff))
    }

    /// Events with timestamp strictly below `cutoff`, keeping at most the
    /// `max_len` most recent ones. The result is audited before returning.
    pub fn build_truncated_sequence(
        &self,
        side: Side,
        owner: usize,
        cutoff: i64,
        max_len: usize,
    ) -> Result<BehaviorSequence> {
        let h = self.full_history(side, owner)?;
        let end = h.partition_point(|e| e.1 < cutoff);
        let start = end.saturating_sub(max_len);
        let seq = BehaviorSequence {
            owner,
            side,
            events: h[start..end].to_vec(),
        };
        self.record_audit(&seq, cutoff)?;
        Ok(seq)
    }

    fn record_audit(&self, seq: &BehaviorSequence, cutoff: i64) -> Result<()> {
        self.audit.sequences.fetch_add(1, Ordering::Relaxed);
        self.audit.events.fetch_add(seq.len() as u64, Ordering::Relaxed);
        let res = seq.audit(cutoff);
        if res.is_err() {
            self.audit.violations.fetch_add(1, Ordering::Relaxed);
        }
        res
    }

    /// Audit counters accumulated since construction or the last reset.
    pub fn audit_stats(&self) -> AuditStats {
        self.audit.snapshot()
    }

    pub fn reset_audit(&self) {
        self.audit.sequences.store(0, Ordering::Relaxed);
        self.audit.events.store(0, Ordering::Relaxed);
        self.audit.violations.store(0, Ordering::Relaxed);
    }
}
