use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetEvent {
    Completion { machine: String, job: String, epoch: u32 },
    Outage { machine: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduled {
    pub time: SimTime,
    pub seq: u64,
    pub event: FleetEvent,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Simulated time plus the pending event queue. Equal-time events pop in
/// insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimClock {
    now: SimTime,
    next_seq: u64,
    pending: BinaryHeap<Reverse<Scheduled>>,
}

impl SimClock {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, time: SimTime, event: FleetEvent) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Reverse(Scheduled { time, seq, event }));
    }

    pub fn next_time(&self) -> Option<SimTime> {
        self.pending.peek().map(|Reverse(s)| s.time)
    }

    /// Pops the earliest event due at or before `limit` and moves the clock to it.
    pub fn pop_due(&mut self, limit: SimTime) -> Option<Scheduled> {
        if self.next_time()? > limit {
            return None;
        }
        let Reverse(next) = self.pending.pop()?;
        self.now = self.now.max(next.time);
        Some(next)
    }

    pub(crate) fn set_now(&mut self, time: SimTime) {
        debug_assert!(time >= self.now);
        self.now = time;
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_pop_in_insertion_order() {
        let mut clock = SimClock::default();
        for name in ["c", "a", "b"] {
            clock.schedule(5, FleetEvent::Outage { machine: name.into() });
        }
        clock.schedule(1, FleetEvent::Outage { machine: "first".into() });
        let order: Vec<_> = std::iter::from_fn(|| clock.pop_due(10))
            .map(|s| match s.event {
                FleetEvent::Outage { machine } => machine,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, ["first", "c", "a", "b"]);
        assert_eq!(clock.now(), 5);
    }

    #[test]
    fn respects_limit() {
        let mut clock = SimClock::default();
        clock.schedule(7, FleetEvent::Outage { machine: "m".into() });
        assert!(clock.pop_due(6).is_none());
        assert!(clock.pop_due(7).is_some());
    }
}
