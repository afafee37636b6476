use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::workloads::{ParamValue, ParamVector};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteeringTarget {
    Member { member_id: String },
    /// Members whose parameter `param` currently equals `equals`.
    Where { param: String, equals: ParamValue },
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringMessage {
    pub message_id: String,
    pub ensemble_id: String,
    pub target: SteeringTarget,
    pub payload: ParamVector,
    pub issued_at: SimTime,
}

impl SteeringMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    /// Per-member delivery sequence, dense from 0 in issue order.
    pub seq: u64,
    pub message: SteeringMessage,
}

/// Sender side of one member's channel. Keeps every delivery until the
/// member acknowledges it, so they can be resent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outbox {
    next_seq: u64,
    unacked: Vec<Delivery>,
}

impl Outbox {
    pub fn push(&mut self, message: SteeringMessage) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.unacked.push(Delivery { seq, message });
        seq
    }

    pub fn unacked(&self) -> &[Delivery] {
        &self.unacked
    }

    /// Drops deliveries below `next_expected`.
    pub fn ack(&mut self, next_expected: u64) {
        self.unacked.retain(|d| d.seq >= next_expected);
    }

    pub fn issued(&self) -> u64 {
        self.next_seq
    }
}

/// Receiver side. Applies deliveries in sequence order only, and each
/// message id at most once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inbox {
    next_seq: u64,
    held: BTreeMap<u64, SteeringMessage>,
    applied: BTreeSet<String>,
}

impl Inbox {
    pub fn receive(&mut self, delivery: Delivery) {
        if delivery.seq >= self.next_seq {
            self.held.entry(delivery.seq).or_insert(delivery.message);
        }
    }

    /// Messages ready to apply now, in issue order.
    pub fn take_ready(&mut self) -> Vec<SteeringMessage> {
        let mut out = Vec::new();
        while let Some(msg) = self.held.remove(&self.next_seq) {
            self.next_seq += 1;
            if self.applied.insert(msg.message_id.clone()) {
                out.push(msg);
            }
        }
        out
    }

    pub fn next_expected(&self) -> u64 {
        self.next_seq
    }

    pub fn has_applied(&self, message_id: &str) -> bool {
        self.applied.contains(message_id)
    }
}
