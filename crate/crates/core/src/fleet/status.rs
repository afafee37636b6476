use serde::{Deserialize, Serialize};

use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunningEntry {
    pub job_id: String,
    pub nodes: u32,
    pub remaining_walltime: SimTime,
    pub walltime_estimate: SimTime,
    pub priority_class: String,
    pub started_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedEntry {
    pub job_id: String,
    pub nodes: u32,
    pub walltime_estimate: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassQueue {
    pub class: String,
    /// Submission order, head first.
    pub jobs: Vec<QueuedEntry>,
}

/// Point-in-time view of one machine.
///
/// `running` is in start order, oldest first. `queued_per_class` follows the
/// machine's priority ladder from lowest to highest class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineStatus {
    pub machine_id: String,
    pub sample_time: SimTime,
    pub total_nodes: u32,
    pub free_nodes: u32,
    pub running: Vec<RunningEntry>,
    pub queued_per_class: Vec<ClassQueue>,
    pub healthy: bool,
}

impl MachineStatus {
    pub fn queued_count(&self) -> usize {
        self.queued_per_class.iter().map(|q| q.jobs.len()).sum()
    }

    pub fn busy_nodes(&self) -> u32 {
        self.running.iter().map(|r| r.nodes).sum()
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.queued_per_class.iter().map(|q| q.class.as_str())
    }

    pub fn utilisation(&self) -> f64 {
        f64::from(self.busy_nodes()) / f64::from(self.total_nodes.max(1))
    }
}
