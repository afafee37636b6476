use std::fmt;

use serde::{Deserialize, Serialize};

use crate::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Cancelled,
    KilledByFailure,
    Preempted,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Cancelled | JobState::KilledByFailure)
    }

    pub fn is_live(self) -> bool {
        !self.is_terminal()
    }

    pub fn can_transition_to(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Running | Cancelled | KilledByFailure)
                | (Running, Completed | Cancelled | KilledByFailure | Preempted)
                | (Preempted, Queued)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Completed => "completed",
            JobState::Cancelled => "cancelled",
            JobState::KilledByFailure => "killed_by_failure",
            JobState::Preempted => "preempted",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A batch job as seen by one simulated machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: String,
    pub nodes_requested: u32,
    pub walltime_estimate: SimTime,
    /// True runtime. The scheduler never reads it; completion is scheduled at
    /// `min(actual_runtime, walltime_estimate)` after start.
    pub actual_runtime: SimTime,
    pub priority_class: String,
    pub submit_time: SimTime,
    pub state: JobState,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
    /// Per-machine start counter of the current run; orders equal-time starts.
    pub start_order: u64,
    /// Bumped on every start so stale completion events can be ignored.
    pub epoch: u32,
}

impl SimJob {
    pub fn new(
        job_id: impl Into<String>,
        nodes_requested: u32,
        walltime_estimate: SimTime,
        actual_runtime: SimTime,
        priority_class: impl Into<String>,
    ) -> Self {
        Self {
            job_id: job_id.into(),
            nodes_requested,
            walltime_estimate,
            actual_runtime,
            priority_class: priority_class.into(),
            submit_time: 0,
            state: JobState::Queued,
            started_at: None,
            finished_at: None,
            start_order: 0,
            epoch: 0,
        }
    }

    /// Job whose runtime equals its estimate.
    pub fn truthful(job_id: impl Into<String>, nodes: u32, walltime: SimTime, class: impl Into<String>) -> Self {
        Self::new(job_id, nodes, walltime, walltime, class)
    }

    pub fn effective_runtime(&self) -> SimTime {
        self.actual_runtime.min(self.walltime_estimate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use JobState::*;

    #[test]
    fn transition_table() {
        let all = [Queued, Running, Completed, Cancelled, KilledByFailure, Preempted];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(legal.len(), 8);
        assert!(Preempted.can_transition_to(Queued));
        assert!(!Completed.can_transition_to(Running));
        assert!(!Queued.can_transition_to(Completed));
    }

    #[test]
    fn runtime_truncated_to_walltime() {
        assert_eq!(SimJob::new("j", 1, 100, 250, "normal").effective_runtime(), 100);
        assert_eq!(SimJob::new("j", 1, 100, 40, "normal").effective_runtime(), 40);
    }
}
