use serde::{Deserialize, Serialize};

use crate::fleet::JobState;
use crate::SimTime;

/// A unit of federated work as submitted by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub request_id: String,
    pub nodes_requested: u32,
    pub walltime_estimate: SimTime,
    /// Absolute time by which the job should have completed.
    pub deadline: SimTime,
    pub max_priority_allowed: String,
    #[serde(default = "one")]
    pub speculation_factor: u32,
    pub owning_incident_id: String,
    /// How long the job really runs in the simulator. Never used for decisions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_runtime: Option<SimTime>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementState {
    Queued,
    Running,
    Completed,
    Cancelled,
    /// Killed by an outage or lost with a failed machine.
    Dead,
}

impl PlacementState {
    pub fn is_live(self) -> bool {
        matches!(self, PlacementState::Queued | PlacementState::Running)
    }

    pub(crate) fn from_job(state: JobState) -> Self {
        match state {
            JobState::Queued | JobState::Preempted => PlacementState::Queued,
            JobState::Running => PlacementState::Running,
            JobState::Completed => PlacementState::Completed,
            JobState::Cancelled => PlacementState::Cancelled,
            JobState::KilledByFailure => PlacementState::Dead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub machine_id: String,
    pub machine_job_id: String,
    pub priority_class: String,
    pub state: PlacementState,
    pub cost: f64,
    pub submitted_at: SimTime,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FederatedState {
    Pending,
    Placed,
    Running,
    Completed,
    FailedRescheduling,
    Abandoned,
}

impl FederatedState {
    pub fn is_terminal(self) -> bool {
        matches!(self, FederatedState::Completed | FederatedState::FailedRescheduling | FederatedState::Abandoned)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub request: JobRequest,
    pub placements: Vec<Placement>,
    /// Index of the speculation winner, once one has started.
    pub chosen_placement: Option<usize>,
    pub federated_state: FederatedState,
    pub deadline_at_risk: bool,
    pub submitted_at: SimTime,
    pub completed_at: Option<SimTime>,
}

impl JobRecord {
    pub fn request_id(&self) -> &str {
        &self.request.request_id
    }

    pub fn live_placements(&self) -> impl Iterator<Item = (usize, &Placement)> {
        self.placements.iter().enumerate().filter(|(_, p)| p.state.is_live())
    }

    pub fn has_live_placement(&self) -> bool {
        self.live_placements().next().is_some()
    }

    pub fn completed_placements(&self) -> usize {
        self.placements.iter().filter(|p| p.state == PlacementState::Completed).count()
    }

    /// The placement currently doing the work, if any.
    pub fn active_placement(&self) -> Option<&Placement> {
        self.chosen_placement.map(|i| &self.placements[i]).filter(|p| p.state.is_live())
    }
}
