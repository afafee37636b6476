//! The boundary between the federator and whatever runs jobs.

use serde::{Deserialize, Serialize};

use super::{CancelAck, FleetError, JobState, MachineStatus, SimJob};
use crate::SimTime;

/// What a connector reports about one submitted job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub state: JobState,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
}

/// Operations a federator needs from a batch system. The fleet simulator
/// implements it; adapters for real schedulers would too.
pub trait MachineConnector {
    fn now(&self) -> SimTime;
    fn submit(&mut self, machine_id: &str, job: SimJob) -> Result<String, FleetError>;
    fn cancel(&mut self, machine_id: &str, job_id: &str) -> Result<CancelAck, FleetError>;
    fn query_status(&self, machine_id: &str) -> Result<MachineStatus, FleetError>;
    fn job_progress(&self, machine_id: &str, job_id: &str) -> Result<JobProgress, FleetError>;
}
