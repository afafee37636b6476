use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Notification, StreamItem, System};
use crate::ensemble::{EnsembleState, MemberState, ReducedFrame};
use crate::federator::MachineHealth;
use crate::workloads::ParamVector;
use crate::SimTime;

/// A machine as the federator last saw it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineView {
    pub machine_id: String,
    pub health: MachineHealth,
    /// Time of the status sample the numbers below come from.
    pub sample_time: Option<SimTime>,
    pub total_nodes: u32,
    pub free_nodes: u32,
    pub utilisation: f64,
    pub running: usize,
    pub queued: BTreeMap<String, usize>,
    pub failed_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member_id: String,
    pub state: MemberState,
    pub params: ParamVector,
    pub steps: u64,
    pub restarts: u32,
    pub latest: Option<ReducedFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub ensemble_id: String,
    pub incident_id: String,
    pub region: String,
    pub template_id: String,
    pub state: EnsembleState,
    pub created_at: SimTime,
    pub dropped_frames: u64,
    pub members: Vec<MemberSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    pub kind: Option<String>,
    pub incident_id: Option<String>,
    /// Only notifications with a greater sequence number.
    pub since: Option<u64>,
    pub limit: Option<usize>,
}

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

impl System {
    pub fn machine_views(&self) -> Vec<MachineView> {
        self.federator
            .machines()
            .iter()
            .map(|(id, entry)| {
                let status = entry.status.clone().or_else(|| self.fleet.query_status(id).ok());
                let (total, free, util, running, queued) = match &status {
                    Some(s) => (
                        s.total_nodes,
                        s.free_nodes,
                        s.utilisation(),
                        s.running.len(),
                        s.queued_per_class.iter().map(|q| (q.class.clone(), q.jobs.len())).collect(),
                    ),
                    None => (0, 0, 0.0, 0, BTreeMap::new()),
                };
                MachineView {
                    machine_id: id.clone(),
                    health: entry.health,
                    sample_time: entry.status.as_ref().map(|s| s.sample_time),
                    total_nodes: total,
                    free_nodes: free,
                    utilisation: util,
                    running,
                    queued,
                    failed_at: entry.failed_at,
                }
            })
            .collect()
    }

    pub fn ensemble_summaries(&self) -> Vec<EnsembleSummary> {
        self.ensembles
            .ensembles()
            .map(|e| EnsembleSummary {
                ensemble_id: e.ensemble_id.clone(),
                incident_id: e.incident_id.clone(),
                region: e.region.clone(),
                template_id: e.template_id.clone(),
                state: e.state,
                created_at: e.created_at,
                dropped_frames: e.dropped_frames(),
                members: e
                    .members
                    .iter()
                    .map(|m| MemberSummary {
                        member_id: m.member_id.clone(),
                        state: m.state,
                        params: m.params.clone(),
                        steps: m.steps,
                        restarts: m.restarts,
                        latest: e.telemetry().iter().rev().find(|f| f.member_id == m.member_id).cloned(),
                    })
                    .collect(),
            })
            .collect()
    }

    /// One page of workflow events, each with its stream sequence number.
    pub fn event_page(&self, filter: &EventFilter) -> Vec<&Notification> {
        let limit = filter.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
        let start = self.notifications.partition_point(|n| n.seq <= filter.since.unwrap_or(0));
        self.notifications[start..]
            .iter()
            .filter(|n| match &n.item {
                StreamItem::Event(e) => {
                    filter.kind.as_ref().is_none_or(|k| &e.kind == k) && filter.incident_id.as_ref().is_none_or(|i| &e.incident_id == i)
                }
                _ => false,
            })
            .take(limit)
            .collect()
    }
}
