//! Queue-wait prediction by forward simulation of a status snapshot.
//!
//! The model assumes every job runs for its full walltime estimate and that
//! nothing else arrives. Under those assumptions it reproduces the machine's
//! discipline step for step, including preemption, so the predicted start is
//! exact.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::FederatorError;
use crate::fleet::MachineStatus;
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitPrediction {
    pub machine_id: String,
    pub priority_class: String,
    pub predicted_start: SimTime,
    pub predicted_completion: SimTime,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    nodes: u32,
    walltime: SimTime,
    target: bool,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    rank: usize,
    nodes: u32,
    walltime: SimTime,
    end: SimTime,
    order: u64,
}

struct Model {
    free: u32,
    running: Vec<Active>,
    queues: Vec<VecDeque<Pending>>,
    next_order: u64,
    preempting: Option<usize>,
}

impl Model {
    /// One scheduling pass at time `now`; true once the target has started.
    fn pass(&mut self, now: SimTime) -> bool {
        let mut target_started = false;
        for rank in (0..self.queues.len()).rev() {
            while let Some(head) = self.queues[rank].front().copied() {
                if head.nodes <= self.free {
                    self.queues[rank].pop_front();
                    self.free -= head.nodes;
                    self.running.push(Active { rank, nodes: head.nodes, walltime: head.walltime, end: now + head.walltime, order: self.next_order });
                    self.next_order += 1;
                    target_started |= head.target;
                    continue;
                }
                if self.preempting != Some(rank) || rank == 0 {
                    break;
                }
                // Newest bottom-class runs first until the head fits.
                let mut available = self.free;
                let mut victims = Vec::new();
                for (idx, run) in self.running.iter().enumerate().rev() {
                    if run.rank != 0 {
                        continue;
                    }
                    victims.push(idx);
                    available += run.nodes;
                    if available >= head.nodes {
                        break;
                    }
                }
                if available < head.nodes {
                    break;
                }
                // `victims` holds descending indices: removing in that order keeps the rest valid,
                // and pushing each to the front leaves the oldest victim at the head.
                for idx in victims {
                    let run = self.running.remove(idx);
                    self.free += run.nodes;
                    self.queues[0].push_front(Pending { nodes: run.nodes, walltime: run.walltime, target: false });
                }
            }
        }
        target_started
    }

    fn pop_completion(&mut self) -> Option<SimTime> {
        let idx = (0..self.running.len()).min_by_key(|&i| (self.running[i].end, self.running[i].order))?;
        let run = self.running.remove(idx);
        self.free += run.nodes;
        Some(run.end)
    }
}

/// Predicts when a job would start on the machine described by `status` if
/// appended now to `priority_class`.
pub fn predict_start(
    status: &MachineStatus,
    nodes_requested: u32,
    walltime_estimate: SimTime,
    priority_class: &str,
) -> Result<WaitPrediction, FederatorError> {
    if nodes_requested > status.total_nodes {
        return Err(FederatorError::InfeasibleOnMachine {
            machine_id: status.machine_id.clone(),
            requested: nodes_requested,
            total: status.total_nodes,
        });
    }
    let ranks: Vec<&str> = status.classes().collect();
    let target_rank = ranks.iter().position(|c| *c == priority_class).ok_or_else(|| FederatorError::UnknownClass {
        machine_id: status.machine_id.clone(),
        class: priority_class.to_string(),
    })?;
    let now = status.sample_time;
    let mut model = Model {
        free: status.free_nodes,
        running: status
            .running
            .iter()
            .enumerate()
            .map(|(i, r)| Active {
                rank: ranks.iter().position(|c| *c == r.priority_class).unwrap_or(0),
                nodes: r.nodes,
                walltime: r.walltime_estimate,
                end: now + r.remaining_walltime,
                order: i as u64,
            })
            .collect(),
        queues: status
            .queued_per_class
            .iter()
            .map(|q| q.jobs.iter().map(|j| Pending { nodes: j.nodes, walltime: j.walltime_estimate, target: false }).collect())
            .collect(),
        next_order: status.running.len() as u64,
        preempting: (ranks.len() >= 2).then(|| ranks.len() - 1),
    };
    model.queues[target_rank].push_back(Pending { nodes: nodes_requested, walltime: walltime_estimate, target: true });

    let mut now_t = now;
    let start = loop {
        if model.pass(now_t) {
            break now_t;
        }
        match model.pop_completion() {
            Some(t) => now_t = t,
            // An empty machine always fits a feasible head, so this is unreachable.
            None => unreachable!("feasible job never started on an idle machine"),
        }
    };
    Ok(WaitPrediction {
        machine_id: status.machine_id.clone(),
        priority_class: priority_class.to_string(),
        predicted_start: start,
        predicted_completion: start + walltime_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::{Fleet, MachineSpec, SimJob};

    fn fleet_with(nodes: u32) -> Fleet {
        Fleet::with_machines([MachineSpec::new("m", nodes, 1)]).unwrap()
    }

    /// Actual start time of a probe job submitted to a clone of the fleet.
    fn replay_start(fleet: &Fleet, nodes: u32, walltime: SimTime, class: &str) -> SimTime {
        let mut f = fleet.clone();
        f.submit("m", SimJob::truthful("probe", nodes, walltime, class)).unwrap();
        let mut t = f.now();
        while f.job("m", "probe").unwrap().started_at.is_none() {
            t = f.next_event_time().expect("probe must start eventually");
            f.advance_to(t).unwrap();
        }
        let _ = t;
        f.job("m", "probe").unwrap().started_at.unwrap()
    }

    #[test]
    fn idle_machine_starts_now() {
        let mut fleet = fleet_with(4);
        fleet.advance_to(50).unwrap();
        let p = predict_start(&fleet.query_status("m").unwrap(), 2, 100, "normal").unwrap();
        assert_eq!((p.predicted_start, p.predicted_completion), (50, 150));
    }

    #[test]
    fn waits_for_running_job_unless_preempting() {
        let mut fleet = fleet_with(1);
        fleet.submit("m", SimJob::truthful("busy", 1, 700, "normal")).unwrap();
        fleet.advance_to(100).unwrap();
        let status = fleet.query_status("m").unwrap();
        let normal = predict_start(&status, 1, 50, "normal").unwrap();
        assert_eq!(normal.predicted_start, 100 + 600);
        assert_eq!(normal.predicted_start, replay_start(&fleet, 1, 50, "normal"));
        let urgent = predict_start(&status, 1, 50, "preempt").unwrap();
        assert_eq!(urgent.predicted_start, 100);
        assert_eq!(urgent.predicted_start, replay_start(&fleet, 1, 50, "preempt"));
    }

    #[test]
    fn infeasible_and_unknown_class() {
        let fleet = fleet_with(2);
        let status = fleet.query_status("m").unwrap();
        assert!(matches!(predict_start(&status, 3, 1, "normal"), Err(FederatorError::InfeasibleOnMachine { .. })));
        assert!(matches!(predict_start(&status, 1, 1, "gold"), Err(FederatorError::UnknownClass { .. })));
    }

    #[test]
    fn preempted_jobs_restart_in_model() {
        let mut fleet = fleet_with(2);
        fleet.submit("m", SimJob::truthful("a", 1, 100, "normal")).unwrap();
        fleet.submit("m", SimJob::truthful("b", 1, 100, "normal")).unwrap();
        fleet.submit("m", SimJob::truthful("u1", 2, 30, "preempt")).unwrap();
        fleet.submit("m", SimJob::truthful("q", 2, 10, "normal")).unwrap();
        let status = fleet.query_status("m").unwrap();
        for class in ["normal", "high", "preempt"] {
            for nodes in 1..=2 {
                let p = predict_start(&status, nodes, 40, class).unwrap();
                assert_eq!(p.predicted_start, replay_start(&fleet, nodes, 40, class), "{class}/{nodes}");
            }
        }
    }
}
