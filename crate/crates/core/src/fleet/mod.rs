//! Deterministic discrete-event simulation of a fleet of batch-scheduled
//! HPC machines.
//!
//! Each machine runs strict per-class FIFO with no backfill. Classes are
//! served from the highest down; a blocked head stops its own class but lower
//! classes may still start jobs that fit. The top class preempts the
//! most-recently-started jobs of the bottom class when that frees enough
//! nodes. Preempted jobs go back to the head of their queue and restart from
//! scratch.

mod clock;
mod connector;
mod job;
mod spec;
mod status;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{FleetEvent, Scheduled, SimClock};
pub use connector::{JobProgress, MachineConnector};
pub use job::{JobState, SimJob};
pub use spec::{default_priority_classes, FailureKind, FleetScenario, MachineSpec, QueuePolicy, ScheduledFailure};
pub use status::{ClassQueue, MachineStatus, QueuedEntry, RunningEntry};

use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum FleetError {
    #[error("unknown machine {0:?}")]
    UnknownMachine(String),
    #[error("machine {0:?} is down")]
    MachineDown(String),
    #[error("job {job_id:?} requests {requested} nodes but machine has {total}")]
    InfeasibleRequest { job_id: String, requested: u32, total: u32 },
    #[error("unknown job {job_id:?} on machine {machine_id:?}")]
    UnknownJob { machine_id: String, job_id: String },
    #[error("job {0:?} already exists on this machine")]
    DuplicateJob(String),
    #[error("priority class {0:?} is not offered by this machine")]
    UnknownClass(String),
    #[error("invalid job {job_id:?}: {reason}")]
    InvalidJob { job_id: String, reason: String },
    #[error("cannot move time backwards from {now} to {requested}")]
    TimeReversal { now: SimTime, requested: SimTime },
    #[error("machine {0:?} already registered")]
    DuplicateMachine(String),
    #[error("invalid machine spec: {0}")]
    InvalidSpec(String),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Result of a cancel request. Cancelling a finished job is acknowledged, not
/// an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancelAck {
    Cancelled,
    AlreadyTerminal(JobState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetTransition {
    Queued,
    Running,
    Completed,
    Cancelled,
    KilledByFailure,
    Preempted,
    Outage,
    Restored,
}

impl FleetTransition {
    pub fn as_str(self) -> &'static str {
        match self {
            FleetTransition::Queued => "queued",
            FleetTransition::Running => "running",
            FleetTransition::Completed => "completed",
            FleetTransition::Cancelled => "cancelled",
            FleetTransition::KilledByFailure => "killed_by_failure",
            FleetTransition::Preempted => "preempted",
            FleetTransition::Outage => "outage",
            FleetTransition::Restored => "restored",
        }
    }
}

/// One line of the fleet event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetRecord {
    pub time: SimTime,
    pub machine: String,
    /// `None` for machine-level transitions.
    pub job: Option<String>,
    pub transition: FleetTransition,
}

impl fmt::Display for FleetRecord {
    /// `time<TAB>machine<TAB>job<TAB>transition`, with `-` for machine-level lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.time,
            self.machine,
            self.job.as_deref().unwrap_or("-"),
            self.transition.as_str()
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Machine {
    spec: MachineSpec,
    healthy: bool,
    free_nodes: u32,
    jobs: BTreeMap<String, SimJob>,
    /// One FIFO per priority rank.
    queues: Vec<VecDeque<String>>,
    /// Running job ids in start order.
    running: Vec<String>,
    next_start_order: u64,
    /// Snapshot taken at the moment of the last outage.
    last_status: Option<MachineStatus>,
}

impl Machine {
    fn new(spec: MachineSpec) -> Self {
        Self {
            free_nodes: spec.total_nodes,
            queues: vec![VecDeque::new(); spec.priority_classes.len()],
            spec,
            healthy: true,
            jobs: BTreeMap::new(),
            running: Vec::new(),
            next_start_order: 0,
            last_status: None,
        }
    }

    fn status(&self, now: SimTime) -> MachineStatus {
        if !self.healthy {
            if let Some(last) = &self.last_status {
                return MachineStatus { healthy: false, ..last.clone() };
            }
        }
        let running = self
            .running
            .iter()
            .map(|id| {
                let job = &self.jobs[id];
                let started = job.started_at.unwrap_or(now);
                RunningEntry {
                    job_id: id.clone(),
                    nodes: job.nodes_requested,
                    remaining_walltime: (started + job.walltime_estimate).saturating_sub(now),
                    walltime_estimate: job.walltime_estimate,
                    priority_class: job.priority_class.clone(),
                    started_at: started,
                }
            })
            .collect();
        let queued_per_class = self
            .spec
            .priority_classes
            .iter()
            .zip(&self.queues)
            .map(|(class, queue)| ClassQueue {
                class: class.clone(),
                jobs: queue
                    .iter()
                    .map(|id| {
                        let job = &self.jobs[id];
                        QueuedEntry {
                            job_id: id.clone(),
                            nodes: job.nodes_requested,
                            walltime_estimate: job.walltime_estimate,
                        }
                    })
                    .collect(),
            })
            .collect();
        MachineStatus {
            machine_id: self.spec.machine_id.clone(),
            sample_time: now,
            total_nodes: self.spec.total_nodes,
            free_nodes: self.free_nodes,
            running,
            queued_per_class,
            healthy: self.healthy,
        }
    }

    fn set_state(&mut self, job_id: &str, next: JobState) {
        let job = self.jobs.get_mut(job_id).expect("job tracked by machine");
        debug_assert!(job.state.can_transition_to(next), "{} -> {next}", job.state);
        job.state = next;
    }
}

struct Emitter<'a> {
    log: &'a mut Vec<FleetRecord>,
    out: &'a mut Vec<FleetRecord>,
}

impl Emitter<'_> {
    fn emit(&mut self, time: SimTime, machine: &str, job: Option<&str>, transition: FleetTransition) {
        let record = FleetRecord { time, machine: machine.to_string(), job: job.map(str::to_string), transition };
        self.log.push(record.clone());
        self.out.push(record);
    }
}

/// The simulated fleet.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Fleet {
    clock: SimClock,
    machines: BTreeMap<String, Machine>,
    log: Vec<FleetRecord>,
}

impl Fleet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_machines(specs: impl IntoIterator<Item = MachineSpec>) -> Result<Self, FleetError> {
        let mut fleet = Self::new();
        for spec in specs {
            fleet.add_machine(spec)?;
        }
        Ok(fleet)
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn add_machine(&mut self, spec: MachineSpec) -> Result<(), FleetError> {
        spec.validate()?;
        if self.machines.contains_key(&spec.machine_id) {
            return Err(FleetError::DuplicateMachine(spec.machine_id.clone()));
        }
        for failure in &spec.failure_schedule {
            let FailureKind::FullOutage = failure.kind;
            self.clock.schedule(failure.time.max(self.now()), FleetEvent::Outage { machine: spec.machine_id.clone() });
        }
        self.machines.insert(spec.machine_id.clone(), Machine::new(spec));
        Ok(())
    }

    pub fn machine_ids(&self) -> impl Iterator<Item = &str> {
        self.machines.keys().map(String::as_str)
    }

    pub fn spec(&self, machine_id: &str) -> Option<&MachineSpec> {
        self.machines.get(machine_id).map(|m| &m.spec)
    }

    pub fn is_healthy(&self, machine_id: &str) -> Option<bool> {
        self.machines.get(machine_id).map(|m| m.healthy)
    }

    pub fn job(&self, machine_id: &str, job_id: &str) -> Option<&SimJob> {
        self.machines.get(machine_id)?.jobs.get(job_id)
    }

    /// Every job ever submitted, as (machine_id, job).
    pub fn jobs(&self) -> impl Iterator<Item = (&str, &SimJob)> {
        self.machines.iter().flat_map(|(id, m)| m.jobs.values().map(move |j| (id.as_str(), j)))
    }

    pub fn log(&self) -> &[FleetRecord] {
        &self.log
    }

    /// The event log as newline-delimited tab-separated records.
    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.clock.next_time()
    }

    fn machine_mut(&mut self, machine_id: &str) -> Result<&mut Machine, FleetError> {
        self.machines.get_mut(machine_id).ok_or_else(|| FleetError::UnknownMachine(machine_id.to_string()))
    }

    pub fn submit(&mut self, machine_id: &str, mut job: SimJob) -> Result<String, FleetError> {
        let now = self.now();
        let machine = self.machine_mut(machine_id)?;
        if !machine.healthy {
            return Err(FleetError::MachineDown(machine_id.to_string()));
        }
        if job.nodes_requested == 0 || job.walltime_estimate == 0 {
            return Err(FleetError::InvalidJob {
                job_id: job.job_id,
                reason: "nodes_requested and walltime_estimate must be positive".into(),
            });
        }
        if job.nodes_requested > machine.spec.total_nodes {
            return Err(FleetError::InfeasibleRequest {
                job_id: job.job_id,
                requested: job.nodes_requested,
                total: machine.spec.total_nodes,
            });
        }
        let rank = machine.spec.class_rank(&job.priority_class).ok_or_else(|| FleetError::UnknownClass(job.priority_class.clone()))?;
        if machine.jobs.contains_key(&job.job_id) {
            return Err(FleetError::DuplicateJob(job.job_id));
        }
        job.submit_time = now;
        job.state = JobState::Queued;
        job.started_at = None;
        job.finished_at = None;
        let id = job.job_id.clone();
        machine.queues[rank].push_back(id.clone());
        machine.jobs.insert(id.clone(), job);

        let mut out = Vec::new();
        let mut em = Emitter { log: &mut self.log, out: &mut out };
        em.emit(now, machine_id, Some(&id), FleetTransition::Queued);
        let machine = self.machines.get_mut(machine_id).expect("checked above");
        schedule_pass(machine, &mut self.clock, &mut em);
        self.drain_due(now, &mut out);
        Ok(id)
    }

    /// Runs a scheduling pass on one machine and returns the transitions it
    /// caused. Every mutating operation already runs one, so this is normally
    /// a no-op.
    pub fn schedule_pass(&mut self, machine_id: &str) -> Result<Vec<FleetRecord>, FleetError> {
        let mut out = Vec::new();
        let machine = self.machines.get_mut(machine_id).ok_or_else(|| FleetError::UnknownMachine(machine_id.to_string()))?;
        schedule_pass(machine, &mut self.clock, &mut Emitter { log: &mut self.log, out: &mut out });
        Ok(out)
    }

    pub fn cancel(&mut self, machine_id: &str, job_id: &str) -> Result<CancelAck, FleetError> {
        let now = self.now();
        let machine = self.machines.get_mut(machine_id).ok_or_else(|| FleetError::UnknownMachine(machine_id.to_string()))?;
        let job = machine.jobs.get(job_id).ok_or_else(|| FleetError::UnknownJob {
            machine_id: machine_id.to_string(),
            job_id: job_id.to_string(),
        })?;
        let (state, nodes) = (job.state, job.nodes_requested);
        match state {
            s if s.is_terminal() => return Ok(CancelAck::AlreadyTerminal(s)),
            JobState::Running => {
                machine.running.retain(|r| r != job_id);
                machine.free_nodes += nodes;
            }
            _ => {
                for q in &mut machine.queues {
                    q.retain(|r| r != job_id);
                }
            }
        }
        machine.set_state(job_id, JobState::Cancelled);
        machine.jobs.get_mut(job_id).expect("present").finished_at = Some(now);
        let mut out = Vec::new();
        let mut em = Emitter { log: &mut self.log, out: &mut out };
        em.emit(now, machine_id, Some(job_id), FleetTransition::Cancelled);
        schedule_pass(machine, &mut self.clock, &mut em);
        self.drain_due(now, &mut out);
        Ok(CancelAck::Cancelled)
    }

    pub fn query_status(&self, machine_id: &str) -> Result<MachineStatus, FleetError> {
        self.machines
            .get(machine_id)
            .map(|m| m.status(self.now()))
            .ok_or_else(|| FleetError::UnknownMachine(machine_id.to_string()))
    }

    /// Schedules a full outage. An outage at the current instant fires
    /// immediately and its transitions are returned.
    pub fn inject_failure(&mut self, machine_id: &str, time: SimTime) -> Result<Vec<FleetRecord>, FleetError> {
        if !self.machines.contains_key(machine_id) {
            return Err(FleetError::UnknownMachine(machine_id.to_string()));
        }
        let now = self.now();
        if time < now {
            return Err(FleetError::TimeReversal { now, requested: time });
        }
        self.clock.schedule(time, FleetEvent::Outage { machine: machine_id.to_string() });
        let mut out = Vec::new();
        self.drain_due(now, &mut out);
        Ok(out)
    }

    /// Brings a failed machine back, empty.
    pub fn restore(&mut self, machine_id: &str) -> Result<Vec<FleetRecord>, FleetError> {
        let now = self.now();
        let machine = self.machine_mut(machine_id)?;
        if machine.healthy {
            return Ok(Vec::new());
        }
        machine.healthy = true;
        machine.last_status = None;
        machine.free_nodes = machine.spec.total_nodes;
        let mut out = Vec::new();
        Emitter { log: &mut self.log, out: &mut out }.emit(now, machine_id, None, FleetTransition::Restored);
        Ok(out)
    }

    /// Fires every event with timestamp `<= time`, then sets the clock to `time`.
    pub fn advance_to(&mut self, time: SimTime) -> Result<Vec<FleetRecord>, FleetError> {
        let now = self.now();
        if time < now {
            return Err(FleetError::TimeReversal { now, requested: time });
        }
        let mut out = Vec::new();
        self.drain_due(time, &mut out);
        self.clock.set_now(time);
        Ok(out)
    }

    fn drain_due(&mut self, limit: SimTime, out: &mut Vec<FleetRecord>) {
        while let Some(next) = self.clock.pop_due(limit) {
            let now = next.time;
            let mut em = Emitter { log: &mut self.log, out };
            match next.event {
                FleetEvent::Completion { machine, job, epoch } => {
                    let Some(m) = self.machines.get_mut(&machine) else { continue };
                    let live = m.jobs.get(&job).is_some_and(|j| j.epoch == epoch && j.state == JobState::Running);
                    if !live {
                        continue;
                    }
                    let nodes = m.jobs[&job].nodes_requested;
                    m.running.retain(|r| r != &job);
                    m.free_nodes += nodes;
                    m.set_state(&job, JobState::Completed);
                    m.jobs.get_mut(&job).expect("present").finished_at = Some(now);
                    em.emit(now, &machine, Some(&job), FleetTransition::Completed);
                    schedule_pass(m, &mut self.clock, &mut em);
                }
                FleetEvent::Outage { machine } => {
                    let Some(m) = self.machines.get_mut(&machine) else { continue };
                    if !m.healthy {
                        continue;
                    }
                    m.last_status = Some(m.status(now));
                    m.healthy = false;
                    em.emit(now, &machine, None, FleetTransition::Outage);
                    let mut victims: Vec<String> = std::mem::take(&mut m.running);
                    for q in m.queues.iter_mut().rev() {
                        victims.extend(q.drain(..));
                    }
                    for id in victims {
                        m.set_state(&id, JobState::KilledByFailure);
                        m.jobs.get_mut(&id).expect("present").finished_at = Some(now);
                        em.emit(now, &machine, Some(&id), FleetTransition::KilledByFailure);
                    }
                    m.free_nodes = m.spec.total_nodes;
                }
            }
        }
    }

    /// Checks node conservation and queue/state agreement on every machine.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (id, m) in &self.machines {
            if !m.healthy {
                if !m.running.is_empty() || m.queues.iter().any(|q| !q.is_empty()) {
                    return Err(format!("{id}: down machine still holds jobs"));
                }
                continue;
            }
            let busy: u32 = m.running.iter().map(|j| m.jobs[j].nodes_requested).sum();
            if busy + m.free_nodes != m.spec.total_nodes {
                return Err(format!("{id}: free {} + busy {busy} != total {}", m.free_nodes, m.spec.total_nodes));
            }
            for j in &m.running {
                if m.jobs[j].state != JobState::Running {
                    return Err(format!("{id}: {j} listed running in state {}", m.jobs[j].state));
                }
            }
            for (rank, q) in m.queues.iter().enumerate() {
                for j in q {
                    let job = &m.jobs[j];
                    if job.state != JobState::Queued || m.spec.class_rank(&job.priority_class) != Some(rank) {
                        return Err(format!("{id}: {j} misplaced in queue {rank}"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn start_job(machine: &mut Machine, job_id: &str, clock: &mut SimClock, em: &mut Emitter<'_>) {
    let now = clock.now();
    let order = machine.next_start_order;
    machine.next_start_order += 1;
    machine.set_state(job_id, JobState::Running);
    let job = machine.jobs.get_mut(job_id).expect("queued job tracked");
    job.started_at = Some(now);
    job.start_order = order;
    job.epoch += 1;
    machine.free_nodes -= job.nodes_requested;
    clock.schedule(
        now + job.effective_runtime(),
        FleetEvent::Completion { machine: machine.spec.machine_id.clone(), job: job_id.to_string(), epoch: job.epoch },
    );
    machine.running.push(job_id.to_string());
    em.emit(now, &machine.spec.machine_id, Some(job_id), FleetTransition::Running);
}

/// Smallest suffix (by start order) of running bottom-class jobs whose nodes,
/// together with the free pool, cover `needed`. Returned most recent first.
fn preemption_victims(machine: &Machine, needed: u32) -> Option<Vec<String>> {
    let bottom = machine.spec.priority_classes.first()?;
    let mut freed = machine.free_nodes;
    let mut victims = Vec::new();
    for id in machine.running.iter().rev() {
        let job = &machine.jobs[id];
        if &job.priority_class != bottom {
            continue;
        }
        victims.push(id.clone());
        freed += job.nodes_requested;
        if freed >= needed {
            return Some(victims);
        }
    }
    None
}

fn schedule_pass(machine: &mut Machine, clock: &mut SimClock, em: &mut Emitter<'_>) {
    if !machine.healthy {
        return;
    }
    let now = clock.now();
    let preempting = machine.spec.preempting_rank();
    for rank in (0..machine.queues.len()).rev() {
        while let Some(head) = machine.queues[rank].front().cloned() {
            let needed = machine.jobs[&head].nodes_requested;
            if needed <= machine.free_nodes {
                machine.queues[rank].pop_front();
                start_job(machine, &head, clock, em);
                continue;
            }
            if Some(rank) != preempting || rank == 0 {
                break;
            }
            let Some(victims) = preemption_victims(machine, needed) else { break };
            // Most recent first, so pushing to the front leaves the oldest victim at the head.
            for id in &victims {
                let job = &machine.jobs[id];
                let (nodes, victim_rank) = (job.nodes_requested, machine.spec.class_rank(&job.priority_class).unwrap_or(0));
                machine.running.retain(|r| r != id);
                machine.free_nodes += nodes;
                machine.set_state(id, JobState::Preempted);
                em.emit(now, &machine.spec.machine_id, Some(id), FleetTransition::Preempted);
                machine.set_state(id, JobState::Queued);
                machine.jobs.get_mut(id).expect("present").started_at = None;
                machine.queues[victim_rank].push_front(id.clone());
                em.emit(now, &machine.spec.machine_id, Some(id), FleetTransition::Queued);
            }
        }
    }
}

impl MachineConnector for Fleet {
    fn now(&self) -> SimTime {
        Fleet::now(self)
    }

    fn submit(&mut self, machine_id: &str, job: SimJob) -> Result<String, FleetError> {
        Fleet::submit(self, machine_id, job)
    }

    fn cancel(&mut self, machine_id: &str, job_id: &str) -> Result<CancelAck, FleetError> {
        Fleet::cancel(self, machine_id, job_id)
    }

    fn query_status(&self, machine_id: &str) -> Result<MachineStatus, FleetError> {
        Fleet::query_status(self, machine_id)
    }

    fn job_progress(&self, machine_id: &str, job_id: &str) -> Result<JobProgress, FleetError> {
        let machine = self.machines.get(machine_id).ok_or_else(|| FleetError::UnknownMachine(machine_id.to_string()))?;
        if !machine.healthy {
            return Err(FleetError::MachineDown(machine_id.to_string()));
        }
        let job = machine.jobs.get(job_id).ok_or_else(|| FleetError::UnknownJob {
            machine_id: machine_id.to_string(),
            job_id: job_id.to_string(),
        })?;
        Ok(JobProgress { state: job.state, started_at: job.started_at, finished_at: job.finished_at })
    }
}

#[cfg(test)]
mod tests;
