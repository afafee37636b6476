//! Central meta-scheduler: polls the fleet, predicts queue waits, escalates
//! priority to meet deadlines, accounts tokens, submits speculatively and
//! resubmits work lost to machine failures.

mod predict;
mod record;
mod select;
mod tokens;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use predict::{predict_start, WaitPrediction};
pub use record::{FederatedState, JobRecord, JobRequest, Placement, PlacementState};
pub use select::{select_placement, PlacementAsk, PlacementPlan};
pub use tokens::{TokenBudget, TokenEntry, TokenEntryKind};

use crate::fleet::{default_priority_classes, FleetError, MachineConnector, MachineStatus, SimJob};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum FederatorError {
    #[error("no healthy machines available")]
    NoHealthyMachines,
    #[error("no machine can ever fit {requested} nodes")]
    NoFeasibleMachine { requested: u32 },
    #[error("job needs {requested} nodes but {machine_id:?} has {total}")]
    InfeasibleOnMachine { machine_id: String, requested: u32, total: u32 },
    #[error("machine {machine_id:?} has no priority class {class:?}")]
    UnknownClass { machine_id: String, class: String },
    #[error("unknown priority class {0:?}")]
    UnknownPriority(String),
    #[error("incident {incident_id:?} needs {needed} tokens but only {available} remain")]
    InsufficientTokens { incident_id: String, needed: f64, available: f64 },
    #[error("unknown request {0:?}")]
    UnknownRequest(String),
    #[error("request {0:?} already exists")]
    DuplicateRequest(String),
    #[error("unknown incident {0:?}")]
    UnknownIncident(String),
    #[error("incident {0:?} already has a budget")]
    DuplicateIncident(String),
    #[error("unknown machine {0:?}")]
    UnknownMachine(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Connector(#[from] FleetError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineRegistration {
    pub machine_id: String,
    #[serde(default)]
    pub endpoint: String,
    /// Opaque label naming the credentials used on this machine.
    #[serde(default)]
    pub credential_label: String,
}

impl MachineRegistration {
    pub fn new(machine_id: impl Into<String>) -> Self {
        let machine_id = machine_id.into();
        Self { endpoint: format!("sim://{machine_id}"), credential_label: "default".into(), machine_id }
    }
}

fn default_poll_interval() -> SimTime {
    10
}

fn default_multipliers() -> BTreeMap<String, f64> {
    [("normal", 1.0), ("high", 2.0), ("preempt", 4.0)].into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn default_fee() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatorConfig {
    #[serde(default = "default_poll_interval")]
    pub poll_interval: SimTime,
    /// Escalation ladder, lowest first.
    #[serde(default = "default_priority_classes")]
    pub priority_classes: Vec<String>,
    #[serde(default = "default_multipliers")]
    pub token_multipliers: BTreeMap<String, f64>,
    /// Fraction of a cancelled reservation that is not refunded.
    #[serde(default = "default_fee")]
    pub reservation_fee: f64,
    #[serde(default)]
    pub machines: Vec<MachineRegistration>,
}

impl Default for FederatorConfig {
    fn default() -> Self {
        Self {
            poll_interval: default_poll_interval(),
            priority_classes: default_priority_classes(),
            token_multipliers: default_multipliers(),
            reservation_fee: default_fee(),
            machines: Vec::new(),
        }
    }
}

impl FederatorConfig {
    pub fn multiplier(&self, class: &str) -> f64 {
        self.token_multipliers.get(class).copied().unwrap_or(1.0)
    }

    pub fn cost(&self, nodes: u32, walltime: SimTime, class: &str) -> f64 {
        f64::from(nodes) * walltime as f64 * self.multiplier(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineHealth {
    Healthy,
    Suspect,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineEntry {
    pub registration: MachineRegistration,
    pub health: MachineHealth,
    pub missed_polls: u32,
    pub status: Option<MachineStatus>,
    pub failed_at: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Place,
    Resubmit,
    SpeculationWinner,
    SiblingCancelled,
    Completed,
    Abandoned,
    FailedRescheduling,
    MachineSuspect,
    MachineFailed,
    MachineRestored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementRef {
    pub machine_id: String,
    pub priority_class: String,
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub time: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub kind: DecisionKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placements: Vec<PlacementRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<WaitPrediction>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub deadline_at_risk: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Decision {
    fn new(time: SimTime, request_id: Option<&str>, kind: DecisionKind) -> Self {
        Self {
            time,
            request_id: request_id.map(str::to_string),
            kind,
            placements: Vec::new(),
            predictions: Vec::new(),
            deadline_at_risk: false,
            detail: String::new(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("decision serializes")
    }
}

/// Notifications for whoever drives the federator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FederatorEvent {
    Placed { request_id: String },
    Started { request_id: String, machine_id: String, placement: usize },
    Requeued { request_id: String, machine_id: String },
    Completed { request_id: String, machine_id: String },
    Resubmitted { request_id: String, from_machine: String },
    DeadlineAtRisk { request_id: String },
    FailedRescheduling { request_id: String, reason: String },
    Abandoned { request_id: String },
    MachineSuspect { machine_id: String },
    MachineFailed { machine_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Federator {
    config: FederatorConfig,
    machines: BTreeMap<String, MachineEntry>,
    records: BTreeMap<String, JobRecord>,
    budgets: BTreeMap<String, TokenBudget>,
    /// Machine job id to request id.
    job_index: BTreeMap<String, String>,
    decisions: Vec<Decision>,
    outbox: Vec<FederatorEvent>,
    next_poll: SimTime,
}

impl Federator {
    pub fn new(config: FederatorConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn config(&self) -> &FederatorConfig {
        &self.config
    }

    /// Registers every machine named in the configuration.
    pub fn register_configured(&mut self, conn: &dyn MachineConnector) -> Result<(), FederatorError> {
        for reg in self.config.machines.clone() {
            self.register_machine(conn, reg)?;
        }
        Ok(())
    }

    /// Adds a machine, or brings a failed one back once it answers healthy.
    pub fn register_machine(&mut self, conn: &dyn MachineConnector, registration: MachineRegistration) -> Result<(), FederatorError> {
        let status = conn.query_status(&registration.machine_id)?;
        let id = registration.machine_id.clone();
        let healthy = status.healthy;
        let previous = self.machines.insert(
            id.clone(),
            MachineEntry {
                registration,
                health: if healthy { MachineHealth::Healthy } else { MachineHealth::Suspect },
                missed_polls: u32::from(!healthy),
                status: Some(status),
                failed_at: None,
            },
        );
        if previous.is_some() {
            self.decisions.push(Decision::new(conn.now(), None, DecisionKind::MachineRestored).with_detail(&id));
        } else if !self.config.machines.iter().any(|m| m.machine_id == id) {
            let reg = self.machines[&id].registration.clone();
            self.config.machines.push(reg);
        }
        Ok(())
    }

    pub fn open_budget(&mut self, incident_id: &str, tokens: f64) -> Result<(), FederatorError> {
        if self.budgets.contains_key(incident_id) {
            return Err(FederatorError::DuplicateIncident(incident_id.to_string()));
        }
        self.budgets.insert(incident_id.to_string(), TokenBudget::new(incident_id, tokens));
        Ok(())
    }

    pub fn budget(&self, incident_id: &str) -> Option<&TokenBudget> {
        self.budgets.get(incident_id)
    }

    pub fn machines(&self) -> &BTreeMap<String, MachineEntry> {
        &self.machines
    }

    pub fn records(&self) -> impl Iterator<Item = &JobRecord> {
        self.records.values()
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn decision_log_text(&self) -> String {
        self.decisions.iter().map(|d| d.to_line() + "\n").collect()
    }

    pub fn drain_events(&mut self) -> Vec<FederatorEvent> {
        std::mem::take(&mut self.outbox)
    }

    pub fn next_poll_time(&self) -> SimTime {
        self.next_poll
    }

    pub fn job_status(&self, request_id: &str) -> Result<&JobRecord, FederatorError> {
        self.records.get(request_id).ok_or_else(|| FederatorError::UnknownRequest(request_id.to_string()))
    }

    pub fn list_incident_jobs(&self, incident_id: &str) -> Vec<&JobRecord> {
        self.records.values().filter(|r| r.request.owning_incident_id == incident_id).collect()
    }

    pub fn request_for_job(&self, machine_job_id: &str) -> Option<&str> {
        self.job_index.get(machine_job_id).map(String::as_str)
    }

    /// Most pessimistic spend of a request: every speculative copy at the
    /// highest class it may escalate to.
    pub fn worst_case_cost(&self, request: &JobRequest) -> f64 {
        let top = self.config.priority_classes.iter().position(|c| *c == request.max_priority_allowed).unwrap_or(0);
        let mult = self.config.priority_classes[..=top].iter().map(|c| self.config.multiplier(c)).fold(0.0, f64::max);
        f64::from(request.nodes_requested) * request.walltime_estimate as f64 * mult * f64::from(request.speculation_factor.max(1))
    }

    /// Refreshes every machine snapshot. Machines that do not answer, or
    /// answer unhealthy, collect a strike; two consecutive strikes fail the
    /// machine and trigger resubmission of its work.
    pub fn poll_fleet(&mut self, conn: &mut dyn MachineConnector) -> Vec<MachineStatus> {
        let now = conn.now();
        self.next_poll = now + self.config.poll_interval.max(1);
        let mut newly_failed = Vec::new();
        for (id, entry) in self.machines.iter_mut() {
            if entry.health == MachineHealth::Failed {
                continue;
            }
            match conn.query_status(id) {
                Ok(status) if status.healthy => {
                    entry.health = MachineHealth::Healthy;
                    entry.missed_polls = 0;
                    entry.status = Some(status);
                }
                answer => {
                    if let Ok(status) = answer {
                        entry.status = Some(status);
                    }
                    entry.missed_polls += 1;
                    if entry.missed_polls >= 2 {
                        newly_failed.push(id.clone());
                    } else {
                        entry.health = MachineHealth::Suspect;
                        self.decisions.push(Decision::new(now, None, DecisionKind::MachineSuspect).with_detail(id));
                        self.outbox.push(FederatorEvent::MachineSuspect { machine_id: id.clone() });
                    }
                }
            }
        }
        for id in newly_failed {
            self.handle_machine_failure(conn, &id);
        }
        let open: Vec<String> = self.records.values().filter(|r| !r.federated_state.is_terminal()).map(|r| r.request.request_id.clone()).collect();
        for id in open {
            self.sync_record(conn, &id);
        }
        self.machines.values().filter_map(|m| m.status.clone()).collect()
    }

    /// Called when a job reports in at start-up. Resolves speculation at once
    /// instead of waiting for the next poll.
    pub fn claim(&mut self, conn: &mut dyn MachineConnector, machine_job_id: &str) {
        if let Some(request_id) = self.job_index.get(machine_job_id).cloned() {
            self.sync_record(conn, &request_id);
        }
    }

    /// Called when a job reports its own successful exit. Counts even if the
    /// machine has stopped answering since.
    pub fn report_exit(&mut self, conn: &mut dyn MachineConnector, machine_job_id: &str, finished_at: SimTime) {
        let Some(request_id) = self.job_index.get(machine_job_id).cloned() else { return };
        let Some(record) = self.records.get_mut(&request_id) else { return };
        if record.federated_state.is_terminal() {
            return;
        }
        if let Some(p) = record.placements.iter_mut().find(|p| p.machine_job_id == machine_job_id && p.state.is_live()) {
            p.state = PlacementState::Completed;
            p.finished_at = Some(finished_at);
        }
        self.settle(conn, &request_id);
    }

    pub fn submit_federated(&mut self, conn: &mut dyn MachineConnector, request: JobRequest) -> Result<JobRecord, FederatorError> {
        let now = conn.now();
        self.validate_request(&request, now)?;
        let id = request.request_id.clone();
        self.records.insert(
            id.clone(),
            JobRecord {
                request,
                placements: Vec::new(),
                chosen_placement: None,
                federated_state: FederatedState::Pending,
                deadline_at_risk: false,
                submitted_at: now,
                completed_at: None,
            },
        );
        if let Err(err) = self.place(conn, &id, DecisionKind::Place) {
            self.records.remove(&id);
            return Err(err);
        }
        self.outbox.push(FederatorEvent::Placed { request_id: id.clone() });
        self.sync_record(conn, &id);
        Ok(self.records[&id].clone())
    }

    fn validate_request(&self, request: &JobRequest, now: SimTime) -> Result<(), FederatorError> {
        let invalid = |why: String| Err(FederatorError::InvalidRequest(why));
        if self.records.contains_key(&request.request_id) {
            return Err(FederatorError::DuplicateRequest(request.request_id.clone()));
        }
        if !self.budgets.contains_key(&request.owning_incident_id) {
            return Err(FederatorError::UnknownIncident(request.owning_incident_id.clone()));
        }
        if !self.config.priority_classes.contains(&request.max_priority_allowed) {
            return Err(FederatorError::UnknownPriority(request.max_priority_allowed.clone()));
        }
        if request.nodes_requested == 0 || request.walltime_estimate == 0 {
            return invalid("nodes_requested and walltime_estimate must be positive".into());
        }
        if request.deadline <= now {
            return invalid(format!("deadline {} is not after submission time {now}", request.deadline));
        }
        let k = request.speculation_factor as usize;
        if k == 0 || k > self.machines.len() {
            return invalid(format!("speculation factor {k} must be between 1 and {}", self.machines.len()));
        }
        Ok(())
    }

    /// Selects and submits placements for a record. Nothing is debited or
    /// submitted unless the whole plan is affordable.
    fn place(&mut self, conn: &mut dyn MachineConnector, request_id: &str, kind: DecisionKind) -> Result<(), FederatorError> {
        let now = conn.now();
        let request = self.records[request_id].request.clone();
        let mut excluded: BTreeSet<String> = BTreeSet::new();
        loop {
            let candidates: Vec<&MachineStatus> = self
                .machines
                .iter()
                .filter(|(id, m)| m.health == MachineHealth::Healthy && !excluded.contains(*id))
                .filter_map(|(_, m)| m.status.as_ref())
                .collect();
            let plan = select_placement(
                &candidates,
                &self.config.priority_classes,
                PlacementAsk {
                    nodes_requested: request.nodes_requested,
                    walltime_estimate: request.walltime_estimate,
                    deadline: request.deadline,
                    max_priority_allowed: &request.max_priority_allowed,
                    speculation_factor: request.speculation_factor as usize,
                },
            )?;
            let costs: Vec<f64> = plan
                .chosen
                .iter()
                .map(|p| self.config.cost(request.nodes_requested, request.walltime_estimate, &p.priority_class))
                .collect();
            let total: f64 = costs.iter().sum();
            let budget = self.budgets.get(&request.owning_incident_id).ok_or_else(|| FederatorError::UnknownIncident(request.owning_incident_id.clone()))?;
            if !budget.can_cover(total) {
                return Err(FederatorError::InsufficientTokens {
                    incident_id: request.owning_incident_id.clone(),
                    needed: total,
                    available: budget.remaining(),
                });
            }

            let mut placed = Vec::new();
            for (option, cost) in plan.chosen.iter().zip(costs) {
                let record = &self.records[request_id];
                let job_id = format!("{}.{}@{}", request_id, record.placements.len(), option.machine_id);
                let job = SimJob::new(
                    job_id.clone(),
                    request.nodes_requested,
                    request.walltime_estimate,
                    request.actual_runtime.unwrap_or(request.walltime_estimate),
                    option.priority_class.clone(),
                );
                match conn.submit(&option.machine_id, job) {
                    Ok(_) => {
                        let budget = self.budgets.get_mut(&request.owning_incident_id).expect("checked above");
                        budget.debit(now, request_id, &option.machine_id, cost)?;
                        self.job_index.insert(job_id.clone(), request_id.to_string());
                        let record = self.records.get_mut(request_id).expect("record exists");
                        record.placements.push(Placement {
                            machine_id: option.machine_id.clone(),
                            machine_job_id: job_id,
                            priority_class: option.priority_class.clone(),
                            state: PlacementState::Queued,
                            cost,
                            submitted_at: now,
                            started_at: None,
                            finished_at: None,
                        });
                        if let (Some(entry), Ok(status)) = (self.machines.get_mut(&option.machine_id), conn.query_status(&option.machine_id)) {
                            entry.status = Some(status);
                        }
                        placed.push(PlacementRef { machine_id: option.machine_id.clone(), priority_class: option.priority_class.clone() });
                    }
                    Err(err) => {
                        if matches!(err, FleetError::MachineDown(_)) {
                            if let Some(entry) = self.machines.get_mut(&option.machine_id) {
                                entry.health = MachineHealth::Suspect;
                                entry.missed_polls = entry.missed_polls.max(1);
                            }
                        }
                        excluded.insert(option.machine_id.clone());
                    }
                }
            }
            if placed.is_empty() {
                continue;
            }
            let record = self.records.get_mut(request_id).expect("record exists");
            record.federated_state = FederatedState::Placed;
            record.deadline_at_risk = plan.deadline_at_risk;
            let mut decision = Decision::new(now, Some(request_id), kind);
            decision.placements = placed;
            decision.predictions = plan.evaluated;
            decision.deadline_at_risk = plan.deadline_at_risk;
            self.decisions.push(decision);
            if plan.deadline_at_risk {
                self.outbox.push(FederatorEvent::DeadlineAtRisk { request_id: request_id.to_string() });
            }
            return Ok(());
        }
    }

    /// Pulls progress for every live placement of a record and settles it.
    fn sync_record(&mut self, conn: &mut dyn MachineConnector, request_id: &str) {
        let Some(record) = self.records.get(request_id) else { return };
        if record.federated_state.is_terminal() {
            return;
        }
        let live: Vec<(usize, String, String)> =
            record.live_placements().map(|(i, p)| (i, p.machine_id.clone(), p.machine_job_id.clone())).collect();
        for (idx, machine, job) in live {
            if self.machines.get(&machine).is_none_or(|m| m.health != MachineHealth::Healthy) {
                continue;
            }
            let progress = conn.job_progress(&machine, &job);
            let placement = &mut self.records.get_mut(request_id).expect("record exists").placements[idx];
            match progress {
                Ok(p) => {
                    placement.state = PlacementState::from_job(p.state);
                    placement.started_at = p.started_at.or(placement.started_at);
                    placement.finished_at = p.finished_at;
                }
                Err(FleetError::UnknownJob { .. }) => placement.state = PlacementState::Dead,
                Err(_) => {}
            }
        }
        self.settle(conn, request_id);
    }

    fn settle(&mut self, conn: &mut dyn MachineConnector, request_id: &str) {
        let now = conn.now();
        let record = &self.records[request_id];
        if record.federated_state.is_terminal() {
            return;
        }
        if let Some(done) = record.placements.iter().position(|p| p.state == PlacementState::Completed) {
            let machine_id = record.placements[done].machine_id.clone();
            self.cancel_siblings(conn, request_id, Some(done));
            let record = self.records.get_mut(request_id).expect("record exists");
            record.chosen_placement = Some(done);
            record.federated_state = FederatedState::Completed;
            record.completed_at = Some(record.placements[done].finished_at.unwrap_or(now));
            self.decisions.push(Decision::new(now, Some(request_id), DecisionKind::Completed).with_detail(&machine_id));
            self.outbox.push(FederatorEvent::Completed { request_id: request_id.to_string(), machine_id });
            return;
        }
        let winner = record
            .placements
            .iter()
            .enumerate()
            .filter(|(_, p)| p.state == PlacementState::Running)
            .min_by_key(|(i, p)| (Some(*i) != record.chosen_placement, p.started_at, *i))
            .map(|(i, _)| i);
        if let Some(winner) = winner {
            let newly_started = record.chosen_placement != Some(winner) || record.federated_state != FederatedState::Running;
            let speculative = record.placements.iter().filter(|p| p.state.is_live()).count() > 1;
            self.cancel_siblings(conn, request_id, Some(winner));
            let record = self.records.get_mut(request_id).expect("record exists");
            record.chosen_placement = Some(winner);
            record.federated_state = FederatedState::Running;
            if newly_started {
                let machine_id = record.placements[winner].machine_id.clone();
                if speculative {
                    let mut d = Decision::new(now, Some(request_id), DecisionKind::SpeculationWinner);
                    d.placements.push(PlacementRef { machine_id: machine_id.clone(), priority_class: record.placements[winner].priority_class.clone() });
                    self.decisions.push(d);
                }
                self.outbox.push(FederatorEvent::Started { request_id: request_id.to_string(), machine_id, placement: winner });
            }
            return;
        }
        if record.has_live_placement() {
            if record.federated_state == FederatedState::Running {
                let machine_id = record.active_placement().map(|p| p.machine_id.clone()).unwrap_or_default();
                self.outbox.push(FederatorEvent::Requeued { request_id: request_id.to_string(), machine_id });
            }
            self.records.get_mut(request_id).expect("record exists").federated_state = FederatedState::Placed;
            return;
        }
        let from = record.placements.last().map(|p| p.machine_id.clone()).unwrap_or_default();
        self.resubmit(conn, request_id, &from);
    }

    fn resubmit(&mut self, conn: &mut dyn MachineConnector, request_id: &str, from_machine: &str) {
        let record = self.records.get_mut(request_id).expect("record exists");
        record.federated_state = FederatedState::Pending;
        record.chosen_placement = None;
        match self.place(conn, request_id, DecisionKind::Resubmit) {
            Ok(()) => {
                self.outbox.push(FederatorEvent::Resubmitted { request_id: request_id.to_string(), from_machine: from_machine.to_string() });
                self.sync_record(conn, request_id);
            }
            Err(err) => {
                let reason = err.to_string();
                self.records.get_mut(request_id).expect("record exists").federated_state = FederatedState::FailedRescheduling;
                self.decisions.push(Decision::new(conn.now(), Some(request_id), DecisionKind::FailedRescheduling).with_detail(&reason));
                self.outbox.push(FederatorEvent::FailedRescheduling { request_id: request_id.to_string(), reason });
            }
        }
    }

    /// Cancels every live placement except `keep`, refunding each minus the
    /// reservation fee.
    fn cancel_siblings(&mut self, conn: &mut dyn MachineConnector, request_id: &str, keep: Option<usize>) {
        let now = conn.now();
        let record = &self.records[request_id];
        let victims: Vec<usize> = record.live_placements().map(|(i, _)| i).filter(|i| Some(*i) != keep).collect();
        for idx in victims {
            let (machine, job, cost, class) = {
                let p = &self.records[request_id].placements[idx];
                (p.machine_id.clone(), p.machine_job_id.clone(), p.cost, p.priority_class.clone())
            };
            if self.machines.get(&machine).is_some_and(|m| m.health != MachineHealth::Failed) {
                let _ = conn.cancel(&machine, &job);
            }
            self.records.get_mut(request_id).expect("record exists").placements[idx].state = PlacementState::Cancelled;
            self.refund(now, request_id, &machine, cost * (1.0 - self.config.reservation_fee));
            let mut d = Decision::new(now, Some(request_id), DecisionKind::SiblingCancelled);
            d.placements.push(PlacementRef { machine_id: machine, priority_class: class });
            self.decisions.push(d);
        }
    }

    fn refund(&mut self, time: SimTime, request_id: &str, machine_id: &str, amount: f64) {
        let incident = self.records[request_id].request.owning_incident_id.clone();
        if let Some(budget) = self.budgets.get_mut(&incident) {
            budget.refund(time, request_id, machine_id, amount);
        }
    }

    /// Declares a machine failed: its live placements die, and any request
    /// left without a live placement is placed again elsewhere. Returns the
    /// records that were resubmitted.
    pub fn handle_machine_failure(&mut self, conn: &mut dyn MachineConnector, machine_id: &str) -> Vec<JobRecord> {
        let now = conn.now();
        let Some(entry) = self.machines.get_mut(machine_id) else { return Vec::new() };
        if entry.health == MachineHealth::Failed {
            return Vec::new();
        }
        entry.health = MachineHealth::Failed;
        entry.failed_at = Some(now);
        self.decisions.push(Decision::new(now, None, DecisionKind::MachineFailed).with_detail(machine_id));
        self.outbox.push(FederatorEvent::MachineFailed { machine_id: machine_id.to_string() });

        let mut affected = Vec::new();
        for (id, record) in self.records.iter_mut() {
            if record.federated_state.is_terminal() {
                continue;
            }
            let mut hit = false;
            for placement in record.placements.iter_mut().filter(|p| p.machine_id == machine_id && p.state.is_live()) {
                placement.state = PlacementState::Dead;
                hit = true;
            }
            if hit {
                affected.push(id.clone());
            }
        }
        let fee = self.config.reservation_fee;
        let mut resubmitted = Vec::new();
        for id in affected {
            let dead: Vec<f64> = self.records[&id]
                .placements
                .iter()
                .filter(|p| p.machine_id == machine_id && p.state == PlacementState::Dead && p.finished_at.is_none())
                .map(|p| p.cost)
                .collect();
            for cost in dead {
                self.refund(now, &id, machine_id, cost * (1.0 - fee));
            }
            for p in self.records.get_mut(&id).expect("record exists").placements.iter_mut() {
                if p.machine_id == machine_id && p.state == PlacementState::Dead && p.finished_at.is_none() {
                    p.finished_at = Some(now);
                }
            }
            if self.records[&id].has_live_placement() {
                continue;
            }
            self.resubmit(conn, &id, machine_id);
            if !self.records[&id].federated_state.is_terminal() || self.records[&id].federated_state == FederatedState::Completed {
                resubmitted.push(self.records[&id].clone());
            }
        }
        resubmitted
    }

    /// Operator cancellation. Placements that never started are refunded
    /// minus the reservation fee; running ones are not.
    pub fn cancel_request(&mut self, conn: &mut dyn MachineConnector, request_id: &str) -> Result<(), FederatorError> {
        let now = conn.now();
        let record = self.records.get(request_id).ok_or_else(|| FederatorError::UnknownRequest(request_id.to_string()))?;
        if record.federated_state.is_terminal() {
            return Ok(());
        }
        let live: Vec<usize> = record.live_placements().map(|(i, _)| i).collect();
        for idx in live {
            let p = self.records[request_id].placements[idx].clone();
            if self.machines.get(&p.machine_id).is_some_and(|m| m.health != MachineHealth::Failed) {
                let _ = conn.cancel(&p.machine_id, &p.machine_job_id);
            }
            let placement = &mut self.records.get_mut(request_id).expect("record exists").placements[idx];
            placement.state = PlacementState::Cancelled;
            placement.finished_at = Some(now);
            if p.started_at.is_none() {
                self.refund(now, request_id, &p.machine_id, p.cost * (1.0 - self.config.reservation_fee));
            }
        }
        self.records.get_mut(request_id).expect("record exists").federated_state = FederatedState::Abandoned;
        self.decisions.push(Decision::new(now, Some(request_id), DecisionKind::Abandoned));
        self.outbox.push(FederatorEvent::Abandoned { request_id: request_id.to_string() });
        Ok(())
    }

    /// Checks record and token invariants; used by tests and recovery checks.
    pub fn check_invariants(&self) -> Result<(), String> {
        for record in self.records.values() {
            let completed = record.completed_placements();
            if completed > 1 {
                return Err(format!("{} has {completed} completed placements", record.request.request_id));
            }
            if (record.federated_state == FederatedState::Completed) != (completed == 1) {
                return Err(format!("{} state {:?} with {completed} completions", record.request.request_id, record.federated_state));
            }
        }
        for budget in self.budgets.values() {
            if budget.spent_tokens > budget.initial_tokens + 1e-6 {
                return Err(format!("{} overspent", budget.incident_id));
            }
            if (budget.spent_tokens - budget.ledger_balance()).abs() > 1e-6 {
                return Err(format!("{} ledger does not reconcile", budget.incident_id));
            }
        }
        Ok(())
    }
}

impl Decision {
    fn with_detail(mut self, detail: &str) -> Self {
        self.detail = detail.to_string();
        self
    }
}

#[cfg(test)]
mod tests;
