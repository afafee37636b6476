//! The orchestrator: every subsystem behind one deterministic state machine
//! driven by a serialized command stream.

mod actions;
mod actor;
mod persist;
mod scenario;
mod views;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use actor::SystemHandle;
pub use persist::{Orchestrator, RecoveryReport};
pub use scenario::{Scenario, ScenarioStep};
pub use views::{EnsembleSummary, EventFilter, MachineView, MemberSummary};

use crate::assets;
use crate::ensemble::{EnsembleError, EnsembleManager, ReducedFrame, SteeringTarget, DEFAULT_FRAME_BUFFER};
use crate::federator::{Decision, Federator, FederatorConfig, FederatorError, FederatorEvent, JobRequest, MachineRegistration};
use crate::fleet::{Fleet, FleetError, FleetRecord, FleetTransition, MachineSpec};
use crate::gateway::{Gateway, GatewayError, IncidentDescriptor, IngestOutcome, SensorContent, SensorEnvelope, SourceRegistration};
use crate::workflow::{
    kinds, scope_key, ActivityDocument, DiagnosticKind, EnsembleView, FiredAction, RuleDocument, RuleEngine, StateView, WorkflowError,
    WorkflowEvent,
};
use crate::workloads::{Cell, FireGrid, ParamValue, ParamVector, WindField};
use crate::SimTime;

/// Events deeper than this in a provenance chain are not evaluated.
pub const MAX_CHAIN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(default)]
    pub federator: FederatorConfig,
    /// Seconds between telemetry frames of a running member.
    #[serde(default = "default_frame_interval")]
    pub frame_interval: SimTime,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub grid_width: usize,
    #[serde(default = "default_grid")]
    pub grid_height: usize,
    #[serde(default = "default_spread")]
    pub spread_prob: f64,
    #[serde(default = "default_buffer")]
    pub frame_buffer: usize,
    /// Load the bundled activity and rule documents at start.
    #[serde(default = "yes")]
    pub builtin_documents: bool,
}

fn default_frame_interval() -> SimTime {
    30
}
fn default_seed() -> u64 {
    42
}
fn default_grid() -> usize {
    20
}
fn default_spread() -> f64 {
    0.5
}
fn default_buffer() -> usize {
    DEFAULT_FRAME_BUFFER
}
fn yes() -> bool {
    true
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            federator: FederatorConfig::default(),
            frame_interval: default_frame_interval(),
            seed: default_seed(),
            grid_width: default_grid(),
            grid_height: default_grid(),
            spread_prob: default_spread(),
            frame_buffer: default_buffer(),
            builtin_documents: true,
        }
    }
}

/// Operator actions submitted through the service API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorCommand {
    Steer {
        ensemble_id: String,
        #[serde(default = "all_members")]
        target: SteeringTarget,
        payload: ParamVector,
    },
    StopEnsemble {
        ensemble_id: String,
    },
    StopMembers {
        ensemble_id: String,
        target: SteeringTarget,
    },
    /// A what-if ensemble launched by hand.
    SpawnEnsemble {
        incident_id: String,
        region: String,
        template: String,
        #[serde(default)]
        wind: Option<WindField>,
        #[serde(default)]
        params: ParamVector,
        #[serde(default)]
        sweep: BTreeMap<String, Vec<ParamValue>>,
    },
    SubmitJob {
        request: JobRequest,
    },
    CancelJob {
        request_id: String,
    },
    AcknowledgeAlert {
        alert_id: String,
    },
}

fn all_members() -> SteeringTarget {
    SteeringTarget::All
}

impl OperatorCommand {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Steer { .. } => "steer",
            Self::StopEnsemble { .. } => "stop_ensemble",
            Self::StopMembers { .. } => "stop_members",
            Self::SpawnEnsemble { .. } => "spawn_ensemble",
            Self::SubmitJob { .. } => "submit_job",
            Self::CancelJob { .. } => "cancel_job",
            Self::AcknowledgeAlert { .. } => "acknowledge_alert",
        }
    }
}

/// One entry of the command stream. Commands are the only way state changes,
/// so the stream is also the persistence log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    AddMachine { spec: MachineSpec },
    /// Takes a machine down at the current time.
    InjectFailure { machine_id: String },
    RestoreMachine { machine_id: String },
    AdvanceTo { time: SimTime },
    CreateIncident { incident: IncidentDescriptor },
    RegisterSource { source: SourceRegistration },
    Ingest { envelope: SensorEnvelope },
    Operator { command: OperatorCommand },
    LoadActivity { document: String },
    LoadRules { document: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Federator(#[from] FederatorError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("unknown {what} {id:?}")]
    NotFound { what: &'static str, id: String },
    #[error("{0}")]
    Invalid(String),
    #[error("store: {0}")]
    Store(String),
}

impl From<crate::workflow::DocumentError> for SystemError {
    fn from(e: crate::workflow::DocumentError) -> Self {
        SystemError::Workflow(e.into())
    }
}

impl SystemError {
    /// Coarse class used for protocol status codes.
    pub fn class(&self) -> &'static str {
        use EnsembleError as E;
        use FederatorError as F;
        use GatewayError as G;
        match self {
            Self::NotFound { .. }
            | Self::Gateway(G::UnknownSource(_) | G::UnknownIncident(_))
            | Self::Federator(F::UnknownRequest(_) | F::UnknownIncident(_) | F::UnknownMachine(_))
            | Self::Ensemble(E::UnknownEnsemble(_) | E::UnknownMember(_) | E::UnknownTarget(_))
            | Self::Fleet(FleetError::UnknownMachine(_))
            | Self::Workflow(WorkflowError::UnknownActivity { .. }) => "not_found",
            Self::Gateway(G::DuplicateSource(_) | G::DuplicateIncident(_))
            | Self::Federator(F::DuplicateRequest(_) | F::DuplicateIncident(_))
            | Self::Fleet(FleetError::DuplicateMachine(_)) => "conflict",
            _ => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyError {
    pub class: String,
    pub message: String,
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub result: Value,
    /// Workflow events emitted while handling the command.
    #[serde(default)]
    pub events: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ReplyError>,
}

impl Reply {
    fn from_result(res: Result<Value, SystemError>, events: Vec<String>) -> Self {
        match res {
            Ok(result) => Self { ok: true, result, events, error: None },
            Err(e) => Self { ok: false, result: Value::Null, events, error: Some(ReplyError { class: e.class().into(), message: e.to_string() }) },
        }
    }
}

/// Something pushed to stream subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum StreamItem {
    Event(WorkflowEvent),
    Action(FiredAction),
    Decision(Decision),
    Fleet(FleetRecord),
    Telemetry(ReducedFrame),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub seq: u64,
    pub time: SimTime,
    #[serde(flatten)]
    pub item: StreamItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Completed,
    Failed,
}

/// One execution of an activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRun {
    pub run_id: String,
    pub activity_id: String,
    pub incident_id: String,
    pub region: String,
    pub inputs: BTreeMap<String, Value>,
    pub arguments: BTreeMap<String, String>,
    pub state: RunState,
    pub started_at: SimTime,
    pub finished_at: Option<SimTime>,
    pub request_id: Option<String>,
    pub outputs: Map<String, Value>,
    /// Provenance for events this run causes.
    pub chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "owner", rename_all = "snake_case")]
pub enum JobOwner {
    Activity { run_id: String },
    Member { ensemble_id: String },
    Operator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OwnedJob {
    owner: JobOwner,
    incident_id: String,
    chain: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct System {
    config: SystemConfig,
    now: SimTime,
    fleet: Fleet,
    federator: Federator,
    gateway: Gateway,
    engine: RuleEngine,
    ensembles: EnsembleManager,
    runs: BTreeMap<String, ActivityRun>,
    jobs: BTreeMap<String, OwnedJob>,
    data: BTreeMap<String, Value>,
    grids: BTreeMap<String, FireGrid>,
    last_data_at: BTreeMap<String, SimTime>,
    /// Provenance for events about an ensemble, keyed by ensemble id.
    ensemble_chain: BTreeMap<String, Vec<String>>,
    /// Provenance for steering outcomes, keyed by message id.
    steering_chain: BTreeMap<String, Vec<String>>,
    /// Alert event id to acknowledged flag.
    alerts: BTreeMap<String, bool>,
    actions: Vec<FiredAction>,
    notifications: Vec<Notification>,
    pending: VecDeque<WorkflowEvent>,
    next_event: u64,
    next_run: u64,
    next_tick: SimTime,
    fleet_seen: usize,
    decisions_seen: usize,
}

impl System {
    pub fn new(config: SystemConfig) -> Result<Self, SystemError> {
        let mut sys = Self {
            federator: Federator::new(config.federator.clone()),
            ensembles: EnsembleManager::new(config.frame_buffer),
            next_tick: config.frame_interval.max(1),
            config,
            now: 0,
            fleet: Fleet::new(),
            gateway: Gateway::new(),
            engine: RuleEngine::new(),
            runs: BTreeMap::new(),
            jobs: BTreeMap::new(),
            data: BTreeMap::new(),
            grids: BTreeMap::new(),
            last_data_at: BTreeMap::new(),
            ensemble_chain: BTreeMap::new(),
            steering_chain: BTreeMap::new(),
            alerts: BTreeMap::new(),
            actions: Vec::new(),
            notifications: Vec::new(),
            pending: VecDeque::new(),
            next_event: 1,
            next_run: 1,
            fleet_seen: 0,
            decisions_seen: 0,
        };
        if sys.config.builtin_documents {
            for doc in assets::ACTIVITIES {
                sys.engine.register_activity(ActivityDocument::parse(doc)?)?;
            }
            sys.engine.register_rules(RuleDocument::parse(assets::WILDFIRE_RULES)?)?;
        }
        Ok(sys)
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn federator(&self) -> &Federator {
        &self.federator
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn engine(&self) -> &RuleEngine {
        &self.engine
    }

    pub fn ensembles(&self) -> &EnsembleManager {
        &self.ensembles
    }

    pub fn runs(&self) -> impl Iterator<Item = &ActivityRun> {
        self.runs.values()
    }

    pub fn data_item(&self, data_ref: &str) -> Option<&Value> {
        self.data.get(data_ref)
    }

    /// Every fired action, in firing order.
    pub fn actions(&self) -> &[FiredAction] {
        &self.actions
    }

    /// The action trace as newline-delimited records.
    pub fn trace_text(&self) -> String {
        self.actions.iter().map(|a| a.to_line() + "\n").collect()
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.notifications
    }

    /// Highest sequence number issued so far, 0 when none.
    pub fn last_seq(&self) -> u64 {
        self.notifications.last().map_or(0, |n| n.seq)
    }

    /// Notifications with `seq > since`, at most `limit` of them.
    pub fn notifications_since(&self, since: u64, limit: usize) -> &[Notification] {
        let start = self.notifications.partition_point(|n| n.seq <= since);
        let end = (start + limit).min(self.notifications.len());
        &self.notifications[start..end]
    }

    pub fn events(&self) -> impl Iterator<Item = &WorkflowEvent> {
        self.notifications.iter().filter_map(|n| match &n.item {
            StreamItem::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn event(&self, id: &str) -> Option<&WorkflowEvent> {
        self.events().find(|e| e.event_id == id)
    }

    /// Stable serialized form of the whole state.
    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, SystemError> {
        serde_json::from_str(text).map_err(|e| SystemError::Invalid(format!("bad snapshot: {e}")))
    }

    /// Applies one command. Rejected commands leave no partial effects beyond
    /// the events that record the rejection.
    pub fn apply(&mut self, command: &Command) -> Reply {
        let mark = self.notifications.len();
        let res = self.dispatch(command);
        self.settle();
        let events = self.notifications[mark..]
            .iter()
            .filter_map(|n| match &n.item {
                StreamItem::Event(e) => Some(e.event_id.clone()),
                _ => None,
            })
            .collect();
        Reply::from_result(res, events)
    }

    fn dispatch(&mut self, command: &Command) -> Result<Value, SystemError> {
        match command {
            Command::AddMachine { spec } => {
                self.fleet.add_machine(spec.clone())?;
                self.federator.register_machine(&self.fleet, MachineRegistration::new(spec.machine_id.clone()))?;
                Ok(json!({"machine_id": spec.machine_id}))
            }
            Command::InjectFailure { machine_id } => {
                self.fleet.inject_failure(machine_id, self.now)?;
                Ok(Value::Null)
            }
            Command::RestoreMachine { machine_id } => {
                self.fleet.restore(machine_id)?;
                Ok(Value::Null)
            }
            Command::AdvanceTo { time } => {
                if *time < self.now {
                    return Err(SystemError::Invalid(format!("time {time} is before now ({})", self.now)));
                }
                self.advance_to(*time)?;
                Ok(json!({"now": self.now}))
            }
            Command::CreateIncident { incident } => {
                if self.engine.rule_set(&incident.rule_set).is_none() {
                    return Err(SystemError::NotFound { what: "rule set", id: incident.rule_set.clone() });
                }
                if self.gateway.incident(&incident.incident_id).is_some() {
                    return Err(GatewayError::DuplicateIncident(incident.incident_id.clone()).into());
                }
                self.gateway.create_incident(incident.clone())?;
                self.federator.open_budget(&incident.incident_id, incident.tokens)?;
                let root = self.operator_root(&incident.incident_id, "create_incident", json!({"label": incident.label, "tokens": incident.tokens}));
                Ok(json!({"incident_id": incident.incident_id, "event_id": root.event_id}))
            }
            Command::RegisterSource { source } => {
                self.gateway.register_source(source.clone())?;
                let root = self.operator_root(&source.incident_id, "register_source", json!({"source_id": source.source_id}));
                Ok(json!({"source_id": source.source_id, "event_id": root.event_id}))
            }
            Command::Ingest { envelope } => self.ingest(envelope),
            Command::Operator { command } => self.operator(command),
            Command::LoadActivity { document } => {
                let doc = ActivityDocument::parse(document)?;
                let id = doc.id.clone();
                self.engine.register_activity(doc)?;
                self.operator_root("", "load_activity", json!({"activity_id": id}));
                Ok(json!({"activity_id": id}))
            }
            Command::LoadRules { document } => {
                let doc = RuleDocument::parse(document)?;
                let name = doc.rule_set.clone();
                self.engine.register_rules(doc)?;
                self.operator_root("", "load_rules", json!({"rule_set": name}));
                Ok(json!({"rule_set": name}))
            }
        }
    }

    fn ingest(&mut self, envelope: &SensorEnvelope) -> Result<Value, SystemError> {
        let accepted = match self.gateway.ingest(envelope)? {
            IngestOutcome::Duplicate { source_id, sequence_number } => {
                return Ok(json!({"outcome": "duplicate", "source_id": source_id, "sequence_number": sequence_number}));
            }
            IngestOutcome::Accepted(a) => a,
        };
        let event_id = self.take_event_id();
        let data_ref = format!("data/{event_id}");
        let region = accepted.content.region().to_string();
        let key = scope_key(&accepted.incident_id, &region);
        if let SensorContent::FirePerimeter { cells, .. } = &accepted.content {
            let grid = self.region_grid(&accepted.incident_id, &region).clone();
            let mut grid = grid;
            for &(r, c) in cells {
                if r < grid.height && c < grid.width && grid.get(r, c) == Cell::Unburnt {
                    grid.set(r, c, Cell::Burning);
                }
            }
            self.grids.insert(key.clone(), grid);
        }
        self.data.insert(data_ref.clone(), serde_json::to_value(&accepted.content).expect("content serializes"));
        self.last_data_at.insert(key, self.now);
        let mut event = WorkflowEvent::new(event_id.clone(), kinds::SENSOR_DATA_ARRIVED, accepted.incident_id, self.now);
        event.payload = accepted.content.fields();
        event.payload.insert("source_id".into(), accepted.source_id.into());
        event.payload.insert("sequence_number".into(), accepted.sequence_number.into());
        event.payload.insert("data_ref".into(), data_ref.into());
        self.emit(event);
        Ok(json!({"outcome": "accepted", "event_id": event_id}))
    }

    fn operator(&mut self, command: &OperatorCommand) -> Result<Value, SystemError> {
        let incident = self.operator_incident(command)?;
        let detail = serde_json::to_value(command).expect("command serializes");
        let root = self.operator_root(&incident, command.name(), detail);
        let chain = root.chain();
        let res = self.operator_effect(command, &incident, &chain);
        if let Err(e) = &res {
            let failed = self.new_event(kinds::ACTION_FAILED, &incident, chain).with_field("action", command.name()).with_field("reason", e.to_string());
            self.emit(failed);
        }
        res.map(|mut v| {
            if let Value::Object(m) = &mut v {
                m.insert("event_id".into(), root.event_id.clone().into());
            }
            v
        })
    }

    fn operator_incident(&self, command: &OperatorCommand) -> Result<String, SystemError> {
        let of_ensemble = |id: &str| self.ensembles.get(id).map(|e| e.incident_id.clone()).map_err(SystemError::from);
        match command {
            OperatorCommand::Steer { ensemble_id, .. } | OperatorCommand::StopEnsemble { ensemble_id } | OperatorCommand::StopMembers { ensemble_id, .. } => {
                of_ensemble(ensemble_id)
            }
            OperatorCommand::SpawnEnsemble { incident_id, .. } => {
                self.gateway.incident(incident_id).ok_or_else(|| GatewayError::UnknownIncident(incident_id.clone()))?;
                Ok(incident_id.clone())
            }
            OperatorCommand::SubmitJob { request } => {
                self.gateway.incident(&request.owning_incident_id).ok_or_else(|| GatewayError::UnknownIncident(request.owning_incident_id.clone()))?;
                Ok(request.owning_incident_id.clone())
            }
            OperatorCommand::CancelJob { request_id } => Ok(self.federator.job_status(request_id)?.request.owning_incident_id.clone()),
            OperatorCommand::AcknowledgeAlert { alert_id } => {
                if !self.alerts.contains_key(alert_id) {
                    return Err(SystemError::NotFound { what: "alert", id: alert_id.clone() });
                }
                Ok(self.event(alert_id).map(|e| e.incident_id.clone()).unwrap_or_default())
            }
        }
    }

    fn operator_root(&mut self, incident: &str, name: &str, detail: Value) -> WorkflowEvent {
        let id = self.take_event_id();
        let event = WorkflowEvent::new(id, kinds::OPERATOR_COMMAND, incident, self.now).with_field("command", name).with_field("detail", detail);
        self.emit(event.clone());
        event
    }

    pub(crate) fn take_event_id(&mut self) -> String {
        let id = format!("ev{:06}", self.next_event);
        self.next_event += 1;
        id
    }

    pub(crate) fn new_event(&mut self, kind: &str, incident: &str, chain: Vec<String>) -> WorkflowEvent {
        let id = self.take_event_id();
        WorkflowEvent::new(id, kind, incident, self.now).caused_by(chain)
    }

    pub(crate) fn notify(&mut self, item: StreamItem) {
        let seq = self.last_seq() + 1;
        self.notifications.push(Notification { seq, time: self.now, item });
    }

    /// Records an event and queues it for rule evaluation.
    pub(crate) fn emit(&mut self, event: WorkflowEvent) {
        self.notify(StreamItem::Event(event.clone()));
        self.pending.push_back(event);
    }

    pub(crate) fn region_grid(&mut self, incident: &str, region: &str) -> &FireGrid {
        let (w, h, seed) = (self.config.grid_width, self.config.grid_height, self.config.seed);
        self.grids.entry(scope_key(incident, region)).or_insert_with(|| {
            let mut g = FireGrid::new(w, h, seed);
            g.set(h / 2, w / 2, Cell::Burning);
            g
        })
    }

    fn state_view(&self) -> StateView {
        let mut view = StateView { last_data_at: self.last_data_at.clone(), ..Default::default() };
        for ((incident, region), count) in self.ensembles.active_counts() {
            view.ensembles.insert(scope_key(&incident, &region), EnsembleView { active: count > 0, count });
        }
        for run in self.runs.values().filter(|r| r.state == RunState::Running) {
            *view.running_activities.entry(format!("{}/{}", scope_key(&run.incident_id, &run.region), run.activity_id)).or_default() += 1;
        }
        view
    }

    fn advance_to(&mut self, until: SimTime) -> Result<(), SystemError> {
        loop {
            let next = [self.fleet.next_event_time(), Some(self.federator.next_poll_time()), Some(self.next_tick)].into_iter().flatten().min().expect("poll time");
            if next > until {
                break;
            }
            self.fleet.advance_to(next)?;
            self.now = next;
            self.settle();
            if self.federator.next_poll_time() == next {
                self.federator.poll_fleet(&mut self.fleet);
                self.settle();
            }
            if self.next_tick == next {
                let events = self.ensembles.tick(&self.federator, next);
                self.on_ensemble_events(events);
                self.next_tick += self.config.frame_interval.max(1);
                self.settle();
            }
        }
        self.fleet.advance_to(until)?;
        self.now = until;
        self.settle();
        Ok(())
    }

    /// Pumps fleet records, federator events, reduced frames and queued
    /// workflow events until nothing is left to do.
    fn settle(&mut self) {
        loop {
            let mut progressed = false;
            while self.fleet_seen < self.fleet.log().len() {
                let record = self.fleet.log()[self.fleet_seen].clone();
                self.fleet_seen += 1;
                progressed = true;
                match (record.transition, &record.job) {
                    (FleetTransition::Running, Some(job)) => self.federator.claim(&mut self.fleet, job),
                    (FleetTransition::Completed, Some(job)) => self.federator.report_exit(&mut self.fleet, job, record.time),
                    _ => {}
                }
                self.notify(StreamItem::Fleet(record));
            }
            while self.decisions_seen < self.federator.decisions().len() {
                let d = self.federator.decisions()[self.decisions_seen].clone();
                self.decisions_seen += 1;
                self.notify(StreamItem::Decision(d));
            }
            for ev in self.federator.drain_events() {
                progressed = true;
                self.on_federator_event(ev);
            }
            for frame in self.ensembles.drain_reduced() {
                self.notify(StreamItem::Telemetry(frame));
            }
            if let Some(event) = self.pending.pop_front() {
                progressed = true;
                self.evaluate(event);
            }
            if !progressed {
                break;
            }
        }
    }

    fn evaluate(&mut self, event: WorkflowEvent) {
        if event.provenance.len() >= MAX_CHAIN {
            if event.kind != kinds::WARNING {
                let w = self.new_event(kinds::WARNING, &event.incident_id, event.chain()).with_field("message", "provenance chain too deep; not evaluated");
                self.notify(StreamItem::Event(w));
            }
            return;
        }
        let Some(rule_set) = self.gateway.incident(&event.incident_id).map(|i| i.rule_set.clone()) else {
            return;
        };
        let view = self.state_view();
        let eval = self.engine.on_event(&rule_set, &event, &view);
        for diag in eval.diagnostics {
            let kind = match diag.kind {
                DiagnosticKind::Warning => kinds::WARNING,
                DiagnosticKind::BindingError => kinds::BINDING_ERROR,
            };
            let e = self.new_event(kind, &event.incident_id, event.chain()).with_field("rule_id", diag.rule_id).with_field("message", diag.message);
            self.emit(e);
        }
        for action in &eval.actions {
            self.actions.push(action.clone());
            self.notify(StreamItem::Action(action.clone()));
        }
        for action in eval.actions {
            self.execute(&event, action);
        }
    }

    fn on_federator_event(&mut self, ev: FederatorEvent) {
        match ev {
            FederatorEvent::Completed { request_id, .. } => {
                if let Some(OwnedJob { owner: JobOwner::Activity { run_id }, .. }) = self.jobs.get(&request_id).cloned() {
                    self.finish_job_run(&run_id);
                }
            }
            FederatorEvent::FailedRescheduling { request_id, reason } => {
                self.raise_alert(&request_id, "failed_rescheduling", &reason);
                if let Some(OwnedJob { owner: JobOwner::Activity { run_id }, .. }) = self.jobs.get(&request_id).cloned() {
                    self.fail_run(&run_id, &reason);
                }
            }
            FederatorEvent::Abandoned { request_id } => {
                if let Some(OwnedJob { owner: JobOwner::Activity { run_id }, .. }) = self.jobs.get(&request_id).cloned() {
                    self.fail_run(&run_id, "job abandoned");
                }
            }
            FederatorEvent::DeadlineAtRisk { request_id } => self.raise_alert(&request_id, "deadline_at_risk", "predicted completion misses the deadline"),
            _ => {}
        }
    }

    fn raise_alert(&mut self, request_id: &str, alert: &str, message: &str) {
        let Some(job) = self.jobs.get(request_id).cloned() else {
            return;
        };
        let e = self.new_event("alert", &job.incident_id, job.chain).with_field("alert", alert).with_field("request_id", request_id).with_field("message", message);
        self.alerts.insert(e.event_id.clone(), false);
        self.emit(e);
    }
}
