//! Ensembles of steerable members: spawning by parameter sweep, per-step
//! telemetry through a reduction pipeline, ordered steering delivery and
//! stop on demand.

mod handoff;
pub mod protocol;
mod reduce;
mod steering;
mod sweep;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use handoff::{HandOff, SharedHandOff};
pub use reduce::{PipelineSpec, Reduced, ReducedFrame, Reducer, TelemetryFrame};
pub use steering::{Delivery, Inbox, Outbox, SteeringMessage, SteeringTarget};
pub use sweep::cartesian;

use crate::federator::{FederatedState, Federator, FederatorError, JobRequest};
use crate::fleet::MachineConnector;
use crate::workloads::{FireModel, ParamValue, ParamVector};
use crate::SimTime;

pub const DEFAULT_FRAME_BUFFER: usize = 64;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum EnsembleError {
    #[error("unknown ensemble {0:?}")]
    UnknownEnsemble(String),
    #[error("unknown member {0:?}")]
    UnknownMember(String),
    #[error("steering target matches no live member: {0}")]
    UnknownTarget(String),
    #[error("parameter {0:?} is not steerable")]
    NotSteerable(String),
    #[error("invalid steering value: {0}")]
    InvalidValue(String),
    #[error("ensemble {0:?} is not active")]
    NotActive(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("ensemble needs {needed} tokens but only {available} remain")]
    InsufficientTokens { needed: f64, available: f64 },
    #[error("frame from {member_id:?} has dimensions {got:?}, expected {expected:?}")]
    DimensionMismatch { member_id: String, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Federator(#[from] FederatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleState {
    Active,
    Stopping,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberState {
    /// Submitted, waiting in a queue.
    Pending,
    Running,
    Finished,
    Stopped,
    Failed,
}

impl MemberState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Finished | Self::Stopped | Self::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberHandle {
    pub member_id: String,
    pub request_id: String,
    pub params: ParamVector,
    pub state: MemberState,
    /// Highest frame sequence accepted from this member.
    pub last_frame_seq: Option<u64>,
    pub frame_dims: Option<(usize, usize)>,
    pub steps: u64,
    pub restarts: u32,
    pub outbox: Outbox,
    pub inbox: Inbox,
    pub model: FireModel,
    initial: FireModel,
    emitted: u64,
}

impl MemberHandle {
    fn matches(&self, target: &SteeringTarget) -> bool {
        match target {
            SteeringTarget::All => true,
            SteeringTarget::Member { member_id } => *member_id == self.member_id,
            SteeringTarget::Where { param, equals } => self.current_param(param).as_ref() == Some(equals),
        }
    }

    fn current_param(&self, name: &str) -> Option<ParamValue> {
        match name {
            "wind_direction" => Some(ParamValue::Text(self.model.wind.direction.as_str().to_string())),
            "wind_strength" => Some(ParamValue::Number(self.model.wind.strength)),
            "spread_prob" => Some(ParamValue::Number(self.model.spread_prob)),
            other => self.params.get(other).cloned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleHandle {
    pub ensemble_id: String,
    pub incident_id: String,
    pub region: String,
    pub template_id: String,
    pub template: JobRequest,
    pub members: Vec<MemberHandle>,
    pub state: EnsembleState,
    pub pipeline: PipelineSpec,
    pub provenance: Vec<String>,
    pub created_at: SimTime,
    pub stale_frames: u64,
    buffer: HandOff<TelemetryFrame>,
    telemetry: Vec<ReducedFrame>,
}

impl EnsembleHandle {
    pub fn member(&self, id: &str) -> Option<&MemberHandle> {
        self.members.iter().find(|m| m.member_id == id)
    }

    pub fn telemetry(&self) -> &[ReducedFrame] {
        &self.telemetry
    }

    /// One line per reduced frame.
    pub fn telemetry_log(&self) -> String {
        self.telemetry.iter().map(|f| f.to_line() + "\n").collect()
    }

    pub fn dropped_frames(&self) -> u64 {
        self.buffer.dropped()
    }

    pub fn live_members(&self) -> impl Iterator<Item = &MemberHandle> {
        self.members.iter().filter(|m| !m.state.is_terminal())
    }
}

/// Everything needed to launch an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnSpec {
    pub incident_id: String,
    pub region: String,
    pub template_id: String,
    /// Federated request template; `request_id` is replaced per member.
    pub job: JobRequest,
    pub base_params: ParamVector,
    pub sweep: BTreeMap<String, Vec<ParamValue>>,
    pub initial: FireModel,
    pub pipeline: PipelineSpec,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryPlan {
    pub message_id: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EnsembleEvent {
    Spawned { ensemble_id: String, members: Vec<String> },
    MemberStarted { ensemble_id: String, member_id: String },
    MemberRestarted { ensemble_id: String, member_id: String },
    MemberFinished { ensemble_id: String, member_id: String, outcome: MemberState },
    SteeringApplied { ensemble_id: String, member_id: String, message_id: String, step: u64 },
    Stopped { ensemble_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManager {
    ensembles: BTreeMap<String, EnsembleHandle>,
    next_id: u64,
    buffer_capacity: usize,
    unknown_frames: u64,
    #[serde(skip)]
    reduced_outbox: Vec<ReducedFrame>,
}

impl Default for EnsembleManager {
    fn default() -> Self {
        Self::new(DEFAULT_FRAME_BUFFER)
    }
}

const SWEEPABLE_EXTRA: [&str; 1] = ["seed"];

impl EnsembleManager {
    pub fn new(buffer_capacity: usize) -> Self {
        Self { ensembles: BTreeMap::new(), next_id: 0, buffer_capacity, unknown_frames: 0, reduced_outbox: Vec::new() }
    }

    pub fn ensembles(&self) -> impl Iterator<Item = &EnsembleHandle> {
        self.ensembles.values()
    }

    pub fn get(&self, id: &str) -> Result<&EnsembleHandle, EnsembleError> {
        self.ensembles.get(id).ok_or_else(|| EnsembleError::UnknownEnsemble(id.to_string()))
    }

    pub fn unknown_frames(&self) -> u64 {
        self.unknown_frames
    }

    /// Reduced frames produced since the last call.
    pub fn drain_reduced(&mut self) -> Vec<ReducedFrame> {
        std::mem::take(&mut self.reduced_outbox)
    }

    /// Number of active ensembles per `(incident, region)`.
    pub fn active_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for e in self.ensembles.values().filter(|e| e.state == EnsembleState::Active) {
            *out.entry((e.incident_id.clone(), e.region.clone())).or_default() += 1;
        }
        out
    }

    fn configure(initial: &FireModel, params: &ParamVector, index: usize) -> Result<FireModel, String> {
        let mut model = initial.clone();
        model.grid.reseed(initial.grid.seed.wrapping_add(index as u64));
        for (name, value) in params {
            if name == "seed" {
                let seed = value.as_f64().filter(|s| *s >= 0.0 && s.fract() == 0.0).ok_or("seed must be a non-negative integer")?;
                model.grid.reseed(seed as u64);
            } else {
                model.set_param(name, value).map_err(|e| e.to_string())?;
            }
        }
        Ok(model)
    }

    /// Submits one federated request per sweep point. Either every member is
    /// submitted or none is.
    pub fn spawn(&mut self, fed: &mut Federator, conn: &mut dyn MachineConnector, spec: SpawnSpec) -> Result<(String, Vec<EnsembleEvent>), EnsembleError> {
        for name in spec.sweep.keys().chain(spec.base_params.keys()) {
            if !FireModel::is_steerable(name) && !SWEEPABLE_EXTRA.contains(&name.as_str()) {
                return Err(EnsembleError::InvalidSweep(format!("unknown parameter {name:?}")));
            }
        }
        let points = cartesian(&spec.base_params, &spec.sweep)?;
        let models =
            points.iter().enumerate().map(|(i, p)| Self::configure(&spec.initial, p, i)).collect::<Result<Vec<_>, _>>().map_err(EnsembleError::InvalidSweep)?;

        let needed = fed.worst_case_cost(&spec.job) * points.len() as f64;
        let available = fed.budget(&spec.job.owning_incident_id).map(|b| b.remaining()).ok_or_else(|| FederatorError::UnknownIncident(spec.job.owning_incident_id.clone()))?;
        if needed > available + 1e-9 {
            return Err(EnsembleError::InsufficientTokens { needed, available });
        }

        let ensemble_id = format!("ens{:04}", self.next_id);
        let mut members = Vec::new();
        for (i, (params, model)) in points.into_iter().zip(models).enumerate() {
            let member_id = format!("{ensemble_id}.m{i}");
            let mut job = spec.job.clone();
            job.request_id = member_id.clone();
            if let Err(err) = fed.submit_federated(conn, job) {
                for m in &members {
                    let m: &MemberHandle = m;
                    let _ = fed.cancel_request(conn, &m.request_id);
                }
                return Err(err.into());
            }
            members.push(MemberHandle {
                request_id: member_id.clone(),
                member_id,
                params,
                state: MemberState::Pending,
                last_frame_seq: None,
                frame_dims: None,
                steps: 0,
                restarts: 0,
                outbox: Outbox::default(),
                inbox: Inbox::default(),
                initial: model.clone(),
                model,
                emitted: 0,
            });
        }
        self.next_id += 1;
        let ids = members.iter().map(|m| m.member_id.clone()).collect();
        self.ensembles.insert(
            ensemble_id.clone(),
            EnsembleHandle {
                ensemble_id: ensemble_id.clone(),
                incident_id: spec.incident_id,
                region: spec.region,
                template_id: spec.template_id,
                template: spec.job,
                members,
                state: EnsembleState::Active,
                pipeline: spec.pipeline,
                provenance: spec.provenance,
                created_at: conn.now(),
                stale_frames: 0,
                buffer: HandOff::new(self.buffer_capacity),
                telemetry: Vec::new(),
            },
        );
        Ok((ensemble_id.clone(), vec![EnsembleEvent::Spawned { ensemble_id, members: ids }]))
    }

    /// One frame boundary for every member: follow placement state, deliver
    /// and apply pending steering, step running models and reduce their
    /// frames.
    pub fn tick(&mut self, fed: &Federator, now: SimTime) -> Vec<EnsembleEvent> {
        let mut events = Vec::new();
        let mut reduced = Vec::new();
        for ens in self.ensembles.values_mut() {
            if ens.state == EnsembleState::Stopped {
                continue;
            }
            let eid = ens.ensemble_id.clone();
            for m in ens.members.iter_mut().filter(|m| !m.state.is_terminal()) {
                let Ok(record) = fed.job_status(&m.request_id) else { continue };
                let finished = |outcome| EnsembleEvent::MemberFinished { ensemble_id: eid.clone(), member_id: m.member_id.clone(), outcome };
                match record.federated_state {
                    FederatedState::Completed => {
                        m.state = MemberState::Finished;
                        events.push(finished(MemberState::Finished));
                        continue;
                    }
                    FederatedState::Abandoned => {
                        m.state = MemberState::Stopped;
                        events.push(finished(MemberState::Stopped));
                        continue;
                    }
                    FederatedState::FailedRescheduling => {
                        m.state = MemberState::Failed;
                        events.push(finished(MemberState::Failed));
                        continue;
                    }
                    FederatedState::Pending | FederatedState::Placed => {
                        m.state = MemberState::Pending;
                        continue;
                    }
                    FederatedState::Running => {}
                }
                if m.state != MemberState::Running {
                    if m.steps > 0 {
                        m.model = m.initial.clone();
                        m.steps = 0;
                        m.restarts += 1;
                        events.push(EnsembleEvent::MemberRestarted { ensemble_id: eid.clone(), member_id: m.member_id.clone() });
                    } else if m.restarts == 0 {
                        events.push(EnsembleEvent::MemberStarted { ensemble_id: eid.clone(), member_id: m.member_id.clone() });
                    }
                    m.state = MemberState::Running;
                }
                for d in m.outbox.unacked().to_vec() {
                    m.inbox.receive(d);
                }
                for msg in m.inbox.take_ready() {
                    for (name, value) in &msg.payload {
                        let _ = m.model.set_param(name, value);
                    }
                    events.push(EnsembleEvent::SteeringApplied {
                        ensemble_id: eid.clone(),
                        member_id: m.member_id.clone(),
                        message_id: msg.message_id.clone(),
                        step: m.steps,
                    });
                }
                m.outbox.ack(m.inbox.next_expected());
                m.model.step();
                m.steps += 1;
                m.emitted += 1;
                ens.buffer.push(TelemetryFrame {
                    member_id: m.member_id.clone(),
                    seq: m.emitted,
                    sim_time: now,
                    rows: m.model.grid.height,
                    cols: m.model.grid.width,
                    values: m.model.grid.values(),
                });
            }
            let frames: Vec<TelemetryFrame> = ens.buffer.drain().collect();
            for frame in frames {
                if let Ok(Some(r)) = accept_into(ens, &frame) {
                    reduced.push(r);
                }
            }
            if ens.members.iter().all(|m| m.state.is_terminal()) {
                ens.state = EnsembleState::Stopped;
                events.push(EnsembleEvent::Stopped { ensemble_id: eid });
            }
        }
        self.reduced_outbox.extend(reduced);
        events
    }

    /// Accepts a frame pushed from outside the tick loop. Stale or duplicate
    /// sequence numbers are dropped and counted.
    pub fn accept_frame(&mut self, frame: &TelemetryFrame) -> Result<Option<ReducedFrame>, EnsembleError> {
        let eid = frame.member_id.split('.').next().unwrap_or_default();
        let Some(ens) = self.ensembles.get_mut(eid) else {
            self.unknown_frames += 1;
            return Err(EnsembleError::UnknownMember(frame.member_id.clone()));
        };
        match accept_into(ens, frame) {
            Err(EnsembleError::UnknownMember(m)) => {
                self.unknown_frames += 1;
                Err(EnsembleError::UnknownMember(m))
            }
            Ok(Some(r)) => {
                self.reduced_outbox.push(r.clone());
                Ok(Some(r))
            }
            other => other,
        }
    }

    /// Queues a steering message for every live member it targets.
    pub fn steer(&mut self, msg: SteeringMessage) -> Result<DeliveryPlan, EnsembleError> {
        let ens = self.ensembles.get_mut(&msg.ensemble_id).ok_or_else(|| EnsembleError::UnknownEnsemble(msg.ensemble_id.clone()))?;
        if ens.state != EnsembleState::Active {
            return Err(EnsembleError::NotActive(msg.ensemble_id.clone()));
        }
        if msg.payload.is_empty() {
            return Err(EnsembleError::InvalidValue("empty payload".into()));
        }
        for name in msg.payload.keys() {
            if !FireModel::is_steerable(name) {
                return Err(EnsembleError::NotSteerable(name.clone()));
            }
        }
        let targets: Vec<usize> = ens.members.iter().enumerate().filter(|(_, m)| !m.state.is_terminal() && m.matches(&msg.target)).map(|(i, _)| i).collect();
        let Some(&first) = targets.first() else {
            return Err(EnsembleError::UnknownTarget(serde_json::to_string(&msg.target).unwrap_or_default()));
        };
        let mut probe = ens.members[first].model.clone();
        for (name, value) in &msg.payload {
            probe.set_param(name, value).map_err(|e| EnsembleError::InvalidValue(e.to_string()))?;
        }
        let mut members = Vec::new();
        for i in targets {
            let m = &mut ens.members[i];
            m.outbox.push(msg.clone());
            members.push(m.member_id.clone());
        }
        Ok(DeliveryPlan { message_id: msg.message_id, members })
    }

    /// Cancels the selected live members. The ensemble stays active unless
    /// every member is now terminal.
    pub fn stop_members(
        &mut self,
        fed: &mut Federator,
        conn: &mut dyn MachineConnector,
        ensemble_id: &str,
        target: &SteeringTarget,
    ) -> Result<(Vec<String>, Vec<EnsembleEvent>), EnsembleError> {
        let ens = self.ensembles.get_mut(ensemble_id).ok_or_else(|| EnsembleError::UnknownEnsemble(ensemble_id.to_string()))?;
        if ens.state == EnsembleState::Stopped {
            return Err(EnsembleError::NotActive(ensemble_id.to_string()));
        }
        let mut stopped = Vec::new();
        let mut events = Vec::new();
        for m in ens.members.iter_mut().filter(|m| !m.state.is_terminal() && m.matches(target)) {
            fed.cancel_request(conn, &m.request_id)?;
            m.state = MemberState::Stopped;
            stopped.push(m.member_id.clone());
            events.push(EnsembleEvent::MemberFinished { ensemble_id: ensemble_id.to_string(), member_id: m.member_id.clone(), outcome: MemberState::Stopped });
        }
        if ens.members.iter().all(|m| m.state.is_terminal()) {
            ens.state = EnsembleState::Stopped;
            events.push(EnsembleEvent::Stopped { ensemble_id: ensemble_id.to_string() });
        }
        Ok((stopped, events))
    }

    pub fn stop_ensemble(
        &mut self,
        fed: &mut Federator,
        conn: &mut dyn MachineConnector,
        ensemble_id: &str,
    ) -> Result<(Vec<String>, Vec<EnsembleEvent>), EnsembleError> {
        let ens = self.ensembles.get_mut(ensemble_id).ok_or_else(|| EnsembleError::UnknownEnsemble(ensemble_id.to_string()))?;
        if ens.state == EnsembleState::Active {
            ens.state = EnsembleState::Stopping;
        }
        self.stop_members(fed, conn, ensemble_id, &SteeringTarget::All)
    }
}

fn accept_into(ens: &mut EnsembleHandle, frame: &TelemetryFrame) -> Result<Option<ReducedFrame>, EnsembleError> {
    let Some(m) = ens.members.iter_mut().find(|m| m.member_id == frame.member_id) else {
        return Err(EnsembleError::UnknownMember(frame.member_id.clone()));
    };
    if m.state.is_terminal() || m.last_frame_seq.is_some_and(|last| frame.seq <= last) {
        ens.stale_frames += 1;
        return Ok(None);
    }
    if !frame.is_well_formed() {
        return Err(EnsembleError::DimensionMismatch { member_id: frame.member_id.clone(), expected: m.frame_dims.unwrap_or((0, 0)), got: frame.dims() });
    }
    if let Some(dims) = m.frame_dims {
        if dims != frame.dims() {
            return Err(EnsembleError::DimensionMismatch { member_id: frame.member_id.clone(), expected: dims, got: frame.dims() });
        }
    }
    m.frame_dims = Some(frame.dims());
    m.last_frame_seq = Some(frame.seq);
    let reduced = ens.pipeline.run(&ens.ensemble_id, frame);
    ens.telemetry.push(reduced.clone());
    Ok(Some(reduced))
}
