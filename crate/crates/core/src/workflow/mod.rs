//! Activity documents, condition rules and the event-driven rule engine that
//! chains activities together.

mod activity;
mod engine;
mod expr;
mod rules;
mod yaml;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use activity::{slots, substitute, ActivityDocument, ExecutorBinding, JobTemplate, LocalStep, Port, PortType, ACTIVITY_VERSION};
pub use engine::{
    resolve_value, scope_key, value_text, Diagnostic, DiagnosticKind, EnsembleView, Evaluation, FiredAction, ResolvedAction, RuleEngine,
    StateView, TargetSelector,
};
pub use expr::{CmpOp, Condition, EvalError, Expr, ExprError};
pub use rules::{reference, Action, Binding, EnsembleSelector, Rule, RuleDocument, Trigger};
pub use yaml::DocumentError;

use crate::SimTime;

pub mod kinds {
    pub const SENSOR_DATA_ARRIVED: &str = "sensor_data_arrived";
    pub const OPERATOR_COMMAND: &str = "operator_command";
    pub const ACTIVITY_STARTED: &str = "activity_started";
    pub const ACTIVITY_COMPLETED: &str = "activity_completed";
    pub const ACTIVITY_FAILED: &str = "activity_failed";
    pub const ENSEMBLE_SPAWNED: &str = "ensemble_spawned";
    pub const ENSEMBLE_UPDATED: &str = "ensemble_updated";
    pub const ENSEMBLE_STOPPED: &str = "ensemble_stopped";
    pub const ENSEMBLE_MEMBER_FINISHED: &str = "ensemble_member_finished";
    pub const STEERING_APPLIED: &str = "steering_applied";
    pub const WARNING: &str = "warning";
    pub const BINDING_ERROR: &str = "binding_error";
    pub const ACTION_FAILED: &str = "action_failed";

    /// Kinds that may start a provenance chain.
    pub const ROOTS: [&str; 2] = [SENSOR_DATA_ARRIVED, OPERATOR_COMMAND];
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum WorkflowError {
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error("rule {rule_id:?} references unknown activity {activity:?}")]
    UnknownActivity { rule_id: String, activity: String },
    #[error("rule {rule_id:?} binds {input:?}, which {activity:?} does not declare")]
    UnknownInput { rule_id: String, activity: String, input: String },
    #[error("rule {rule_id:?} spawns {activity:?}, which is not a federated job")]
    NotAJob { rule_id: String, activity: String },
}

/// Something that happened, with the chain of events that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowEvent {
    pub event_id: String,
    pub kind: String,
    pub incident_id: String,
    pub timestamp: SimTime,
    #[serde(default)]
    pub payload: Map<String, Value>,
    /// Causing event ids, root first. Empty for root events.
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl WorkflowEvent {
    pub fn new(event_id: impl Into<String>, kind: impl Into<String>, incident_id: impl Into<String>, timestamp: SimTime) -> Self {
        Self { event_id: event_id.into(), kind: kind.into(), incident_id: incident_id.into(), timestamp, payload: Map::new(), provenance: Vec::new() }
    }

    pub fn with_field(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn caused_by(mut self, chain: Vec<String>) -> Self {
        self.provenance = chain;
        self
    }

    /// Provenance for anything this event causes.
    pub fn chain(&self) -> Vec<String> {
        let mut c = self.provenance.clone();
        c.push(self.event_id.clone());
        c
    }

    pub fn is_root(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn region(&self) -> Option<&str> {
        self.payload.get("region").and_then(Value::as_str)
    }

    /// Payload plus the envelope fields, as seen by conditions.
    pub fn as_object(&self) -> Value {
        let mut obj = self.payload.clone();
        obj.insert("event_id".into(), self.event_id.clone().into());
        obj.insert("kind".into(), self.kind.clone().into());
        obj.insert("incident_id".into(), self.incident_id.clone().into());
        obj.insert("timestamp".into(), self.timestamp.into());
        Value::Object(obj)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

#[cfg(test)]
mod tests;
