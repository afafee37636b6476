use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::activity::ActivityDocument;
use super::expr::{lookup, EvalError};
use super::rules::{reference, Action, Binding, EnsembleSelector, Rule, RuleDocument};
use super::{WorkflowError, WorkflowEvent};
use crate::SimTime;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleView {
    pub active: bool,
    pub count: usize,
}

/// Immutable snapshot of system state that conditions may read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateView {
    /// Keyed by `incident/region`.
    pub ensembles: BTreeMap<String, EnsembleView>,
    /// Keyed by `incident/region`.
    pub last_data_at: BTreeMap<String, SimTime>,
    /// Live activity runs keyed by `incident/region/activity`.
    pub running_activities: BTreeMap<String, usize>,
}

pub fn scope_key(incident_id: &str, region: &str) -> String {
    format!("{incident_id}/{region}")
}

impl StateView {
    pub fn context(&self, event: &WorkflowEvent) -> Value {
        let key = scope_key(&event.incident_id, event.region().unwrap_or(""));
        let ens = self.ensembles.get(&key).cloned().unwrap_or_default();
        let prefix = format!("{key}/");
        let running: Map<String, Value> = self
            .running_activities
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k[prefix.len()..].to_string(), json!(v)))
            .collect();
        json!({
            "event": event.as_object(),
            "ensemble": {"active": ens.active, "count": ens.count},
            "state": {"last_data_at": self.last_data_at.get(&key), "running": running},
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelector {
    pub incident_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

/// An action with every binding resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ResolvedAction {
    StartActivity { activity: String, inputs: BTreeMap<String, Value> },
    UpdateEnsemble { selector: TargetSelector, payload: BTreeMap<String, Value> },
    SpawnEnsemble { template: String, inputs: BTreeMap<String, Value>, sweep: BTreeMap<String, Vec<Value>> },
    StopEnsemble { selector: TargetSelector },
    EmitEvent { kind: String, fields: BTreeMap<String, Value> },
}

impl ResolvedAction {
    pub fn name(&self) -> &'static str {
        match self {
            Self::StartActivity { .. } => "start_activity",
            Self::UpdateEnsemble { .. } => "update_ensemble",
            Self::SpawnEnsemble { .. } => "spawn_ensemble",
            Self::StopEnsemble { .. } => "stop_ensemble",
            Self::EmitEvent { .. } => "emit_event",
        }
    }

    /// Activity or template the action targets, if any.
    pub fn target(&self) -> Option<&str> {
        match self {
            Self::StartActivity { activity, .. } => Some(activity),
            Self::SpawnEnsemble { template, .. } => Some(template),
            Self::UpdateEnsemble { selector, .. } | Self::StopEnsemble { selector } => selector.template.as_deref(),
            Self::EmitEvent { kind, .. } => Some(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiredAction {
    pub action_id: String,
    pub rule_id: String,
    pub event_id: String,
    pub time: SimTime,
    /// Causing events, root first, ending with the triggering event.
    pub provenance: Vec<String>,
    #[serde(flatten)]
    pub action: ResolvedAction,
}

impl FiredAction {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    Warning,
    BindingError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub rule_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub actions: Vec<FiredAction>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Registered activities and rule sets. Evaluation is pure: it returns the
/// actions to perform and never executes them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleEngine {
    activities: BTreeMap<String, ActivityDocument>,
    rule_sets: BTreeMap<String, Vec<Rule>>,
}

impl RuleEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_activity(&mut self, doc: ActivityDocument) -> Result<(), WorkflowError> {
        doc.validate()?;
        self.activities.insert(doc.id.clone(), doc);
        Ok(())
    }

    pub fn activity(&self, id: &str) -> Option<&ActivityDocument> {
        self.activities.get(id)
    }

    pub fn activities(&self) -> impl Iterator<Item = &ActivityDocument> {
        self.activities.values()
    }

    pub fn rule_set(&self, name: &str) -> Option<&[Rule]> {
        self.rule_sets.get(name).map(Vec::as_slice)
    }

    pub fn rule_set_names(&self) -> impl Iterator<Item = &str> {
        self.rule_sets.keys().map(String::as_str)
    }

    /// Registers (or replaces) a rule set after checking that every
    /// referenced activity exists and every binding names a declared input.
    pub fn register_rules(&mut self, doc: RuleDocument) -> Result<(), WorkflowError> {
        for rule in &doc.rules {
            for action in &rule.actions {
                let (activity, inputs) = match action {
                    Action::StartActivity { activity, inputs } => (activity, inputs),
                    Action::SpawnEnsemble { template, inputs, .. } => (template, inputs),
                    _ => continue,
                };
                let act = self.activities.get(activity).ok_or_else(|| WorkflowError::UnknownActivity { rule_id: rule.id.clone(), activity: activity.clone() })?;
                for name in inputs.keys() {
                    if act.input(name).is_none() {
                        return Err(WorkflowError::UnknownInput { rule_id: rule.id.clone(), activity: activity.clone(), input: name.clone() });
                    }
                }
                if matches!(action, Action::SpawnEnsemble { .. }) && act.job_template().is_none() {
                    return Err(WorkflowError::NotAJob { rule_id: rule.id.clone(), activity: activity.clone() });
                }
            }
        }
        self.rule_sets.insert(doc.rule_set, doc.rules);
        Ok(())
    }

    /// Evaluates every rule of `rule_set` against one event and one state
    /// snapshot. Matching rules fire in registration order, then action order.
    pub fn on_event(&self, rule_set: &str, event: &WorkflowEvent, view: &StateView) -> Evaluation {
        let mut out = Evaluation::default();
        let Some(rules) = self.rule_sets.get(rule_set) else { return out };
        let ctx = view.context(event);
        let mut provenance = event.provenance.clone();
        provenance.push(event.event_id.clone());
        for rule in rules {
            if !triggers(rule, event, &ctx) {
                continue;
            }
            match rule.when.evaluate(&ctx) {
                Ok(true) => {}
                Ok(false) => continue,
                Err(e) => {
                    let message = match e {
                        EvalError::MissingField(f) => format!("condition `{}` reads missing field {f}; treated as false", rule.when.source()),
                        EvalError::TypeMismatch(m) => format!("condition `{}`: {m}; treated as false", rule.when.source()),
                    };
                    out.diagnostics.push(Diagnostic { kind: DiagnosticKind::Warning, rule_id: rule.id.clone(), message });
                    continue;
                }
            }
            for action in &rule.actions {
                match self.resolve(action, event, &ctx) {
                    Ok(resolved) => out.actions.push(FiredAction {
                        action_id: format!("{}/a{}", event.event_id, out.actions.len()),
                        rule_id: rule.id.clone(),
                        event_id: event.event_id.clone(),
                        time: event.timestamp,
                        provenance: provenance.clone(),
                        action: resolved,
                    }),
                    Err(message) => out.diagnostics.push(Diagnostic { kind: DiagnosticKind::BindingError, rule_id: rule.id.clone(), message }),
                }
            }
        }
        out
    }

    fn resolve(&self, action: &Action, event: &WorkflowEvent, ctx: &Value) -> Result<ResolvedAction, String> {
        let selector = |s: &EnsembleSelector| -> Result<TargetSelector, String> {
            let region = match &s.region {
                Some(b) => Some(value_text(&resolve_value(b, ctx).ok_or_else(|| format!("unresolved selector region {b}"))?)),
                None => event.region().map(str::to_string),
            };
            Ok(TargetSelector { incident_id: event.incident_id.clone(), template: s.template.clone(), region })
        };
        Ok(match action {
            Action::StartActivity { activity, inputs } => {
                ResolvedAction::StartActivity { activity: activity.clone(), inputs: self.bind_inputs(activity, inputs, ctx)? }
            }
            Action::SpawnEnsemble { template, inputs, sweep } => {
                ResolvedAction::SpawnEnsemble { template: template.clone(), inputs: self.bind_inputs(template, inputs, ctx)?, sweep: sweep.clone() }
            }
            Action::UpdateEnsemble { selector: s, payload } => {
                let mut out = BTreeMap::new();
                for (k, b) in payload {
                    out.insert(k.clone(), resolve_value(b, ctx).ok_or_else(|| format!("steering field {k:?} is unbound: {b}"))?);
                }
                ResolvedAction::UpdateEnsemble { selector: selector(s)?, payload: out }
            }
            Action::StopEnsemble { selector: s } => ResolvedAction::StopEnsemble { selector: selector(s)? },
            Action::EmitEvent { kind, fields } => {
                let mut out = BTreeMap::new();
                for (k, b) in fields {
                    if let Some(v) = resolve_value(b, ctx) {
                        out.insert(k.clone(), v);
                    }
                }
                ResolvedAction::EmitEvent { kind: kind.clone(), fields: out }
            }
        })
    }

    fn bind_inputs(&self, activity: &str, bindings: &BTreeMap<String, Binding>, ctx: &Value) -> Result<BTreeMap<String, Value>, String> {
        let doc = self.activities.get(activity).ok_or_else(|| format!("unknown activity {activity:?}"))?;
        let mut out = BTreeMap::new();
        for port in &doc.inputs {
            match bindings.get(&port.name).and_then(|b| resolve_value(b, ctx)) {
                Some(v) => {
                    out.insert(port.name.clone(), v);
                }
                None if port.optional => {}
                None => return Err(format!("input {:?} of {activity:?} is unbound", port.name)),
            }
        }
        Ok(out)
    }
}

/// Resolves a binding; `None` when a reference points at a missing or null
/// field.
pub fn resolve_value(binding: &Binding, ctx: &Value) -> Option<Value> {
    match reference(binding) {
        Some(path) => lookup(ctx, &path).filter(|v| !v.is_null()).cloned(),
        None => Some(binding.clone()),
    }
}

pub fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn triggers(rule: &Rule, event: &WorkflowEvent, ctx: &Value) -> bool {
    rule.on.kind == event.kind
        && rule.on.matchers.iter().all(|(field, want)| {
            let path: Vec<String> = field.split('.').map(str::to_string).collect();
            lookup(&ctx["event"], &path) == Some(want)
        })
}
