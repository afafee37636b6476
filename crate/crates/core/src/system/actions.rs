use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use super::{ActivityRun, JobOwner, OperatorCommand, OwnedJob, RunState, System, SystemError};
use crate::ensemble::{EnsembleEvent, EnsembleState, PipelineSpec, SpawnSpec, SteeringMessage, SteeringTarget};
use crate::federator::JobRequest;
use crate::workflow::{kinds, substitute, value_text, ExecutorBinding, FiredAction, JobTemplate, ResolvedAction, TargetSelector, WorkflowEvent};
use crate::workloads::{weather_stub, FireModel, ParamValue, ParamVector, WindField, WindObservation};

fn invalid(msg: impl Into<String>) -> SystemError {
    SystemError::Invalid(msg.into())
}

/// Observations from either a sensor data item or a cleaned list.
fn observations_in(value: &Value) -> Result<Vec<WindObservation>, SystemError> {
    let list = value.get("observations").unwrap_or(value);
    serde_json::from_value(list.clone()).map_err(|e| invalid(format!("data item holds no observations: {e}")))
}

fn to_params(values: &BTreeMap<String, Value>) -> Result<ParamVector, SystemError> {
    values.iter().map(|(k, v)| Ok((k.clone(), serde_json::from_value(v.clone()).map_err(|e| invalid(format!("{k}: {e}")))?))).collect()
}

impl System {
    pub(super) fn execute(&mut self, trigger: &WorkflowEvent, fired: FiredAction) {
        let chain = fired.provenance.clone();
        let incident = trigger.incident_id.clone();
        let res = match &fired.action {
            ResolvedAction::StartActivity { activity, inputs } => {
                let region = inputs.get("region").and_then(Value::as_str).or(trigger.region()).unwrap_or_default().to_string();
                self.start_activity(&incident, &region, activity, inputs.clone(), chain.clone()).map(drop)
            }
            ResolvedAction::SpawnEnsemble { template, inputs, sweep } => (|| {
                let region = inputs.get("region").and_then(Value::as_str).or(trigger.region()).unwrap_or_default().to_string();
                let wind = match inputs.get("wind_input") {
                    Some(v) => self.wind_from(&value_text(v), &region)?,
                    None => WindField::calm(&region),
                };
                let sweep = sweep
                    .iter()
                    .map(|(k, vals)| {
                        vals.iter().map(|v| serde_json::from_value::<ParamValue>(v.clone()).map_err(|e| invalid(format!("{k}: {e}")))).collect::<Result<Vec<_>, _>>().map(|v| (k.clone(), v))
                    })
                    .collect::<Result<BTreeMap<_, _>, _>>()?;
                self.spawn_ensemble(&incident, &region, template, wind, ParamVector::new(), sweep, chain.clone()).map(drop)
            })(),
            ResolvedAction::UpdateEnsemble { selector, payload } => self.update_ensembles(selector, payload, &fired.action_id, chain.clone()),
            ResolvedAction::StopEnsemble { selector } => {
                let ids = self.matching_ensembles(selector);
                if ids.is_empty() {
                    Err(invalid("no active ensemble matches the selector"))
                } else {
                    ids.iter().try_for_each(|id| self.stop_ensemble(id, chain.clone()).map(drop))
                }
            }
            ResolvedAction::EmitEvent { kind, fields } => {
                let mut e = self.new_event(kind, &incident, chain.clone());
                e.payload.extend(fields.iter().map(|(k, v)| (k.clone(), v.clone())));
                self.emit(e);
                Ok(())
            }
        };
        if let Err(err) = res {
            let e = self
                .new_event(kinds::ACTION_FAILED, &incident, chain)
                .with_field("action_id", fired.action_id.clone())
                .with_field("action", fired.action.name())
                .with_field("reason", err.to_string());
            self.emit(e);
        }
    }

    fn job_request(&self, tpl: &JobTemplate, request_id: String, incident: &str) -> JobRequest {
        JobRequest {
            request_id,
            nodes_requested: tpl.nodes,
            walltime_estimate: tpl.walltime,
            deadline: self.now + tpl.deadline_offset,
            max_priority_allowed: tpl.max_priority.clone(),
            speculation_factor: tpl.speculation,
            owning_incident_id: incident.to_string(),
            actual_runtime: tpl.runtime,
        }
    }

    fn data_value(&self, data_ref: &str) -> Result<&Value, SystemError> {
        self.data.get(data_ref).ok_or_else(|| SystemError::NotFound { what: "data item", id: data_ref.to_string() })
    }

    fn wind_from(&self, data_ref: &str, region: &str) -> Result<WindField, SystemError> {
        let v = self.data_value(data_ref)?;
        let mut wind: WindField = serde_json::from_value(v.clone()).map_err(|e| invalid(format!("{data_ref} is not a wind field: {e}")))?;
        if wind.region_id.is_empty() {
            wind.region_id = region.to_string();
        }
        Ok(wind)
    }

    fn start_activity(&mut self, incident: &str, region: &str, activity: &str, inputs: BTreeMap<String, Value>, chain: Vec<String>) -> Result<String, SystemError> {
        let doc = self.engine.activity(activity).cloned().ok_or_else(|| SystemError::NotFound { what: "activity", id: activity.to_string() })?;
        if let Some(port) = doc.inputs.iter().find(|p| !p.optional && !inputs.contains_key(&p.name)) {
            return Err(invalid(format!("activity {activity:?} needs input {:?}", port.name)));
        }
        let run_id = format!("run{:04}", self.next_run);
        let texts: BTreeMap<String, String> = inputs.iter().map(|(k, v)| (k.clone(), value_text(v))).collect();
        let mut arguments = BTreeMap::new();
        if let ExecutorBinding::FederatedJob(tpl) = &doc.binding {
            for (name, t) in &tpl.arguments {
                arguments.insert(name.clone(), substitute(t, &texts).map_err(invalid)?);
            }
            let request = self.job_request(tpl, run_id.clone(), incident);
            self.federator.submit_federated(&mut self.fleet, request)?;
        }
        self.next_run += 1;
        let started = self
            .new_event(kinds::ACTIVITY_STARTED, incident, chain)
            .with_field("activity_id", activity)
            .with_field("run_id", run_id.clone())
            .with_field("region", region);
        let run_chain = started.chain();
        let federated = matches!(doc.binding, ExecutorBinding::FederatedJob(_));
        if federated {
            self.jobs.insert(run_id.clone(), OwnedJob { owner: JobOwner::Activity { run_id: run_id.clone() }, incident_id: incident.to_string(), chain: run_chain.clone() });
        }
        self.runs.insert(
            run_id.clone(),
            ActivityRun {
                run_id: run_id.clone(),
                activity_id: activity.to_string(),
                incident_id: incident.to_string(),
                region: region.to_string(),
                inputs,
                arguments,
                state: RunState::Running,
                started_at: self.now,
                finished_at: None,
                request_id: federated.then(|| run_id.clone()),
                outputs: Map::new(),
                chain: run_chain,
            },
        );
        self.emit(started);
        if let ExecutorBinding::LocalStep(step) = &doc.binding {
            match self.local_step(&step.handler, &run_id) {
                Ok(outputs) => self.complete_run(&run_id, outputs),
                Err(e) => self.fail_run(&run_id, &e.to_string()),
            }
        }
        Ok(run_id)
    }

    fn local_step(&mut self, handler: &str, run_id: &str) -> Result<Map<String, Value>, SystemError> {
        let run = &self.runs[run_id];
        match handler {
            "preprocess" => {
                let raw = run.inputs.get("raw").map(value_text).ok_or_else(|| invalid("preprocess needs input raw"))?;
                let obs = observations_in(self.data_value(&raw)?)?;
                let wind = weather_stub(&run.region, &obs, self.config.seed);
                let clean = format!("data/{run_id}/clean");
                self.data.insert(clean.clone(), serde_json::to_value(&obs).expect("observations serialize"));
                let mut out = Map::new();
                out.insert("clean".into(), clean.into());
                out.insert("direction".into(), wind.direction.as_str().into());
                out.insert("speed".into(), json!(wind.strength));
                Ok(out)
            }
            other => Err(invalid(format!("no local handler {other:?}"))),
        }
    }

    /// Runs the workload of a federated activity whose job just completed.
    pub(super) fn finish_job_run(&mut self, run_id: &str) {
        let Some(run) = self.runs.get(run_id).cloned() else {
            return;
        };
        if run.state != RunState::Running {
            return;
        }
        let tpl = self.engine.activity(&run.activity_id).and_then(|d| d.job_template()).cloned();
        let res: Result<Map<String, Value>, SystemError> = match tpl.as_ref().map(|t| t.workload.as_str()) {
            Some("weather_stub") => (|| {
                let src = run.arguments.get("observations").cloned().unwrap_or_default();
                let obs = observations_in(self.data_value(&src)?)?;
                let region = run.arguments.get("region").cloned().unwrap_or(run.region.clone());
                let wind = weather_stub(&region, &obs, self.config.seed);
                let out_ref = format!("data/{run_id}/forecast");
                self.data.insert(out_ref.clone(), serde_json::to_value(&wind).expect("wind serializes"));
                Ok(Map::from_iter([("forecast".to_string(), Value::from(out_ref))]))
            })(),
            Some("fire_ca") => (|| {
                let wind = match run.inputs.get("wind_input") {
                    Some(v) => self.wind_from(&value_text(v), &run.region)?,
                    None => WindField::calm(&run.region),
                };
                let grid = self.region_grid(&run.incident_id, &run.region).clone();
                let mut model = FireModel::new(grid, wind, self.config.spread_prob);
                let steps = tpl.as_ref().and_then(|t| t.runtime).unwrap_or(0) / self.config.frame_interval.max(1);
                for _ in 0..steps {
                    model.step();
                }
                let out_ref = format!("data/{run_id}/final_grid");
                self.data.insert(out_ref.clone(), Value::from(model.grid.to_text()));
                Ok(Map::from_iter([("final_grid".to_string(), Value::from(out_ref))]))
            })(),
            _ => Ok(Map::new()),
        };
        match res {
            Ok(outputs) => self.complete_run(run_id, outputs),
            Err(e) => self.fail_run(run_id, &e.to_string()),
        }
    }

    fn complete_run(&mut self, run_id: &str, outputs: Map<String, Value>) {
        let now = self.now;
        let run = self.runs.get_mut(run_id).expect("run exists");
        run.state = RunState::Completed;
        run.finished_at = Some(now);
        run.outputs = outputs.clone();
        let run = run.clone();
        let e = self
            .new_event(kinds::ACTIVITY_COMPLETED, &run.incident_id, run.chain)
            .with_field("activity_id", run.activity_id)
            .with_field("run_id", run_id)
            .with_field("region", run.region)
            .with_field("inputs", Value::Object(run.inputs.into_iter().collect()))
            .with_field("outputs", Value::Object(outputs));
        self.emit(e);
    }

    pub(super) fn fail_run(&mut self, run_id: &str, reason: &str) {
        let now = self.now;
        let Some(run) = self.runs.get_mut(run_id).filter(|r| r.state == RunState::Running) else {
            return;
        };
        run.state = RunState::Failed;
        run.finished_at = Some(now);
        let run = run.clone();
        let e = self
            .new_event(kinds::ACTIVITY_FAILED, &run.incident_id, run.chain)
            .with_field("activity_id", run.activity_id)
            .with_field("run_id", run_id)
            .with_field("region", run.region)
            .with_field("reason", reason);
        self.emit(e);
    }

    #[allow(clippy::too_many_arguments)]
    fn spawn_ensemble(
        &mut self,
        incident: &str,
        region: &str,
        template: &str,
        wind: WindField,
        params: ParamVector,
        sweep: BTreeMap<String, Vec<ParamValue>>,
        chain: Vec<String>,
    ) -> Result<String, SystemError> {
        let doc = self.engine.activity(template).ok_or_else(|| SystemError::NotFound { what: "activity", id: template.to_string() })?;
        let tpl = doc.job_template().cloned().ok_or_else(|| invalid(format!("{template:?} is not a federated job")))?;
        if tpl.workload != "fire_ca" {
            return Err(invalid(format!("workload {:?} cannot run as an ensemble", tpl.workload)));
        }
        let grid = self.region_grid(incident, region).clone();
        let spec = SpawnSpec {
            incident_id: incident.to_string(),
            region: region.to_string(),
            template_id: template.to_string(),
            job: self.job_request(&tpl, String::new(), incident),
            base_params: params,
            sweep,
            initial: FireModel::new(grid, wind, self.config.spread_prob),
            pipeline: PipelineSpec::default(),
            provenance: chain.clone(),
        };
        let (id, _) = self.ensembles.spawn(&mut self.federator, &mut self.fleet, spec)?;
        let members: Vec<String> = self.ensembles.get(&id).expect("just spawned").members.iter().map(|m| m.member_id.clone()).collect();
        let e = self
            .new_event(kinds::ENSEMBLE_SPAWNED, incident, chain)
            .with_field("ensemble_id", id.clone())
            .with_field("template", template)
            .with_field("region", region)
            .with_field("members", members.clone());
        let ens_chain = e.chain();
        for m in members {
            self.jobs.insert(m, OwnedJob { owner: JobOwner::Member { ensemble_id: id.clone() }, incident_id: incident.to_string(), chain: ens_chain.clone() });
        }
        self.ensemble_chain.insert(id.clone(), ens_chain);
        self.emit(e);
        Ok(id)
    }

    fn matching_ensembles(&self, sel: &TargetSelector) -> Vec<String> {
        self.ensembles
            .ensembles()
            .filter(|e| e.state == EnsembleState::Active && e.incident_id == sel.incident_id)
            .filter(|e| sel.template.as_ref().is_none_or(|t| &e.template_id == t))
            .filter(|e| sel.region.as_ref().is_none_or(|r| &e.region == r))
            .map(|e| e.ensemble_id.clone())
            .collect()
    }

    fn update_ensembles(&mut self, sel: &TargetSelector, payload: &BTreeMap<String, Value>, action_id: &str, chain: Vec<String>) -> Result<(), SystemError> {
        let ids = self.matching_ensembles(sel);
        if ids.is_empty() {
            return Err(invalid("no active ensemble matches the selector"));
        }
        let params = to_params(payload)?;
        let mut first_err = None;
        for id in ids {
            if let Err(e) = self.steer(&id, SteeringTarget::All, params.clone(), format!("{action_id}/{id}"), chain.clone()) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn steer(&mut self, ensemble_id: &str, target: SteeringTarget, payload: ParamVector, message_id: String, chain: Vec<String>) -> Result<Value, SystemError> {
        let msg = SteeringMessage { message_id: message_id.clone(), ensemble_id: ensemble_id.to_string(), target, payload: payload.clone(), issued_at: self.now };
        let plan = self.ensembles.steer(msg)?;
        let (incident, region) = self.ensemble_scope(ensemble_id);
        let e = self
            .new_event(kinds::ENSEMBLE_UPDATED, &incident, chain)
            .with_field("ensemble_id", ensemble_id)
            .with_field("region", region)
            .with_field("message_id", message_id.clone())
            .with_field("members", plan.members.clone())
            .with_field("payload", serde_json::to_value(&payload).expect("payload serializes"));
        self.steering_chain.insert(message_id.clone(), e.chain());
        self.emit(e);
        Ok(json!({"message_id": message_id, "members": plan.members}))
    }

    fn stop_ensemble(&mut self, ensemble_id: &str, chain: Vec<String>) -> Result<Value, SystemError> {
        let (stopped, events) = self.ensembles.stop_ensemble(&mut self.federator, &mut self.fleet, ensemble_id)?;
        self.ensemble_events(events, Some(chain));
        Ok(json!({"stopped": stopped}))
    }

    fn ensemble_scope(&self, ensemble_id: &str) -> (String, String) {
        self.ensembles.get(ensemble_id).map(|e| (e.incident_id.clone(), e.region.clone())).unwrap_or_default()
    }

    pub(super) fn on_ensemble_events(&mut self, events: Vec<EnsembleEvent>) {
        self.ensemble_events(events, None);
    }

    /// Turns ensemble lifecycle changes into workflow events. `cause`
    /// overrides the ensemble's own chain for operator-driven changes.
    fn ensemble_events(&mut self, events: Vec<EnsembleEvent>, cause: Option<Vec<String>>) {
        for ev in events {
            let (kind, ensemble_id, extra): (&str, String, Vec<(&str, Value)>) = match ev {
                EnsembleEvent::Spawned { .. } => continue,
                EnsembleEvent::MemberStarted { ensemble_id, member_id } => ("ensemble_member_started", ensemble_id, vec![("member_id", member_id.into())]),
                EnsembleEvent::MemberRestarted { ensemble_id, member_id } => ("ensemble_member_restarted", ensemble_id, vec![("member_id", member_id.into())]),
                EnsembleEvent::MemberFinished { ensemble_id, member_id, outcome } => (
                    kinds::ENSEMBLE_MEMBER_FINISHED,
                    ensemble_id,
                    vec![("member_id", member_id.into()), ("outcome", serde_json::to_value(outcome).expect("state serializes"))],
                ),
                EnsembleEvent::SteeringApplied { ensemble_id, member_id, message_id, step } => {
                    (kinds::STEERING_APPLIED, ensemble_id, vec![("member_id", member_id.into()), ("message_id", message_id.into()), ("step", step.into())])
                }
                EnsembleEvent::Stopped { ensemble_id } => (kinds::ENSEMBLE_STOPPED, ensemble_id, vec![]),
            };
            let chain = match (&cause, extra.iter().find(|(k, _)| *k == "message_id")) {
                (Some(c), _) => Some(c.clone()),
                (None, Some((_, Value::String(m)))) => self.steering_chain.get(m).cloned(),
                _ => None,
            }
            .or_else(|| self.ensemble_chain.get(&ensemble_id).cloned())
            .unwrap_or_default();
            let (incident, region) = self.ensemble_scope(&ensemble_id);
            let mut e = self.new_event(kind, &incident, chain).with_field("ensemble_id", ensemble_id).with_field("region", region);
            for (k, v) in extra {
                e.payload.insert(k.to_string(), v);
            }
            self.emit(e);
        }
    }

    pub(super) fn operator_effect(&mut self, command: &OperatorCommand, incident: &str, chain: &[String]) -> Result<Value, SystemError> {
        let chain = chain.to_vec();
        let root = chain.last().cloned().unwrap_or_default();
        match command {
            OperatorCommand::Steer { ensemble_id, target, payload } => self.steer(ensemble_id, target.clone(), payload.clone(), root, chain),
            OperatorCommand::StopEnsemble { ensemble_id } => self.stop_ensemble(ensemble_id, chain),
            OperatorCommand::StopMembers { ensemble_id, target } => {
                let (stopped, events) = self.ensembles.stop_members(&mut self.federator, &mut self.fleet, ensemble_id, target)?;
                if stopped.is_empty() {
                    return Err(invalid("target matches no live member"));
                }
                self.ensemble_events(events, Some(chain));
                Ok(json!({"stopped": stopped}))
            }
            OperatorCommand::SpawnEnsemble { region, template, wind, params, sweep, .. } => {
                let wind = wind.clone().unwrap_or_else(|| WindField::calm(region));
                let id = self.spawn_ensemble(incident, region, template, wind, params.clone(), sweep.clone(), chain)?;
                let members = self.ensembles.get(&id).map(|e| e.members.len()).unwrap_or(0);
                Ok(json!({"ensemble_id": id, "members": members}))
            }
            OperatorCommand::SubmitJob { request } => {
                let record = self.federator.submit_federated(&mut self.fleet, request.clone())?;
                self.jobs.insert(request.request_id.clone(), OwnedJob { owner: JobOwner::Operator, incident_id: incident.to_string(), chain });
                Ok(json!({"request_id": request.request_id, "state": record.federated_state}))
            }
            OperatorCommand::CancelJob { request_id } => {
                if let Some(OwnedJob { owner: JobOwner::Member { ensemble_id }, .. }) = self.jobs.get(request_id).cloned() {
                    let target = SteeringTarget::Member { member_id: request_id.clone() };
                    let (_, events) = self.ensembles.stop_members(&mut self.federator, &mut self.fleet, &ensemble_id, &target)?;
                    self.ensemble_events(events, Some(chain));
                } else {
                    self.federator.cancel_request(&mut self.fleet, request_id)?;
                }
                Ok(json!({"request_id": request_id}))
            }
            OperatorCommand::AcknowledgeAlert { alert_id } => {
                self.alerts.insert(alert_id.clone(), true);
                let e = self.new_event("alert_acknowledged", incident, chain).with_field("alert_id", alert_id.clone());
                self.emit(e);
                Ok(json!({"alert_id": alert_id}))
            }
        }
    }

    pub fn alerts(&self) -> impl Iterator<Item = (&str, bool)> {
        self.alerts.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
