use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use urgent_core::federator::FederatedState;
use urgent_core::system::{Command, EventFilter, OperatorCommand, Reply, System, SystemError};

/// Body of `POST /commands`: an operator action (has an `op` field) or any
/// raw command (has a `type` field).
pub fn parse_command(body: Value) -> Result<Command, String> {
    if body.get("op").is_some() {
        let command: OperatorCommand = serde_json::from_value(body).map_err(|e| e.to_string())?;
        Ok(Command::Operator { command })
    } else {
        serde_json::from_value(body).map_err(|e| e.to_string())
    }
}

/// Read-only views served by the GET endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum Query {
    Status,
    Incidents,
    Machines,
    Jobs {
        #[serde(default)]
        incident_id: Option<String>,
        #[serde(default)]
        request_id: Option<String>,
    },
    Ensembles,
    Events(EventFilter),
    Trace,
}

impl Query {
    /// Path and query string of the matching endpoint.
    pub fn path(&self) -> String {
        let qs = |pairs: Vec<(&str, Option<String>)>| {
            let parts: Vec<String> = pairs.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))).collect();
            if parts.is_empty() {
                String::new()
            } else {
                format!("?{}", parts.join("&"))
            }
        };
        match self {
            Query::Status => "/status".into(),
            Query::Incidents => "/incidents".into(),
            Query::Machines => "/machines".into(),
            Query::Jobs { incident_id, request_id } => format!("/jobs{}", qs(vec![("incident_id", incident_id.clone()), ("request_id", request_id.clone())])),
            Query::Ensembles => "/ensembles".into(),
            Query::Events(f) => format!(
                "/events{}",
                qs(vec![
                    ("kind", f.kind.clone()),
                    ("incident_id", f.incident_id.clone()),
                    ("since", f.since.map(|s| s.to_string())),
                    ("limit", f.limit.map(|s| s.to_string())),
                ])
            ),
            Query::Trace => "/trace".into(),
        }
    }
}

pub fn run_query(sys: &System, q: &Query) -> Result<Value, SystemError> {
    Ok(match q {
        Query::Status => {
            let mut jobs = std::collections::BTreeMap::<String, usize>::new();
            for r in sys.federator().records() {
                *jobs.entry(state_name(r.federated_state)).or_default() += 1;
            }
            json!({
                "now": sys.now(),
                "last_seq": sys.last_seq(),
                "events": sys.events().count(),
                "actions": sys.actions().len(),
                "incidents": sys.gateway().incidents().count(),
                "ensembles": sys.ensembles().ensembles().count(),
                "jobs": jobs,
            })
        }
        Query::Incidents => {
            let list: Vec<Value> = sys
                .gateway()
                .incidents()
                .map(|i| {
                    let budget = sys.federator().budget(&i.incident_id);
                    json!({"incident": i, "tokens_remaining": budget.map(|b| b.remaining())})
                })
                .collect();
            json!({ "incidents": list })
        }
        Query::Machines => json!({ "machines": sys.machine_views() }),
        Query::Jobs { request_id: Some(id), .. } => json!({ "job": sys.federator().job_status(id)? }),
        Query::Jobs { incident_id, .. } => {
            let jobs: Vec<_> = sys.federator().records().filter(|r| incident_id.as_ref().is_none_or(|i| &r.request.owning_incident_id == i)).collect();
            json!({ "jobs": jobs })
        }
        Query::Ensembles => json!({ "ensembles": sys.ensemble_summaries() }),
        Query::Events(filter) => {
            let page = sys.event_page(filter);
            let next = page.last().map(|n| n.seq);
            json!({ "events": page, "next": next })
        }
        Query::Trace => Value::String(sys.trace_text()),
    })
}

fn state_name(s: FederatedState) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// HTTP status for a command reply.
pub fn status_code(reply: &Reply) -> u16 {
    match reply.error.as_ref().map(|e| e.class.as_str()) {
        None => 200,
        Some("not_found") => 404,
        Some("conflict") => 409,
        Some(_) => 422,
    }
}

pub fn error_status(e: &SystemError) -> u16 {
    match e.class() {
        "not_found" => 404,
        "conflict" => 409,
        _ => 422,
    }
}
