use std::path::Path;

use serde_json::Value;
use urgent_core::store::StateStore;
use urgent_core::system::{Command, Orchestrator, RecoveryReport, Reply, SystemConfig};

use crate::api::{run_query, Query};

/// Where CLI commands go: straight to a log file, or to a running server.
pub trait Backend {
    fn execute(&mut self, command: Command) -> Result<Reply, String>;
    fn query(&mut self, query: &Query) -> Result<Value, String>;
}

pub struct Local {
    pub orch: Orchestrator,
}

impl Local {
    /// Opens the log at `path`, recovering if it holds records.
    pub fn open(path: &Path, config: SystemConfig) -> Result<(Self, Option<RecoveryReport>), String> {
        let store = StateStore::open(path).map_err(|e| e.to_string())?;
        if store.records().is_empty() {
            Ok((Self { orch: Orchestrator::create(config, store).map_err(|e| e.to_string())? }, None))
        } else {
            let (orch, report) = Orchestrator::recover(store).map_err(|e| e.to_string())?;
            Ok((Self { orch }, Some(report)))
        }
    }
}

impl Backend for Local {
    fn execute(&mut self, command: Command) -> Result<Reply, String> {
        self.orch.execute(&command).map_err(|e| e.to_string())
    }

    fn query(&mut self, query: &Query) -> Result<Value, String> {
        run_query(self.orch.system(), query).map_err(|e| e.to_string())
    }
}

pub struct Remote {
    base: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl Remote {
    pub fn new(base: &str, token: Option<String>) -> Self {
        Self { base: base.trim_end_matches('/').to_string(), token, client: reqwest::blocking::Client::new() }
    }

    fn auth(&self, req: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }
}

impl Backend for Remote {
    fn execute(&mut self, command: Command) -> Result<Reply, String> {
        let (path, body) = match &command {
            Command::CreateIncident { incident } => ("/incidents", serde_json::to_value(incident)),
            Command::RegisterSource { source } => ("/sources", serde_json::to_value(source)),
            Command::Ingest { envelope } => ("/ingest", serde_json::to_value(envelope)),
            Command::Operator { command } => ("/commands", serde_json::to_value(command)),
            other => ("/commands", serde_json::to_value(other)),
        };
        let body = body.map_err(|e| e.to_string())?;
        let resp = self.auth(self.client.post(format!("{}{path}", self.base)).json(&body)).send().map_err(|e| e.to_string())?;
        resp.json::<Reply>().map_err(|e| e.to_string())
    }

    fn query(&mut self, query: &Query) -> Result<Value, String> {
        let resp = self.auth(self.client.get(format!("{}{}", self.base, query.path()))).send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("{status}: {text}"));
        }
        Ok(serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }
}
