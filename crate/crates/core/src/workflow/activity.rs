use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::yaml::{self, DocumentError};
use crate::SimTime;

pub const ACTIVITY_VERSION: &str = "activity/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortType {
    File,
    String,
    Number,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Port {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: PortType,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

/// Template for the federated request an activity run submits. Argument
/// values may contain `$(inputs.NAME)` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobTemplate {
    pub workload: String,
    pub nodes: u32,
    pub walltime: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<SimTime>,
    pub max_priority: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub speculation: u32,
    /// Deadline relative to the triggering event.
    pub deadline_offset: SimTime,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arguments: BTreeMap<String, String>,
}

fn one() -> u32 {
    1
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalStep {
    pub handler: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecutorBinding {
    FederatedJob(JobTemplate),
    LocalStep(LocalStep),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivityDocument {
    pub version: String,
    pub id: String,
    #[serde(default)]
    pub inputs: Vec<Port>,
    #[serde(default)]
    pub outputs: Vec<Port>,
    pub binding: ExecutorBinding,
}

impl ActivityDocument {
    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        let doc: Self = yaml::parse(text)?;
        doc.validate()?;
        Ok(doc)
    }

    /// Canonical text form: fixed key order, defaults omitted.
    pub fn to_canonical(&self) -> String {
        yaml::to_string(self)
    }

    pub fn input(&self, name: &str) -> Option<&Port> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&Port> {
        self.outputs.iter().find(|p| p.name == name)
    }

    pub fn job_template(&self) -> Option<&JobTemplate> {
        match &self.binding {
            ExecutorBinding::FederatedJob(t) => Some(t),
            ExecutorBinding::LocalStep(_) => None,
        }
    }

    pub fn validate(&self) -> Result<(), DocumentError> {
        if self.version != ACTIVITY_VERSION {
            return Err(DocumentError::schema("version", format!("expected {ACTIVITY_VERSION:?}, found {:?}", self.version)));
        }
        if self.id.trim().is_empty() {
            return Err(DocumentError::schema("id", "must not be empty"));
        }
        for (list, ports) in [("inputs", &self.inputs), ("outputs", &self.outputs)] {
            let mut seen = BTreeSet::new();
            for (i, port) in ports.iter().enumerate() {
                if !seen.insert(&port.name) {
                    return Err(DocumentError::schema(format!("{list}[{i}].name"), format!("duplicate name {:?}", port.name)));
                }
            }
        }
        if let ExecutorBinding::FederatedJob(t) = &self.binding {
            let field = |f: &str| format!("binding.federated_job.{f}");
            if t.nodes == 0 {
                return Err(DocumentError::schema(field("nodes"), "must be positive"));
            }
            if t.walltime == 0 {
                return Err(DocumentError::schema(field("walltime"), "must be positive"));
            }
            if t.deadline_offset == 0 {
                return Err(DocumentError::schema(field("deadline_offset"), "must be positive"));
            }
            if t.speculation == 0 {
                return Err(DocumentError::schema(field("speculation"), "must be at least 1"));
            }
            for (arg, value) in &t.arguments {
                for slot in slots(value).map_err(|m| DocumentError::schema(field(&format!("arguments.{arg}")), m))? {
                    if self.input(&slot).is_none() {
                        return Err(DocumentError::schema(field(&format!("arguments.{arg}")), format!("slot names undeclared input {slot:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Names referenced by `$(inputs.NAME)` slots in a template string.
pub fn slots(template: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("$(") {
        let after = &rest[start + 2..];
        let end = after.find(')').ok_or_else(|| format!("unterminated slot in {template:?}"))?;
        let name = after[..end].strip_prefix("inputs.").ok_or_else(|| format!("slot {:?} must start with inputs.", &after[..end]))?;
        out.push(name.to_string());
        rest = &after[end + 1..];
    }
    Ok(out)
}

/// Fills `$(inputs.NAME)` slots from `values`.
pub fn substitute(template: &str, values: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = template;
    while let Some(start) = rest.find("$(") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find(')').ok_or_else(|| format!("unterminated slot in {template:?}"))?;
        let name = after[..end].trim_start_matches("inputs.");
        out.push_str(values.get(name).ok_or_else(|| format!("no value for input {name:?}"))?);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
