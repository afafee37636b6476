use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::expr::{Condition, PATH_ROOTS};
use super::yaml::{self, DocumentError};

/// A literal value or a `$(root.path)` reference, resolved when a rule fires.
pub type Binding = Value;

/// Returns the referenced path if `binding` is a `$(...)` reference.
pub fn reference(binding: &Binding) -> Option<Vec<String>> {
    let s = binding.as_str()?.trim();
    let inner = s.strip_prefix("$(")?.strip_suffix(')')?;
    Some(inner.split('.').map(str::to_string).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub kind: String,
    /// Event fields that must equal the given values.
    #[serde(default, rename = "match", skip_serializing_if = "BTreeMap::is_empty")]
    pub matchers: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSelector {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Binding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    StartActivity {
        activity: String,
        #[serde(default)]
        inputs: BTreeMap<String, Binding>,
    },
    UpdateEnsemble {
        #[serde(default)]
        selector: EnsembleSelector,
        payload: BTreeMap<String, Binding>,
    },
    SpawnEnsemble {
        template: String,
        #[serde(default)]
        inputs: BTreeMap<String, Binding>,
        #[serde(default)]
        sweep: BTreeMap<String, Vec<Value>>,
    },
    StopEnsemble {
        #[serde(default)]
        selector: EnsembleSelector,
    },
    EmitEvent {
        kind: String,
        #[serde(default)]
        fields: BTreeMap<String, Binding>,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Self::StartActivity { .. } => "start_activity",
            Self::UpdateEnsemble { .. } => "update_ensemble",
            Self::SpawnEnsemble { .. } => "spawn_ensemble",
            Self::StopEnsemble { .. } => "stop_ensemble",
            Self::EmitEvent { .. } => "emit_event",
        }
    }

    pub(crate) fn bindings(&self) -> Vec<&Binding> {
        match self {
            Self::StartActivity { inputs, .. } | Self::SpawnEnsemble { inputs, .. } => inputs.values().collect(),
            Self::UpdateEnsemble { selector, payload } => payload.values().chain(selector.region.as_ref()).collect(),
            Self::StopEnsemble { selector } => selector.region.iter().collect(),
            Self::EmitEvent { fields, .. } => fields.values().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub id: String,
    pub on: Trigger,
    #[serde(default = "Condition::always")]
    pub when: Condition,
    #[serde(rename = "do")]
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleDocument {
    pub rule_set: String,
    pub rules: Vec<Rule>,
}

impl RuleDocument {
    /// Parses a rule document; conditions are parsed and type-checked here.
    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        let doc: Self = yaml::parse(text)?;
        let mut ids = BTreeSet::new();
        for (i, rule) in doc.rules.iter().enumerate() {
            if !ids.insert(&rule.id) {
                return Err(DocumentError::schema(format!("rules[{i}].id"), format!("duplicate rule id {:?}", rule.id)));
            }
            for (j, action) in rule.actions.iter().enumerate() {
                for b in action.bindings() {
                    if let Some(path) = reference(b) {
                        if path.len() < 2 || !PATH_ROOTS.contains(&path[0].as_str()) {
                            return Err(DocumentError::schema(
                                format!("rules[{i}].do[{j}]"),
                                format!("reference {b} must name a field under one of {PATH_ROOTS:?}"),
                            ));
                        }
                    }
                }
            }
        }
        Ok(doc)
    }

    pub fn to_canonical(&self) -> String {
        yaml::to_string(self)
    }
}
