use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Diagnostic for a structured-text document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum DocumentError {
    #[error("syntax error{}: {message}", at(*line, *column))]
    Syntax { line: Option<usize>, column: Option<usize>, message: String },
    #[error("schema error in `{field}`{}: {message}", at(*line, *column))]
    Schema { field: String, line: Option<usize>, column: Option<usize>, message: String },
}

fn at(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l} column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

impl DocumentError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { field: field.into(), line: None, column: None, message: message.into() }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Schema { field, .. } => Some(field),
            Self::Syntax { .. } => None,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Schema { line, .. } | Self::Syntax { line, .. } => *line,
        }
    }
}

/// Parses YAML where enums are written as single-key maps.
pub(crate) fn parse<T: DeserializeOwned>(text: &str) -> Result<T, DocumentError> {
    if let Err(e) = serde_yaml::from_str::<serde_yaml::Value>(text) {
        let loc = e.location();
        return Err(DocumentError::Syntax { line: loc.as_ref().map(|l| l.line()), column: loc.as_ref().map(|l| l.column()), message: e.to_string() });
    }
    serde_yaml::with::singleton_map_recursive::deserialize(serde_yaml::Deserializer::from_str(text)).map_err(|e| {
        let loc = e.location();
        let full = e.to_string();
        let message = match full.rfind(" at line ") {
            Some(i) => full[..i].to_string(),
            None => full,
        };
        let (path, rest) = match message.split_once(": ") {
            Some((p, r)) if !p.contains(' ') => (p.to_string(), r.to_string()),
            _ => (String::new(), message.clone()),
        };
        let named = rest
            .strip_prefix("unknown field `")
            .or_else(|| rest.strip_prefix("missing field `"))
            .or_else(|| rest.strip_prefix("unknown variant `"))
            .and_then(|r| r.split('`').next());
        let field = match (path.is_empty(), named) {
            (true, Some(n)) => n.to_string(),
            (false, Some(n)) => format!("{path}.{n}"),
            (false, None) => path,
            (true, None) => "<document>".to_string(),
        };
        DocumentError::Schema { field, line: loc.as_ref().map(|l| l.line()), column: loc.as_ref().map(|l| l.column()), message: rest }
    })
}

pub(crate) fn to_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    serde_yaml::with::singleton_map_recursive::serialize(value, &mut serde_yaml::Serializer::new(&mut out)).expect("document serializes");
    String::from_utf8(out).expect("yaml is utf-8")
}

