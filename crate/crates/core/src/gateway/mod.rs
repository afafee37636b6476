//! Sensor ingestion: per-source deduplication and content validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::workloads::{Direction, WindObservation};
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("source {0:?} already registered")]
    DuplicateSource(String),
    #[error("unknown incident {0:?}")]
    UnknownIncident(String),
    #[error("incident {0:?} already exists")]
    DuplicateIncident(String),
    #[error("incident {0:?} is not active")]
    InactiveIncident(String),
    #[error("invalid {content_kind} payload: {details}")]
    PayloadInvalid { content_kind: String, details: String },
    #[error("invalid request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    WeatherObs,
    FirePerimeter,
}

impl ContentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WeatherObs => "weather_obs",
            Self::FirePerimeter => "fire_perimeter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorEnvelope {
    pub source_id: String,
    pub sequence_number: u64,
    pub content_kind: ContentKind,
    /// `json`, or `csv` for raw weather station dumps.
    pub format: String,
    pub payload: String,
    #[serde(default)]
    pub received_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentDescriptor {
    pub incident_id: String,
    pub label: String,
    pub tokens: f64,
    #[serde(default = "yes")]
    pub active: bool,
    pub rule_set: String,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRegistration {
    pub source_id: String,
    pub incident_id: String,
}

/// One clean weather observation as sent by a station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherObsPayload {
    pub region: String,
    pub station: String,
    pub direction: Direction,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirePerimeterPayload {
    pub region: String,
    /// (row, col) cells observed burning.
    pub cells: Vec<(usize, usize)>,
}

/// Validated sensor content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "content", rename_all = "snake_case")]
pub enum SensorContent {
    Weather { region: String, observations: Vec<WindObservation>, raw: bool },
    FirePerimeter { region: String, cells: Vec<(usize, usize)> },
}

impl SensorContent {
    pub fn region(&self) -> &str {
        match self {
            Self::Weather { region, .. } | Self::FirePerimeter { region, .. } => region,
        }
    }

    /// Event payload fields describing this content.
    pub fn fields(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("region".into(), self.region().into());
        match self {
            Self::Weather { observations, raw, .. } => {
                m.insert("content_kind".into(), "weather_obs".into());
                m.insert("needs_preprocessing".into(), (*raw).into());
                m.insert("observation_count".into(), observations.len().into());
                if let [only] = observations.as_slice() {
                    if !raw {
                        m.insert("station".into(), only.station.clone().into());
                        m.insert("direction".into(), only.direction.as_str().into());
                        m.insert("speed".into(), json!(only.speed));
                    }
                }
            }
            Self::FirePerimeter { cells, .. } => {
                m.insert("content_kind".into(), "fire_perimeter".into());
                m.insert("needs_preprocessing".into(), false.into());
                m.insert("cell_count".into(), cells.len().into());
            }
        }
        m
    }
}

fn invalid(kind: ContentKind, details: impl Into<String>) -> GatewayError {
    GatewayError::PayloadInvalid { content_kind: kind.as_str().to_string(), details: details.into() }
}

/// Parses a raw station dump: one `region,station,direction,speed` row per
/// line; blank lines and `#` comments skipped. All rows share one region.
pub fn parse_weather_csv(text: &str) -> Result<(String, Vec<WindObservation>), GatewayError> {
    let kind = ContentKind::WeatherObs;
    let mut region: Option<String> = None;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [r, station, dir, speed] = cols[..] else {
            return Err(invalid(kind, format!("line {}: expected 4 columns, found {}", n + 1, cols.len())));
        };
        let direction: Direction = dir.parse().map_err(|_| invalid(kind, format!("line {}: bad direction {dir:?}", n + 1)))?;
        let speed: f64 = speed.parse().map_err(|_| invalid(kind, format!("line {}: bad speed {speed:?}", n + 1)))?;
        if !speed.is_finite() || speed < 0.0 {
            return Err(invalid(kind, format!("line {}: speed must be a non-negative number", n + 1)));
        }
        match &region {
            Some(existing) if existing != r => return Err(invalid(kind, format!("line {}: region {r:?} differs from {existing:?}", n + 1))),
            Some(_) => {}
            None => region = Some(r.to_string()),
        }
        out.push(WindObservation { station: station.to_string(), direction, speed });
    }
    let region = region.ok_or_else(|| invalid(kind, "no observations"))?;
    Ok((region, out))
}

/// Checks a payload against the schema of its content kind.
pub fn validate_payload(kind: ContentKind, format: &str, payload: &str) -> Result<SensorContent, GatewayError> {
    match (kind, format) {
        (ContentKind::WeatherObs, "json") => {
            let obs: WeatherObsPayload = serde_json::from_str(payload).map_err(|e| invalid(kind, e.to_string()))?;
            if !obs.speed.is_finite() || obs.speed < 0.0 {
                return Err(invalid(kind, "speed must be a non-negative number"));
            }
            if obs.region.is_empty() {
                return Err(invalid(kind, "region must not be empty"));
            }
            Ok(SensorContent::Weather {
                region: obs.region,
                observations: vec![WindObservation { station: obs.station, direction: obs.direction, speed: obs.speed }],
                raw: false,
            })
        }
        (ContentKind::WeatherObs, "csv") => {
            let (region, observations) = parse_weather_csv(payload)?;
            Ok(SensorContent::Weather { region, observations, raw: true })
        }
        (ContentKind::FirePerimeter, "json") => {
            let p: FirePerimeterPayload = serde_json::from_str(payload).map_err(|e| invalid(kind, e.to_string()))?;
            if p.region.is_empty() {
                return Err(invalid(kind, "region must not be empty"));
            }
            Ok(SensorContent::FirePerimeter { region: p.region, cells: p.cells })
        }
        (_, other) => Err(invalid(kind, format!("unsupported format {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accepted {
    pub incident_id: String,
    pub source_id: String,
    pub sequence_number: u64,
    pub content: SensorContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum IngestOutcome {
    Accepted(Accepted),
    Duplicate { source_id: String, sequence_number: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct SourceState {
    incident_id: String,
    seen: BTreeSet<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Gateway {
    incidents: BTreeMap<String, IncidentDescriptor>,
    sources: BTreeMap<String, SourceState>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_incident(&mut self, incident: IncidentDescriptor) -> Result<(), GatewayError> {
        if incident.incident_id.is_empty() {
            return Err(GatewayError::Invalid("incident_id must not be empty".into()));
        }
        if !(incident.tokens.is_finite() && incident.tokens >= 0.0) {
            return Err(GatewayError::Invalid("tokens must be a non-negative number".into()));
        }
        if self.incidents.contains_key(&incident.incident_id) {
            return Err(GatewayError::DuplicateIncident(incident.incident_id));
        }
        self.incidents.insert(incident.incident_id.clone(), incident);
        Ok(())
    }

    pub fn incident(&self, id: &str) -> Option<&IncidentDescriptor> {
        self.incidents.get(id)
    }

    pub fn incidents(&self) -> impl Iterator<Item = &IncidentDescriptor> {
        self.incidents.values()
    }

    pub fn register_source(&mut self, reg: SourceRegistration) -> Result<(), GatewayError> {
        if !self.incidents.contains_key(&reg.incident_id) {
            return Err(GatewayError::UnknownIncident(reg.incident_id));
        }
        if self.sources.contains_key(&reg.source_id) {
            return Err(GatewayError::DuplicateSource(reg.source_id));
        }
        self.sources.insert(reg.source_id, SourceState { incident_id: reg.incident_id, seen: BTreeSet::new() });
        Ok(())
    }

    pub fn source_incident(&self, source_id: &str) -> Option<&str> {
        self.sources.get(source_id).map(|s| s.incident_id.as_str())
    }

    /// Validates an envelope and records its sequence number. Re-sent
    /// envelopes are acknowledged as duplicates and change nothing. Invalid
    /// payloads are not recorded, so a corrected resend is accepted.
    pub fn ingest(&mut self, env: &SensorEnvelope) -> Result<IngestOutcome, GatewayError> {
        let source = self.sources.get(&env.source_id).ok_or_else(|| GatewayError::UnknownSource(env.source_id.clone()))?;
        if source.seen.contains(&env.sequence_number) {
            return Ok(IngestOutcome::Duplicate { source_id: env.source_id.clone(), sequence_number: env.sequence_number });
        }
        let incident = &self.incidents[&source.incident_id];
        if !incident.active {
            return Err(GatewayError::InactiveIncident(incident.incident_id.clone()));
        }
        let content = validate_payload(env.content_kind, &env.format, &env.payload)?;
        let incident_id = source.incident_id.clone();
        self.sources.get_mut(&env.source_id).expect("checked").seen.insert(env.sequence_number);
        Ok(IngestOutcome::Accepted(Accepted { incident_id, source_id: env.source_id.clone(), sequence_number: env.sequence_number, content }))
    }
}

#[cfg(test)]
mod tests;
