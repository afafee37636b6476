//! Desk-scale stand-ins for the coupled simulation codes: a stub weather
//! model and a steerable wildfire cellular automaton.

mod fire;
mod wind;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fire::{fire_step, Cell, FireGrid, FireModel};
pub use wind::{weather_stub, Direction, WindField, WindObservation};

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum WorkloadError {
    #[error("grid line {line}: {reason}")]
    GridFormat { line: usize, reason: String },
    #[error("parameter {0:?} is not steerable")]
    NotSteerable(String),
    #[error("bad value for {name:?}: {reason}")]
    BadValue { name: String, reason: String },
}

/// A scalar parameter value: member parameter vectors and steering payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Self::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Number(n) => write!(f, "{n}"),
            Self::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        Self::Number(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        Self::Text(v.to_string())
    }
}

pub type ParamVector = BTreeMap<String, ParamValue>;

#[cfg(test)]
mod tests;
