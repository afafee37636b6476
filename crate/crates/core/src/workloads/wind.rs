use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::WorkloadError;

/// Compass direction the wind blows toward. Row 0 of a grid is north.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    E,
    S,
    W,
    #[serde(rename = "calm")]
    Calm,
}

impl Direction {
    /// (row, col) step, or None when calm.
    pub fn offset(self) -> Option<(i64, i64)> {
        match self {
            Self::N => Some((-1, 0)),
            Self::E => Some((0, 1)),
            Self::S => Some((1, 0)),
            Self::W => Some((0, -1)),
            Self::Calm => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::E => "E",
            Self::S => "S",
            Self::W => "W",
            Self::Calm => "calm",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "N" | "n" => Ok(Self::N),
            "E" | "e" => Ok(Self::E),
            "S" | "s" => Ok(Self::S),
            "W" | "w" => Ok(Self::W),
            "calm" | "C" => Ok(Self::Calm),
            other => Err(WorkloadError::BadValue { name: "direction".into(), reason: format!("unknown direction {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindField {
    pub region_id: String,
    pub direction: Direction,
    pub strength: f64,
}

impl WindField {
    pub fn new(region_id: impl Into<String>, direction: Direction, strength: f64) -> Self {
        Self { region_id: region_id.into(), direction, strength: clamp_unit(strength) }
    }

    pub fn calm(region_id: impl Into<String>) -> Self {
        Self::new(region_id, Direction::Calm, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindObservation {
    pub station: String,
    pub direction: Direction,
    pub speed: f64,
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Majority vote over observed directions. Ties are broken by a generator
/// seeded with `seed`; strength is the mean speed of the winning votes.
pub fn weather_stub(region: &str, observations: &[WindObservation], seed: u64) -> WindField {
    if observations.is_empty() {
        return WindField::calm(region);
    }
    let mut votes = std::collections::BTreeMap::<Direction, (usize, f64)>::new();
    for obs in observations {
        let slot = votes.entry(obs.direction).or_default();
        slot.0 += 1;
        slot.1 += obs.speed;
    }
    let top = votes.values().map(|v| v.0).max().unwrap_or(0);
    let tied: Vec<Direction> = votes.iter().filter(|(_, v)| v.0 == top).map(|(d, _)| *d).collect();
    let winner = if tied.len() == 1 {
        tied[0]
    } else {
        tied[ChaCha8Rng::seed_from_u64(seed).random_range(0..tied.len())]
    };
    if winner == Direction::Calm {
        return WindField::calm(region);
    }
    let (count, sum) = votes[&winner];
    WindField::new(region, winner, sum / count as f64)
}
