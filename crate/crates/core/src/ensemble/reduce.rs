use serde::{Deserialize, Serialize};

use crate::SimTime;

/// One timestep of member output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub member_id: String,
    pub seq: u64,
    pub sim_time: SimTime,
    pub rows: usize,
    pub cols: usize,
    /// Row-major cell values.
    pub values: Vec<f64>,
}

impl TelemetryFrame {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_well_formed(&self) -> bool {
        self.rows > 0 && self.cols > 0 && self.values.len() == self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reducer", rename_all = "snake_case")]
pub enum Reducer {
    /// Keeps the top-left sample of each `factor` x `factor` block.
    Stride { factor: usize },
    Summary,
    /// Counts cells whose value is at least `threshold`.
    ThresholdCount { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "output", rename_all = "snake_case")]
pub enum Reduced {
    Grid { rows: usize, cols: usize, values: Vec<f64> },
    Summary { min: f64, max: f64, mean: f64 },
    Count { threshold: f64, count: usize },
}

impl Reducer {
    pub fn apply(&self, frame: &TelemetryFrame) -> Reduced {
        match *self {
            Self::Stride { factor } => stride(frame, factor.max(1)),
            Self::Summary => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for &v in &frame.values {
                    min = min.min(v);
                    max = max.max(v);
                    sum += v;
                }
                Reduced::Summary { min, max, mean: sum / frame.values.len() as f64 }
            }
            Self::ThresholdCount { threshold } => Reduced::Count { threshold, count: frame.values.iter().filter(|v| **v >= threshold).count() },
        }
    }
}

fn stride(frame: &TelemetryFrame, s: usize) -> Reduced {
    let rows = frame.rows.div_ceil(s);
    let cols = frame.cols.div_ceil(s);
    let mut values = Vec::with_capacity(rows * cols);
    for r in (0..frame.rows).step_by(s) {
        for c in (0..frame.cols).step_by(s) {
            values.push(frame.values[r * frame.cols + c]);
        }
    }
    Reduced::Grid { rows, cols, values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub pipeline_id: String,
    pub reducers: Vec<Reducer>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            pipeline_id: "fire-default".into(),
            reducers: vec![Reducer::Stride { factor: 4 }, Reducer::Summary, Reducer::ThresholdCount { threshold: 1.0 }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFrame {
    pub ensemble_id: String,
    pub member_id: String,
    pub seq: u64,
    pub sim_time: SimTime,
    pub outputs: Vec<Reduced>,
}

impl ReducedFrame {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

impl PipelineSpec {
    pub fn run(&self, ensemble_id: &str, frame: &TelemetryFrame) -> ReducedFrame {
        ReducedFrame {
            ensemble_id: ensemble_id.to_string(),
            member_id: frame.member_id.clone(),
            seq: frame.seq,
            sim_time: frame.sim_time,
            outputs: self.reducers.iter().map(|r| r.apply(frame)).collect(),
        }
    }
}
