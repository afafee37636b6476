//! Machine descriptions and the line-oriented scenario format.

use serde::{Deserialize, Serialize};

use super::FleetError;
use crate::SimTime;

/// Queue discipline of a simulated machine. Only strict per-class FIFO exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueuePolicy {
    #[default]
    FifoPriority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    FullOutage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFailure {
    pub time: SimTime,
    pub kind: FailureKind,
}

pub fn default_priority_classes() -> Vec<String> {
    vec!["normal".into(), "high".into(), "preempt".into()]
}

/// Static description of one HPC machine.
///
/// `priority_classes` runs from lowest to highest. The highest class may
/// preempt running jobs of the lowest class when the ladder has at least two
/// entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub machine_id: String,
    pub total_nodes: u32,
    pub cores_per_node: u32,
    #[serde(default)]
    pub queue_policy: QueuePolicy,
    #[serde(default)]
    pub failure_schedule: Vec<ScheduledFailure>,
    #[serde(default = "default_priority_classes")]
    pub priority_classes: Vec<String>,
}

impl MachineSpec {
    pub fn new(machine_id: impl Into<String>, total_nodes: u32, cores_per_node: u32) -> Self {
        Self {
            machine_id: machine_id.into(),
            total_nodes,
            cores_per_node,
            queue_policy: QueuePolicy::FifoPriority,
            failure_schedule: Vec::new(),
            priority_classes: default_priority_classes(),
        }
    }

    pub fn with_failure(mut self, time: SimTime) -> Self {
        self.failure_schedule.push(ScheduledFailure { time, kind: FailureKind::FullOutage });
        self
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        let bad = |why: &str| Err(FleetError::InvalidSpec(format!("{}: {why}", self.machine_id)));
        if self.machine_id.is_empty() {
            return bad("machine_id must not be empty");
        }
        if self.total_nodes == 0 {
            return bad("total_nodes must be at least 1");
        }
        if self.cores_per_node == 0 {
            return bad("cores_per_node must be at least 1");
        }
        if self.priority_classes.is_empty() {
            return bad("priority_classes must not be empty");
        }
        for (i, class) in self.priority_classes.iter().enumerate() {
            if class.is_empty() {
                return bad("priority class names must not be empty");
            }
            if self.priority_classes[..i].contains(class) {
                return bad(&format!("duplicate priority class {class:?}"));
            }
        }
        Ok(())
    }

    pub fn class_rank(&self, class: &str) -> Option<usize> {
        self.priority_classes.iter().position(|c| c == class)
    }

    /// Rank of the class allowed to preempt, if any.
    pub fn preempting_rank(&self) -> Option<usize> {
        (self.priority_classes.len() >= 2).then(|| self.priority_classes.len() - 1)
    }
}

/// A fleet description: machines plus out-of-band failure lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetScenario {
    pub machines: Vec<MachineSpec>,
    /// Failures given on their own `failure` lines, as (machine_id, failure).
    pub failures: Vec<(String, ScheduledFailure)>,
    /// Lines the fleet parser does not own, with their 1-based line numbers.
    pub extra_lines: Vec<(usize, String)>,
}

impl FleetScenario {
    /// Parses the line-oriented fleet format:
    ///
    /// ```text
    /// machine machine_id=archer total_nodes=16 cores_per_node=128 priority_classes=normal,high,preempt
    /// failure machine_id=archer time=300 kind=full_outage
    /// ```
    ///
    /// Blank lines and `#` comments are skipped. Lines with any other leading
    /// keyword are collected in `extra_lines` for higher-level drivers.
    pub fn parse(text: &str) -> Result<Self, FleetError> {
        let mut scenario = FleetScenario::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match keyword {
                "machine" => scenario.machines.push(parse_machine(line_no, rest)?),
                "failure" => scenario.failures.push(parse_failure(line_no, rest)?),
                _ => scenario.extra_lines.push((line_no, line.to_string())),
            }
        }
        for (machine_id, _) in &scenario.failures {
            if !scenario.machines.iter().any(|m| &m.machine_id == machine_id) {
                return Err(FleetError::Scenario(format!(
                    "failure references unknown machine {machine_id:?}"
                )));
            }
        }
        Ok(scenario)
    }

    /// Machine specs with `failure` lines folded into their schedules.
    pub fn resolved_machines(&self) -> Vec<MachineSpec> {
        let mut machines = self.machines.clone();
        for (machine_id, failure) in &self.failures {
            if let Some(m) = machines.iter_mut().find(|m| &m.machine_id == machine_id) {
                m.failure_schedule.push(failure.clone());
            }
        }
        machines
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.machines {
            out.push_str(&format!(
                "machine machine_id={} total_nodes={} cores_per_node={} queue_policy=fifo_priority priority_classes={}\n",
                m.machine_id,
                m.total_nodes,
                m.cores_per_node,
                m.priority_classes.join(",")
            ));
            for f in &m.failure_schedule {
                out.push_str(&format!("failure machine_id={} time={} kind=full_outage\n", m.machine_id, f.time));
            }
        }
        for (machine_id, f) in &self.failures {
            out.push_str(&format!("failure machine_id={machine_id} time={} kind=full_outage\n", f.time));
        }
        out
    }
}

fn fields(line_no: usize, rest: &str) -> Result<Vec<(&str, &str)>, FleetError> {
    rest.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .ok_or_else(|| FleetError::Scenario(format!("line {line_no}: expected key=value, got {tok:?}")))
        })
        .collect()
}

fn number<T: std::str::FromStr>(line_no: usize, key: &str, value: &str) -> Result<T, FleetError> {
    value
        .parse()
        .map_err(|_| FleetError::Scenario(format!("line {line_no}: {key} must be a non-negative integer, got {value:?}")))
}

fn parse_machine(line_no: usize, rest: &str) -> Result<MachineSpec, FleetError> {
    let mut id = None;
    let mut nodes = None;
    let mut cores = None;
    let mut classes = default_priority_classes();
    for (key, value) in fields(line_no, rest)? {
        match key {
            "machine_id" => id = Some(value.to_string()),
            "total_nodes" => nodes = Some(number(line_no, key, value)?),
            "cores_per_node" => cores = Some(number(line_no, key, value)?),
            "queue_policy" if value == "fifo_priority" => {}
            "queue_policy" => {
                return Err(FleetError::Scenario(format!("line {line_no}: unsupported queue_policy {value:?}")))
            }
            "priority_classes" => classes = value.split(',').map(str::to_string).collect(),
            other => return Err(FleetError::Scenario(format!("line {line_no}: unknown machine field {other:?}"))),
        }
    }
    let missing = |f: &str| FleetError::Scenario(format!("line {line_no}: machine is missing {f}"));
    let spec = MachineSpec {
        machine_id: id.ok_or_else(|| missing("machine_id"))?,
        total_nodes: nodes.ok_or_else(|| missing("total_nodes"))?,
        cores_per_node: cores.ok_or_else(|| missing("cores_per_node"))?,
        queue_policy: QueuePolicy::FifoPriority,
        failure_schedule: Vec::new(),
        priority_classes: classes,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_failure(line_no: usize, rest: &str) -> Result<(String, ScheduledFailure), FleetError> {
    let mut id = None;
    let mut time = None;
    for (key, value) in fields(line_no, rest)? {
        match key {
            "machine_id" => id = Some(value.to_string()),
            "time" => time = Some(number(line_no, key, value)?),
            "kind" if value == "full_outage" => {}
            "kind" => return Err(FleetError::Scenario(format!("line {line_no}: unsupported failure kind {value:?}"))),
            other => return Err(FleetError::Scenario(format!("line {line_no}: unknown failure field {other:?}"))),
        }
    }
    let missing = |f: &str| FleetError::Scenario(format!("line {line_no}: failure is missing {f}"));
    Ok((
        id.ok_or_else(|| missing("machine_id"))?,
        ScheduledFailure { time: time.ok_or_else(|| missing("time"))?, kind: FailureKind::FullOutage },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_machines_and_failures() {
        let text = "# fleet\nmachine machine_id=a total_nodes=4 cores_per_node=8\n\
                    machine machine_id=b total_nodes=2 cores_per_node=1 priority_classes=low,top\n\
                    failure machine_id=a time=30 kind=full_outage\nat 0 something else\n";
        let s = FleetScenario::parse(text).unwrap();
        assert_eq!(s.machines.len(), 2);
        assert_eq!(s.machines[1].priority_classes, vec!["low", "top"]);
        let resolved = s.resolved_machines();
        assert_eq!(resolved[0].failure_schedule, vec![ScheduledFailure { time: 30, kind: FailureKind::FullOutage }]);
        assert_eq!(s.extra_lines, vec![(5, "at 0 something else".to_string())]);
        let again = FleetScenario::parse(&FleetScenario { machines: resolved, ..Default::default() }.to_text()).unwrap();
        assert_eq!(again.resolved_machines()[0].failure_schedule.len(), 1);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(FleetScenario::parse("machine machine_id=a total_nodes=0 cores_per_node=1").is_err());
        assert!(FleetScenario::parse("machine machine_id=a total_nodes=1 cores_per_node=1 priority_classes=x,x").is_err());
        assert!(FleetScenario::parse("machine machine_id=a total_nodes=1 cores_per_node=1 colour=red").is_err());
        assert!(FleetScenario::parse("failure machine_id=zz time=3 kind=full_outage").is_err());
        assert!(FleetScenario::parse("machine machine_id=a total_nodes=1").is_err());
    }
}
