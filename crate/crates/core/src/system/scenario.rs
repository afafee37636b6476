use serde::{Deserialize, Serialize};

use super::{Command, Orchestrator, Reply, SystemError};
use crate::fleet::FleetScenario;
use crate::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub time: SimTime,
    pub command: Command,
}

/// A fleet description plus timed commands.
///
/// ```text
/// machine machine_id=archer total_nodes=16 cores_per_node=128
/// at 60 {"command":"ingest","envelope":{...}}
/// until 3600
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub fleet: FleetScenario,
    pub steps: Vec<ScenarioStep>,
    pub until: Option<SimTime>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SystemError> {
        let mut fleet = FleetScenario::parse(text)?;
        let mut steps = Vec::new();
        let mut until = None;
        for (line_no, line) in std::mem::take(&mut fleet.extra_lines) {
            let bad = |msg: String| SystemError::Invalid(format!("line {line_no}: {msg}"));
            let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((&line, ""));
            match keyword {
                "at" => {
                    let (t, json) = rest.trim().split_once(char::is_whitespace).ok_or_else(|| bad("expected `at TIME COMMAND`".into()))?;
                    let time = t.parse().map_err(|_| bad(format!("bad time {t:?}")))?;
                    let command = serde_json::from_str(json.trim()).map_err(|e| bad(format!("bad command: {e}")))?;
                    steps.push(ScenarioStep { time, command });
                }
                "until" => until = Some(rest.trim().parse().map_err(|_| bad(format!("bad time {rest:?}")))?),
                other => return Err(bad(format!("unknown keyword {other:?}"))),
            }
        }
        steps.sort_by_key(|s| s.time);
        Ok(Self { fleet, steps, until })
    }

    /// The full command stream: machines, then each step preceded by a clock
    /// advance, then a final advance to `until`.
    pub fn commands(&self) -> Vec<Command> {
        let mut out: Vec<Command> = self.fleet.resolved_machines().into_iter().map(|spec| Command::AddMachine { spec }).collect();
        let mut now = 0;
        for step in &self.steps {
            if step.time > now {
                out.push(Command::AdvanceTo { time: step.time });
                now = step.time;
            }
            out.push(step.command.clone());
        }
        if let Some(t) = self.until.filter(|t| *t > now) {
            out.push(Command::AdvanceTo { time: t });
        }
        out
    }

    pub fn run(&self, orch: &mut Orchestrator) -> Result<Vec<Reply>, SystemError> {
        self.commands().iter().map(|c| orch.execute(c)).collect()
    }
}
