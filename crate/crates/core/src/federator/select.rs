//! Placement selection with priority escalation.

use serde::{Deserialize, Serialize};

use super::predict::{predict_start, WaitPrediction};
use super::FederatorError;
use crate::fleet::MachineStatus;
use crate::SimTime;

/// What a placement decision needs to know about a job.
#[derive(Debug, Clone, Copy)]
pub struct PlacementAsk<'a> {
    pub nodes_requested: u32,
    pub walltime_estimate: SimTime,
    pub deadline: SimTime,
    pub max_priority_allowed: &'a str,
    pub speculation_factor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    /// Chosen (machine, class) options, best first.
    pub chosen: Vec<WaitPrediction>,
    pub deadline_at_risk: bool,
    /// Every prediction computed while deciding, in evaluation order.
    pub evaluated: Vec<WaitPrediction>,
}

fn by_completion(a: &WaitPrediction, b: &WaitPrediction) -> std::cmp::Ordering {
    (a.predicted_completion, &a.machine_id).cmp(&(b.predicted_completion, &b.machine_id))
}

/// Picks up to `speculation_factor` machines for a job.
///
/// Classes are tried from the bottom of `ladder` up to `max_priority_allowed`.
/// The first class at which some machine meets the deadline wins, and the
/// fastest machines at that class are chosen. If no class meets the
/// deadline, each machine contributes its fastest allowed option and the
/// overall fastest are returned flagged as at risk. Ties go to the
/// lexicographically smaller machine id.
pub fn select_placement(
    candidates: &[&MachineStatus],
    ladder: &[String],
    ask: PlacementAsk<'_>,
) -> Result<PlacementPlan, FederatorError> {
    let healthy: Vec<&MachineStatus> = candidates.iter().copied().filter(|s| s.healthy).collect();
    if healthy.is_empty() {
        return Err(FederatorError::NoHealthyMachines);
    }
    let top = ladder
        .iter()
        .position(|c| c == ask.max_priority_allowed)
        .ok_or_else(|| FederatorError::UnknownPriority(ask.max_priority_allowed.to_string()))?;
    let k = ask.speculation_factor.max(1);

    let mut evaluated = Vec::new();
    let mut per_class: Vec<Vec<WaitPrediction>> = Vec::new();
    for class in &ladder[..=top] {
        let mut options: Vec<WaitPrediction> = healthy
            .iter()
            .filter_map(|s| predict_start(s, ask.nodes_requested, ask.walltime_estimate, class).ok())
            .collect();
        options.sort_by(by_completion);
        evaluated.extend(options.iter().cloned());
        if options.first().is_some_and(|best| best.predicted_completion <= ask.deadline) {
            options.truncate(k);
            return Ok(PlacementPlan { chosen: options, deadline_at_risk: false, evaluated });
        }
        per_class.push(options);
    }

    // Nothing meets the deadline: fastest allowed option per machine.
    let mut fastest: Vec<WaitPrediction> = Vec::new();
    for options in &per_class {
        for option in options {
            match fastest.iter_mut().find(|f| f.machine_id == option.machine_id) {
                Some(best) if option.predicted_completion < best.predicted_completion => *best = option.clone(),
                Some(_) => {}
                None => fastest.push(option.clone()),
            }
        }
    }
    if fastest.is_empty() {
        return Err(FederatorError::NoFeasibleMachine { requested: ask.nodes_requested });
    }
    fastest.sort_by(by_completion);
    fastest.truncate(k);
    Ok(PlacementPlan { chosen: fastest, deadline_at_risk: true, evaluated })
}
