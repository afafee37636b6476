use proptest::prelude::*;

use super::*;
use crate::fleet::{Fleet, FleetRecord, FleetTransition, MachineSpec};

fn request(id: &str, nodes: u32, walltime: SimTime, deadline: SimTime, max: &str, k: u32) -> JobRequest {
    JobRequest {
        request_id: id.into(),
        nodes_requested: nodes,
        walltime_estimate: walltime,
        deadline,
        max_priority_allowed: max.into(),
        speculation_factor: k,
        owning_incident_id: "inc".into(),
        actual_runtime: None,
    }
}

fn setup(specs: Vec<MachineSpec>, tokens: f64) -> (Fleet, Federator) {
    let fleet = Fleet::with_machines(specs).unwrap();
    let mut fed = Federator::new(FederatorConfig::default());
    for id in fleet.machine_ids().map(str::to_string).collect::<Vec<_>>() {
        fed.register_machine(&fleet, MachineRegistration::new(id)).unwrap();
    }
    fed.open_budget("inc", tokens).unwrap();
    (fleet, fed)
}

/// Advances fleet and federator together: fleet events first, then a poll
/// when one is due, with job start-up claims forwarded as they happen.
fn drive(fleet: &mut Fleet, fed: &mut Federator, until: SimTime) {
    loop {
        let next_poll = fed.next_poll_time();
        let next = fleet.next_event_time().map_or(next_poll, |t| t.min(next_poll));
        if next > until {
            for r in fleet.advance_to(until).unwrap() {
                claim(fleet, fed, &r);
            }
            return;
        }
        let records = fleet.advance_to(next).unwrap();
        for r in &records {
            claim(fleet, fed, r);
        }
        if next == fed.next_poll_time() {
            fed.poll_fleet(fleet);
        }
    }
}

fn claim(fleet: &mut Fleet, fed: &mut Federator, record: &FleetRecord) {
    match (record.transition, &record.job) {
        (FleetTransition::Running, Some(job)) => fed.claim(fleet, job),
        (FleetTransition::Completed, Some(job)) => fed.report_exit(fleet, job, record.time),
        _ => {}
    }
}

#[test]
fn idle_machine_placement_debits_cost() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8)], 10_000.0);
    let rec = fed.submit_federated(&mut fleet, request("r1", 2, 100, 1000, "normal", 1)).unwrap();
    assert_eq!(rec.placements.len(), 1);
    assert_eq!(rec.placements[0].machine_id, "a");
    assert_eq!(rec.federated_state, FederatedState::Running);
    assert_eq!(fed.budget("inc").unwrap().spent_tokens, 200.0);
    drive(&mut fleet, &mut fed, 200);
    let rec = fed.job_status("r1").unwrap();
    assert_eq!(rec.federated_state, FederatedState::Completed);
    assert_eq!(rec.completed_at, Some(100));
    fed.check_invariants().unwrap();
}

#[test]
fn escalation_cost_uses_multiplier() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 1, 8)], 10_000.0);
    fleet.submit("a", crate::fleet::SimJob::truthful("bg", 1, 1000, "normal")).unwrap();
    fed.poll_fleet(&mut fleet);
    let rec = fed.submit_federated(&mut fleet, request("r1", 1, 50, 100, "preempt", 1)).unwrap();
    assert_eq!(rec.placements[0].priority_class, "preempt");
    assert_eq!(fed.budget("inc").unwrap().spent_tokens, 200.0);
    assert_eq!(rec.federated_state, FederatedState::Running);
}

#[test]
fn speculation_keeps_one_winner_and_refunds_sibling() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8)], 10_000.0);
    let rec = fed.submit_federated(&mut fleet, request("r1", 2, 100, 1000, "normal", 2)).unwrap();
    assert_eq!(rec.placements.len(), 2);
    assert_eq!(rec.chosen_placement, Some(0));
    assert_eq!(rec.placements[1].state, PlacementState::Cancelled);
    assert!((fed.budget("inc").unwrap().spent_tokens - 220.0).abs() < 1e-9);
    drive(&mut fleet, &mut fed, 500);
    assert_eq!(fed.job_status("r1").unwrap().completed_placements(), 1);
    fed.check_invariants().unwrap();
}

#[test]
fn speculation_with_staggered_queues_picks_first_starter() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 1, 8), MachineSpec::new("b", 1, 8)], 10_000.0);
    fleet.submit("a", crate::fleet::SimJob::new("ja", 1, 500, 30, "normal")).unwrap();
    fleet.submit("b", crate::fleet::SimJob::truthful("jb", 1, 100, "normal")).unwrap();
    fed.poll_fleet(&mut fleet);
    let rec = fed.submit_federated(&mut fleet, request("r1", 1, 50, 10_000, "normal", 2)).unwrap();
    assert_eq!(rec.placements.iter().map(|p| p.machine_id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    drive(&mut fleet, &mut fed, 1000);
    let rec = fed.job_status("r1").unwrap();
    assert_eq!(rec.federated_state, FederatedState::Completed);
    assert_eq!(rec.placements[rec.chosen_placement.unwrap()].machine_id, "a");
    assert_eq!(rec.completed_placements(), 1);
    assert!(fed.decisions().iter().any(|d| d.kind == DecisionKind::SpeculationWinner));
}

#[test]
fn failover_within_two_polls() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8)], 10_000.0);
    fed.poll_fleet(&mut fleet);
    fed.submit_federated(&mut fleet, request("r1", 2, 300, 5000, "normal", 1)).unwrap();
    drive(&mut fleet, &mut fed, 44);
    fleet.inject_failure("a", 45).unwrap();
    drive(&mut fleet, &mut fed, 1000);
    let resub = fed.decisions().iter().find(|d| d.kind == DecisionKind::Resubmit).unwrap();
    assert!(resub.time <= 45 + 20, "resubmitted at {}", resub.time);
    let failed = fed.decisions().iter().find(|d| d.kind == DecisionKind::MachineFailed).unwrap();
    assert_eq!(failed.detail, "a");
    assert!(fleet.log().iter().filter(|r| r.machine == "a" && r.time > 45).all(|r| r.transition != FleetTransition::Queued));
    let rec = fed.job_status("r1").unwrap();
    assert_eq!(rec.federated_state, FederatedState::Completed);
    assert_eq!(rec.placements[rec.chosen_placement.unwrap()].machine_id, "b");
    fed.check_invariants().unwrap();
}

#[test]
fn exit_reported_before_outage_is_not_rerun() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8)], 10_000.0);
    fed.poll_fleet(&mut fleet);
    fed.submit_federated(&mut fleet, request("r1", 2, 95, 5000, "normal", 1)).unwrap();
    drive(&mut fleet, &mut fed, 96);
    fleet.inject_failure("a", 97).unwrap();
    drive(&mut fleet, &mut fed, 500);
    let rec = fed.job_status("r1").unwrap();
    assert_eq!(rec.federated_state, FederatedState::Completed);
    assert_eq!(rec.completed_at, Some(95));
    assert!(fed.decisions().iter().all(|d| d.kind != DecisionKind::Resubmit));
    assert_eq!(fleet.log().iter().filter(|r| r.transition == FleetTransition::Queued).count(), 1);
}

#[test]
fn failure_without_alternatives_fails_rescheduling() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8)], 10_000.0);
    fed.submit_federated(&mut fleet, request("r1", 2, 300, 5000, "normal", 1)).unwrap();
    fleet.inject_failure("a", 5).unwrap();
    drive(&mut fleet, &mut fed, 100);
    assert_eq!(fed.job_status("r1").unwrap().federated_state, FederatedState::FailedRescheduling);
    assert!(fed.drain_events().iter().any(|e| matches!(e, FederatorEvent::FailedRescheduling { .. })));
}

#[test]
fn insufficient_tokens_rejects_without_side_effects() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8)], 100.0);
    let err = fed.submit_federated(&mut fleet, request("r1", 2, 100, 1000, "normal", 1)).unwrap_err();
    assert!(matches!(err, FederatorError::InsufficientTokens { .. }));
    assert!(fed.job_status("r1").is_err());
    assert_eq!(fleet.query_status("a").unwrap().free_nodes, 4);
    assert_eq!(fed.budget("inc").unwrap().spent_tokens, 0.0);
}

#[test]
fn invalid_requests() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8)], 1e9);
    let bad = [
        request("r", 1, 10, 0, "normal", 1),
        request("r", 1, 10, 100, "normal", 2),
        request("r", 1, 10, 100, "normal", 0),
        request("r", 0, 10, 100, "normal", 1),
    ];
    for r in bad {
        assert!(matches!(fed.submit_federated(&mut fleet, r), Err(FederatorError::InvalidRequest(_))));
    }
    assert!(matches!(fed.submit_federated(&mut fleet, request("r", 1, 10, 100, "vip", 1)), Err(FederatorError::UnknownPriority(_))));
    assert!(matches!(fed.submit_federated(&mut fleet, request("r", 9, 10, 100, "normal", 1)), Err(FederatorError::NoFeasibleMachine { .. })));
    let mut other = request("r", 1, 10, 100, "normal", 1);
    other.owning_incident_id = "nope".into();
    assert!(matches!(fed.submit_federated(&mut fleet, other), Err(FederatorError::UnknownIncident(_))));
    fed.submit_federated(&mut fleet, request("r", 1, 10, 100, "normal", 1)).unwrap();
    assert!(matches!(fed.submit_federated(&mut fleet, request("r", 1, 10, 100, "normal", 1)), Err(FederatorError::DuplicateRequest(_))));
}

#[test]
fn cancel_refunds_queued_placement() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 1, 8)], 10_000.0);
    fleet.submit("a", crate::fleet::SimJob::truthful("bg", 1, 1000, "normal")).unwrap();
    fed.poll_fleet(&mut fleet);
    fed.submit_federated(&mut fleet, request("r1", 1, 100, 5000, "normal", 1)).unwrap();
    fed.cancel_request(&mut fleet, "r1").unwrap();
    assert_eq!(fed.job_status("r1").unwrap().federated_state, FederatedState::Abandoned);
    assert!((fed.budget("inc").unwrap().spent_tokens - 10.0).abs() < 1e-9);
    fed.cancel_request(&mut fleet, "r1").unwrap();
    assert_eq!(fleet.query_status("a").unwrap().queued_count(), 0);
}

#[test]
fn submit_to_down_machine_falls_back() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8)], 10_000.0);
    fleet.inject_failure("a", 0).unwrap();
    let rec = fed.submit_federated(&mut fleet, request("r1", 1, 100, 1000, "normal", 1)).unwrap();
    assert_eq!(rec.placements[0].machine_id, "b");
    assert_eq!(fed.machines()["a"].health, MachineHealth::Suspect);
    fed.poll_fleet(&mut fleet);
    assert_eq!(fed.machines()["a"].health, MachineHealth::Failed);
}

#[test]
fn decision_log_is_ndjson() {
    let (mut fleet, mut fed) = setup(vec![MachineSpec::new("a", 4, 8)], 10_000.0);
    fed.submit_federated(&mut fleet, request("r1", 1, 100, 1000, "normal", 1)).unwrap();
    let text = fed.decision_log_text();
    for line in text.lines() {
        let back: Decision = serde_json::from_str(line).unwrap();
        assert_eq!(back.to_line(), line);
    }
}

#[test]
fn config_loads_from_yaml() {
    let cfg: FederatorConfig = serde_yaml::from_str("poll_interval: 5\nmachines:\n  - machine_id: a\n").unwrap();
    assert_eq!(cfg.poll_interval, 5);
    assert_eq!(cfg.multiplier("preempt"), 4.0);
    assert_eq!(cfg.reservation_fee, 0.10);
    assert!(serde_yaml::from_str::<FederatorConfig>("bogus: 1").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_runs_keep_invariants(
        jobs in prop::collection::vec((1u32..=4, 10u64..300, 0u64..200, 1u32..=2, 0usize..3), 1..12),
        outage in prop::option::of((0usize..3, 1u64..400)),
    ) {
        let specs = vec![MachineSpec::new("a", 4, 8), MachineSpec::new("b", 4, 8), MachineSpec::new("c", 2, 8)];
        let (mut fleet, mut fed) = setup(specs, 1e7);
        let mut arrivals: Vec<_> = jobs.iter().enumerate().collect();
        arrivals.sort_by_key(|(i, j)| (j.2, *i));
        let mut outage = outage.map(|(m, t)| (["a", "b", "c"][m], t));
        for (i, (nodes, wall, at, k, class)) in arrivals {
            if let Some((m, t)) = outage {
                if t <= *at {
                    drive(&mut fleet, &mut fed, t);
                    fleet.inject_failure(m, t).unwrap();
                    outage = None;
                }
            }
            drive(&mut fleet, &mut fed, *at);
            let max = ["normal", "high", "preempt"][*class];
            let nodes = (*nodes).min(2);
            let _ = fed.submit_federated(&mut fleet, request(&format!("r{i}"), nodes, *wall, at + wall * 3, max, *k));
            prop_assert!(fed.check_invariants().is_ok(), "{:?}", fed.check_invariants());
        }
        drive(&mut fleet, &mut fed, 20_000);
        prop_assert!(fed.check_invariants().is_ok(), "{:?}", fed.check_invariants());
        fleet.check_invariants().unwrap();
        for rec in fed.records() {
            prop_assert!(rec.completed_placements() <= 1);
            prop_assert!(matches!(rec.federated_state, FederatedState::Completed | FederatedState::FailedRescheduling));
        }
    }
}
