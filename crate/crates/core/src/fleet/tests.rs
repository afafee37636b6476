use std::collections::{BTreeMap, VecDeque};

use proptest::prelude::*;

use super::*;

fn one(nodes: u32) -> Fleet {
    Fleet::with_machines([MachineSpec::new("m", nodes, 8)]).unwrap()
}

#[test]
fn empty_machine_starts_job_immediately() {
    let mut fleet = one(4);
    fleet.submit("m", SimJob::truthful("a", 2, 100, "normal")).unwrap();
    let status = fleet.query_status("m").unwrap();
    assert_eq!(status.free_nodes, 2);
    assert_eq!(fleet.job("m", "a").unwrap().state, JobState::Running);
}

#[test]
fn oversized_request_is_infeasible() {
    let mut fleet = one(4);
    let err = fleet.submit("m", SimJob::truthful("a", 5, 100, "normal")).unwrap_err();
    assert!(matches!(err, FleetError::InfeasibleRequest { requested: 5, total: 4, .. }));
    assert!(matches!(fleet.submit("zz", SimJob::truthful("a", 1, 1, "normal")), Err(FleetError::UnknownMachine(_))));
    assert!(matches!(fleet.submit("m", SimJob::truthful("a", 1, 1, "vip")), Err(FleetError::UnknownClass(_))));
}

/// Start times on a single-node FIFO machine: each job starts when both it has
/// arrived and its predecessor has finished.
fn single_node_fifo_starts(arrivals: &[(SimTime, SimTime)]) -> Vec<SimTime> {
    let mut free_at = 0;
    arrivals
        .iter()
        .map(|&(arrive, runtime)| {
            let start = arrive.max(free_at);
            free_at = start + runtime;
            start
        })
        .collect()
}

#[test]
fn third_job_queues_behind_running_and_queued() {
    let mut fleet = one(1);
    fleet.submit("m", SimJob::truthful("a", 1, 400, "normal")).unwrap();
    fleet.advance_to(100).unwrap();
    fleet.submit("m", SimJob::truthful("b", 1, 300, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("c", 1, 50, "normal")).unwrap();
    let status = fleet.query_status("m").unwrap();
    assert_eq!(status.running[0].remaining_walltime, 300);
    assert_eq!(status.queued_per_class[0].jobs.len(), 2);

    let expected = single_node_fifo_starts(&[(0, 400), (100, 300), (100, 50)]);
    assert_eq!(expected[2], 100 + 600);
    fleet.advance_to(2000).unwrap();
    let started: Vec<_> = ["a", "b", "c"].iter().map(|j| fleet.job("m", j).unwrap()).collect();
    assert_eq!(started[2].started_at, Some(expected[2]));
    assert_eq!(started[1].started_at, Some(expected[1]));
}

#[test]
fn preempt_job_evicts_most_recent_normal_job() {
    let mut fleet = one(2);
    fleet.submit("m", SimJob::truthful("old", 1, 100, "normal")).unwrap();
    fleet.advance_to(5).unwrap();
    fleet.submit("m", SimJob::truthful("new", 1, 100, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("urgent", 1, 50, "preempt")).unwrap();
    assert_eq!(fleet.job("m", "urgent").unwrap().state, JobState::Running);
    assert_eq!(fleet.job("m", "new").unwrap().state, JobState::Queued);
    assert_eq!(fleet.job("m", "old").unwrap().state, JobState::Running);
    let tail: Vec<_> = fleet.log().iter().rev().take(3).map(|r| r.to_string()).collect();
    assert_eq!(tail, ["5\tm\turgent\trunning", "5\tm\tnew\tqueued", "5\tm\tnew\tpreempted"]);
    // Restart from scratch once the urgent job frees its node.
    fleet.advance_to(1000).unwrap();
    let new = fleet.job("m", "new").unwrap();
    assert_eq!((new.started_at, new.finished_at), (Some(55), Some(155)));
}

#[test]
fn high_class_starts_when_nodes_free() {
    let mut fleet = one(2);
    fleet.submit("m", SimJob::truthful("h", 1, 10, "high")).unwrap();
    assert_eq!(fleet.job("m", "h").unwrap().state, JobState::Running);
}

#[test]
fn no_backfill_within_class() {
    let mut fleet = one(4);
    fleet.submit("m", SimJob::truthful("busy", 3, 100, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("big", 4, 10, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("small", 1, 10, "normal")).unwrap();
    assert_eq!(fleet.query_status("m").unwrap().free_nodes, 1);
    assert_eq!(fleet.job("m", "small").unwrap().state, JobState::Queued);
    fleet.advance_to(200).unwrap();
    assert_eq!(fleet.job("m", "big").unwrap().started_at, Some(100));
    assert_eq!(fleet.job("m", "small").unwrap().started_at, Some(110));
}

#[test]
fn cancel_queued_running_and_twice() {
    let mut fleet = one(2);
    fleet.submit("m", SimJob::truthful("r", 2, 100, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("q", 1, 100, "normal")).unwrap();
    assert_eq!(fleet.cancel("m", "q").unwrap(), CancelAck::Cancelled);
    assert_eq!(fleet.query_status("m").unwrap().free_nodes, 0);
    assert_eq!(fleet.cancel("m", "r").unwrap(), CancelAck::Cancelled);
    assert_eq!(fleet.query_status("m").unwrap().free_nodes, 2);
    assert_eq!(fleet.cancel("m", "r").unwrap(), CancelAck::AlreadyTerminal(JobState::Cancelled));
    assert!(matches!(fleet.cancel("m", "nope"), Err(FleetError::UnknownJob { .. })));
}

#[test]
fn status_of_empty_and_failed_machines() {
    let mut fleet = one(3);
    let s = fleet.query_status("m").unwrap();
    assert_eq!((s.free_nodes, s.queued_count(), s.healthy), (3, 0, true));
    fleet.submit("m", SimJob::truthful("a", 3, 100, "normal")).unwrap();
    fleet.submit("m", SimJob::truthful("b", 1, 100, "normal")).unwrap();
    fleet.inject_failure("m", 10).unwrap();
    fleet.advance_to(20).unwrap();
    let s = fleet.query_status("m").unwrap();
    assert!(!s.healthy);
    // Last-known contents survive.
    assert_eq!((s.running.len(), s.queued_count(), s.sample_time), (1, 1, 10));
    assert!(matches!(fleet.submit("m", SimJob::truthful("c", 1, 1, "normal")), Err(FleetError::MachineDown(_))));
    fleet.restore("m").unwrap();
    let s = fleet.query_status("m").unwrap();
    assert_eq!((s.healthy, s.free_nodes, s.running.len()), (true, 3, 0));
}

#[test]
fn outage_kills_every_live_job() {
    let mut fleet = one(2);
    for (id, nodes) in [("r1", 1), ("r2", 1), ("q1", 2), ("q2", 1), ("q3", 1)] {
        fleet.submit("m", SimJob::truthful(id, nodes, 100, "normal")).unwrap();
    }
    let fired = fleet.inject_failure("m", 0).unwrap();
    let killed = fired.iter().filter(|r| r.transition == FleetTransition::KilledByFailure).count();
    assert_eq!(killed, 5);
    assert!(fleet.jobs().all(|(_, j)| j.state == JobState::KilledByFailure));
    fleet.check_invariants().unwrap();
}

#[test]
fn advance_to_now_fires_nothing_and_time_cannot_reverse() {
    let mut fleet = one(2);
    fleet.submit("m", SimJob::truthful("a", 1, 10, "normal")).unwrap();
    fleet.advance_to(5).unwrap();
    assert!(fleet.advance_to(5).unwrap().is_empty());
    assert_eq!(fleet.advance_to(4).unwrap_err(), FleetError::TimeReversal { now: 5, requested: 4 });
    assert!(matches!(fleet.inject_failure("m", 1), Err(FleetError::TimeReversal { .. })));
}

#[test]
fn scheduled_failures_from_spec_fire() {
    let spec = MachineSpec::new("m", 2, 1).with_failure(30);
    let mut fleet = Fleet::with_machines([spec]).unwrap();
    fleet.submit("m", SimJob::truthful("a", 1, 100, "normal")).unwrap();
    let fired = fleet.advance_to(40).unwrap();
    assert_eq!(fired[0].to_string(), "30\tm\t-\toutage");
    assert_eq!(fleet.job("m", "a").unwrap().state, JobState::KilledByFailure);
}

#[test]
fn walltime_truncates_runtime() {
    let mut fleet = one(1);
    fleet.submit("m", SimJob::new("a", 1, 100, 500, "normal")).unwrap();
    fleet.advance_to(1000).unwrap();
    assert_eq!(fleet.job("m", "a").unwrap().finished_at, Some(100));
}

// ---------------------------------------------------------------------------
// Randomised traces.

#[derive(Debug, Clone)]
enum Op {
    Submit { at: SimTime, machine: usize, nodes: u32, walltime: SimTime, runtime: SimTime, class: usize },
    Cancel { at: SimTime, machine: usize, pick: usize },
    Fail { at: SimTime, machine: usize },
}

impl Op {
    fn at(&self) -> SimTime {
        match self {
            Op::Submit { at, .. } | Op::Cancel { at, .. } | Op::Fail { at, .. } => *at,
        }
    }
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => (0..400u64, 0..3usize, 1..=4u32, 1..120u64, 1..150u64, 0..3usize).prop_map(
            |(at, machine, nodes, walltime, runtime, class)| Op::Submit { at, machine, nodes, walltime, runtime, class }
        ),
        2 => (0..400u64, 0..3usize, 0..50usize).prop_map(|(at, machine, pick)| Op::Cancel { at, machine, pick }),
        1 => (0..400u64, 0..3usize).prop_map(|(at, machine)| Op::Fail { at, machine }),
    ]
}

const MACHINES: [(&str, u32); 3] = [("a", 4), ("b", 2), ("c", 6)];
const CLASSES: [&str; 3] = ["normal", "high", "preempt"];

fn fleet3() -> Fleet {
    Fleet::with_machines(MACHINES.iter().map(|(id, n)| MachineSpec::new(*id, *n, 4))).unwrap()
}

/// Applies a trace; `step` forces one-second advances between operations.
fn run_trace(ops: &[Op], step: bool, mut check: impl FnMut(&Fleet)) -> Fleet {
    let mut ops = ops.to_vec();
    ops.sort_by_key(Op::at);
    let mut fleet = fleet3();
    for (i, op) in ops.iter().enumerate() {
        if step {
            while fleet.now() < op.at() {
                let t = fleet.now() + 1;
                fleet.advance_to(t).unwrap();
                check(&fleet);
            }
        } else {
            fleet.advance_to(op.at()).unwrap();
        }
        match *op {
            Op::Submit { machine, nodes, walltime, runtime, class, .. } => {
                let job = SimJob::new(format!("j{i}"), nodes, walltime, runtime, CLASSES[class]);
                let _ = fleet.submit(MACHINES[machine].0, job);
            }
            Op::Cancel { machine, pick, .. } => {
                let m = MACHINES[machine].0;
                let ids: Vec<String> = fleet.jobs().filter(|(mm, _)| *mm == m).map(|(_, j)| j.job_id.clone()).collect();
                if !ids.is_empty() {
                    fleet.cancel(m, &ids[pick % ids.len()]).unwrap();
                }
            }
            Op::Fail { machine, .. } => {
                fleet.inject_failure(MACHINES[machine].0, fleet.now()).unwrap();
            }
        }
        check(&fleet);
    }
    let end = fleet.now() + 2000;
    if step {
        while fleet.now() < end {
            let t = fleet.now() + 1;
            fleet.advance_to(t).unwrap();
        }
    } else {
        fleet.advance_to(end).unwrap();
    }
    check(&fleet);
    fleet
}

/// Rebuilds queues from the text log and checks, at every start, that each
/// higher-class queue head did not fit in the free pool.
fn check_priority_dominance(fleet: &Fleet) -> Result<(), String> {
    struct Replay {
        free: u32,
        queues: Vec<VecDeque<String>>,
    }
    let mut machines: BTreeMap<&str, Replay> = MACHINES
        .iter()
        .map(|(id, n)| (*id, Replay { free: *n, queues: vec![VecDeque::new(); 3] }))
        .collect();
    let mut last: BTreeMap<String, &str> = BTreeMap::new();
    for line in fleet.log_text().lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let (machine, job, transition) = (f[1], f[2], f[3]);
        let m = machines.get_mut(machine).unwrap();
        if job == "-" {
            if transition == "restored" || transition == "outage" {
                m.free = fleet.spec(machine).unwrap().total_nodes;
                m.queues.iter_mut().for_each(VecDeque::clear);
            }
            continue;
        }
        let sim = fleet.job(machine, job).unwrap();
        let rank = CLASSES.iter().position(|c| *c == sim.priority_class).unwrap();
        let key = format!("{machine}/{job}");
        let prev = last.insert(key, transition).unwrap_or("");
        match transition {
            "queued" if prev == "preempted" => m.queues[rank].push_front(job.to_string()),
            "queued" => m.queues[rank].push_back(job.to_string()),
            "running" => {
                for higher in rank + 1..3 {
                    if let Some(h) = m.queues[higher].front() {
                        if h != job && fleet.job(machine, h).unwrap().nodes_requested <= m.free {
                            return Err(format!("{line}: higher-class {h} fit in {} free nodes", m.free));
                        }
                    }
                }
                m.queues[rank].retain(|j| j != job);
                m.free -= sim.nodes_requested;
            }
            "completed" | "preempted" => m.free += sim.nodes_requested,
            "cancelled" if prev == "running" => m.free += sim.nodes_requested,
            "cancelled" | "killed_by_failure" => m.queues[rank].retain(|j| j != job),
            other => return Err(format!("unexpected transition {other}")),
        }
    }
    Ok(())
}

/// All suffixes of the bottom-class running list, shortest first; the first
/// that frees enough is the expected victim set.
fn smallest_sufficient_suffix(running: &[(String, u32)], free: u32, needed: u32) -> Option<Vec<String>> {
    (1..=running.len()).find_map(|len| {
        let suffix = &running[running.len() - len..];
        let freed: u32 = suffix.iter().map(|(_, n)| n).sum();
        (free + freed >= needed).then(|| suffix.iter().rev().map(|(id, _)| id.clone()).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn conservation_and_settled_queues(ops in prop::collection::vec(op_strategy(), 1..60)) {
        run_trace(&ops, false, |fleet| {
            fleet.check_invariants().unwrap();
            for id in fleet.machine_ids() {
                let s = fleet.query_status(id).unwrap();
                if !s.healthy { continue; }
                // Settled: every non-preempting head is blocked.
                for q in &s.queued_per_class[..2] {
                    if let Some(head) = q.jobs.first() {
                        assert!(head.nodes > s.free_nodes, "{id}: {} could start", head.job_id);
                    }
                }
            }
        });
    }

    #[test]
    fn every_job_terminates_or_stays_live(ops in prop::collection::vec(op_strategy(), 1..60)) {
        let fleet = run_trace(&ops, false, |_| {});
        let submitted = fleet.log().iter().filter(|r| r.transition == FleetTransition::Queued).map(|r| (&r.machine, &r.job)).collect::<std::collections::BTreeSet<_>>();
        for (machine, job) in submitted {
            let sim = fleet.job(machine, job.as_deref().unwrap()).unwrap();
            // With the horizon well past every walltime, only terminal states remain.
            prop_assert!(sim.state.is_terminal(), "{machine}/{} left in {}", sim.job_id, sim.state);
            let terminal_lines = fleet.log().iter().filter(|r| &r.machine == machine && &r.job == job && matches!(r.transition, FleetTransition::Completed | FleetTransition::Cancelled | FleetTransition::KilledByFailure)).count();
            prop_assert_eq!(terminal_lines, 1);
        }
    }

    #[test]
    fn deterministic_and_step_equivalent(ops in prop::collection::vec(op_strategy(), 1..40)) {
        let a = run_trace(&ops, false, |_| {});
        let b = run_trace(&ops, false, |_| {});
        prop_assert_eq!(a.log_text(), b.log_text());
        let stepped = run_trace(&ops, true, |_| {});
        prop_assert_eq!(a.log_text(), stepped.log_text());
    }

    #[test]
    fn lower_classes_only_start_when_higher_heads_do_not_fit(ops in prop::collection::vec(op_strategy(), 1..60)) {
        let fleet = run_trace(&ops, false, |_| {});
        prop_assert_eq!(check_priority_dominance(&fleet), Ok(()));
    }

    #[test]
    fn preemption_takes_smallest_suffix(
        normals in prop::collection::vec(1..=3u32, 1..6),
        highs in 0..2u32,
        urgent in 1..=8u32,
    ) {
        let total = 8;
        let mut fleet = Fleet::with_machines([MachineSpec::new("m", total, 1)]).unwrap();
        let mut t = 0;
        for (i, nodes) in normals.iter().enumerate() {
            let _ = fleet.submit("m", SimJob::truthful(format!("n{i}"), *nodes, 1000, "normal"));
            t += 1;
            fleet.advance_to(t).unwrap();
        }
        for i in 0..highs {
            let _ = fleet.submit("m", SimJob::truthful(format!("h{i}"), 2, 1000, "high"));
        }
        let before = fleet.query_status("m").unwrap();
        let bottom: Vec<(String, u32)> = before.running.iter().filter(|r| r.priority_class == "normal").map(|r| (r.job_id.clone(), r.nodes)).collect();
        let expected = if urgent <= before.free_nodes {
            Some(vec![])
        } else {
            smallest_sufficient_suffix(&bottom, before.free_nodes, urgent)
        };
        fleet.submit("m", SimJob::truthful("urgent", urgent, 10, "preempt")).unwrap();
        let preempted: Vec<String> = fleet.log().iter().filter(|r| r.transition == FleetTransition::Preempted).map(|r| r.job.clone().unwrap()).collect();
        match expected {
            Some(victims) => {
                prop_assert_eq!(preempted, victims);
                prop_assert_eq!(fleet.job("m", "urgent").unwrap().state, JobState::Running);
            }
            None => {
                prop_assert!(preempted.is_empty());
                prop_assert_eq!(fleet.job("m", "urgent").unwrap().state, JobState::Queued);
            }
        }
        fleet.check_invariants().unwrap();
    }
}

/// Replays the text log independently and compares live sets with a snapshot.
#[test]
fn mid_scenario_snapshot_matches_log_replay() {
    let ops: Vec<Op> = (0..40)
        .map(|i| Op::Submit { at: i * 7, machine: (i % 3) as usize, nodes: (i % 4 + 1) as u32, walltime: 30 + i * 3, runtime: 25 + i * 2, class: (i % 5 % 3) as usize })
        .collect();
    let mut fleet = fleet3();
    for (i, op) in ops.iter().enumerate() {
        if let Op::Submit { at, machine, nodes, walltime, runtime, class } = *op {
            fleet.advance_to(at).unwrap();
            let _ = fleet.submit(MACHINES[machine].0, SimJob::new(format!("j{i}"), nodes, walltime, runtime, CLASSES[class]));
        }
    }
    fleet.advance_to(300).unwrap();
    let mut running: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut queued: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let text = fleet.log_text();
    for line in text.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let (m, j, tr) = (f[1], f[2].to_string(), f[3]);
        running.entry(m).or_default().retain(|x| *x != j);
        queued.entry(m).or_default().retain(|x| *x != j);
        match tr {
            "running" => running.get_mut(m).unwrap().push(j),
            "queued" => queued.get_mut(m).unwrap().push(j),
            _ => {}
        }
    }
    for (m, _) in MACHINES {
        let s = fleet.query_status(m).unwrap();
        let live_running: Vec<String> = s.running.iter().map(|r| r.job_id.clone()).collect();
        assert_eq!(&live_running, running.get(m).unwrap());
        let mut live_queued: Vec<String> = s.queued_per_class.iter().flat_map(|q| q.jobs.iter().map(|e| e.job_id.clone())).collect();
        let mut replayed = queued.get(m).unwrap().clone();
        live_queued.sort();
        replayed.sort();
        assert_eq!(live_queued, replayed);
    }
}
