//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urgent_core::ensemble::TelemetryFrame;
use urgent_core::fleet::{Fleet, MachineSpec, SimJob};
use urgent_core::workloads::{Cell, Direction, FireGrid, FireModel, WindField};

pub const CLASSES: [&str; 3] = ["normal", "high", "preempt"];

/// `machines` machines of 32 nodes with `jobs` random submissions spread over
/// the first hour, not yet advanced.
pub fn loaded_fleet(machines: usize, jobs: usize, seed: u64) -> Fleet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Fleet::with_machines((0..machines).map(|i| MachineSpec::new(format!("m{i}"), 32, 16))).unwrap();
    let mut arrivals: Vec<(u64, usize, SimJob)> = (0..jobs)
        .map(|i| {
            let job = SimJob::new(format!("j{i}"), rng.random_range(1..=16), rng.random_range(60..=1800), rng.random_range(30..=1800), CLASSES[rng.random_range(0..3)]);
            (rng.random_range(0..3600), rng.random_range(0..machines), job)
        })
        .collect();
    arrivals.sort_by_key(|a| a.0);
    for (t, m, job) in arrivals {
        fleet.advance_to(t).unwrap();
        fleet.submit(&format!("m{m}"), job).unwrap();
    }
    fleet
}

pub fn fire_model(size: usize, seed: u64) -> FireModel {
    let mut grid = FireGrid::new(size, size, seed);
    grid.set(size / 2, size / 2, Cell::Burning);
    FireModel::new(grid, WindField::new("bench", Direction::E, 0.5), 0.6)
}

pub fn frame(rows: usize, cols: usize, seed: u64) -> TelemetryFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TelemetryFrame { member_id: "m0".into(), seq: 1, sim_time: 30, rows, cols, values: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect() }
}
