use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn obs(dir: Direction, speed: f64) -> WindObservation {
    WindObservation { station: "s".into(), direction: dir, speed }
}

#[test]
fn majority_wind() {
    let w = weather_stub("r", &[obs(Direction::E, 0.4), obs(Direction::E, 0.8), obs(Direction::N, 1.0)], 1);
    assert_eq!(w.direction, Direction::E);
    assert!((w.strength - 0.6).abs() < 1e-12);
    assert_eq!(weather_stub("r", &[], 1), WindField::calm("r"));
    assert_eq!(weather_stub("r", &[obs(Direction::S, 7.0)], 1).strength, 1.0);
}

#[test]
fn tie_break_is_seeded() {
    let o = [obs(Direction::E, 0.5), obs(Direction::W, 0.5)];
    for seed in 0..20 {
        assert_eq!(weather_stub("r", &o, seed), weather_stub("r", &o, seed));
    }
    let picks: std::collections::BTreeSet<_> = (0..64).map(|s| weather_stub("r", &o, s).direction).collect();
    assert_eq!(picks.len(), 2);
}

fn single_fire(w: usize, h: usize, seed: u64) -> FireGrid {
    let mut g = FireGrid::new(w, h, seed);
    g.set(h / 2, w / 2, Cell::Burning);
    g
}

#[test]
fn forced_spread() {
    let mut g = single_fire(3, 3, 0);
    fire_step(&mut g, &WindField::calm("r"), 1.0);
    assert_eq!(g.to_text(), ".*.\n*x*\n.*.\n");
    let mut g = FireGrid::parse("###\n#*#\n###\n", 0).unwrap();
    fire_step(&mut g, &WindField::calm("r"), 1.0);
    assert_eq!(g.to_text(), "###\n#x#\n###\n");
}

#[test]
fn strong_wind_blocks_upwind() {
    let mut g = single_fire(3, 3, 0);
    fire_step(&mut g, &WindField::new("r", Direction::E, 1.0), 0.5);
    assert_eq!(g.get(1, 2), Cell::Burning);
    assert_eq!(g.get(1, 0), Cell::Unburnt);
}

#[test]
fn grid_text_round_trip_and_errors() {
    let text = "..*\n#x.\n";
    assert_eq!(FireGrid::parse(text, 3).unwrap().to_text(), text);
    assert!(matches!(FireGrid::parse("..\n...\n", 0), Err(WorkloadError::GridFormat { line: 2, .. })));
    assert!(matches!(FireGrid::parse(".?\n", 0), Err(WorkloadError::GridFormat { line: 1, .. })));
}

#[test]
fn steering_params() {
    let mut m = FireModel::new(single_fire(5, 5, 1), WindField::calm("r"), 0.5);
    m.set_param("wind_direction", &"W".into()).unwrap();
    m.set_param("wind_strength", &0.7.into()).unwrap();
    assert_eq!(m.wind, WindField::new("r", Direction::W, 0.7));
    assert!(matches!(m.set_param("fuel", &1.0.into()), Err(WorkloadError::NotSteerable(_))));
    assert!(m.set_param("spread_prob", &2.0.into()).is_err());
}

/// Straightforward second implementation over a char matrix.
fn reference_run(w: usize, h: usize, seed: u64, p: f64, wind: (i64, i64), s: f64, steps: usize) -> Vec<Vec<char>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = vec![vec!['.'; w]; h];
    g[h / 2][w / 2] = '*';
    for _ in 0..steps {
        let old = g.clone();
        for r in 0..h {
            for c in 0..w {
                if old[r][c] != '*' {
                    continue;
                }
                g[r][c] = 'x';
                for (dr, dc) in [(-1i64, 0i64), (0, 1), (1, 0), (0, -1)] {
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 || old[nr as usize][nc as usize] != '.' {
                        continue;
                    }
                    let mut q = p;
                    if (dr, dc) == wind {
                        q = p * (1.0 + s);
                    } else if (-dr, -dc) == wind {
                        q = p * (1.0 - s);
                    }
                    let q = q.clamp(0.0, 1.0);
                    let x: f64 = rng.random();
                    if x < q {
                        g[nr as usize][nc as usize] = '*';
                    }
                }
            }
        }
    }
    g
}

#[test]
fn golden_wildfire_run() {
    let mut g = single_fire(20, 20, 42);
    let wind = WindField::new("r", Direction::E, 0.5);
    for _ in 0..10 {
        fire_step(&mut g, &wind, 0.5);
    }
    let reference = reference_run(20, 20, 42, 0.5, (0, 1), 0.5, 10);
    let text: String = reference.iter().map(|r| r.iter().collect::<String>() + "\n").collect();
    assert_eq!(g.to_text(), text);
    assert_eq!(g.count(Cell::Burnt), GOLDEN_BURNT);
    assert_eq!(g.count(Cell::Burning), GOLDEN_BURNING);
}

const GOLDEN_BURNT: usize = 28;
const GOLDEN_BURNING: usize = 5;

proptest! {
    #[test]
    fn monotone_damage_and_determinism(seed in any::<u64>(), p in 0.0f64..=1.0, s in 0.0f64..=1.0, d in 0usize..5) {
        let dir = [Direction::N, Direction::E, Direction::S, Direction::W, Direction::Calm][d];
        let wind = WindField::new("r", dir, s);
        let mut a = single_fire(12, 9, seed);
        let mut b = a.clone();
        let mut damage = 1;
        for _ in 0..8 {
            let prev = a.clone();
            fire_step(&mut a, &wind, p);
            fire_step(&mut b, &wind, p);
            for (x, y) in prev.cells.iter().zip(&a.cells) {
                let ok = x == y || matches!((x, y), (Cell::Unburnt, Cell::Burning) | (Cell::Burning, Cell::Burnt));
                prop_assert!(ok);
            }
            let now = a.count(Cell::Burnt) + a.count(Cell::Burning);
            prop_assert!(now >= damage);
            damage = now;
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn steering_changes_only_later_steps(seed in any::<u64>(), t in 0usize..6) {
        let mut a = FireModel::new(single_fire(15, 15, seed), WindField::new("r", Direction::N, 0.5), 0.6);
        let mut b = a.clone();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        for step in 0..10 {
            if step == t {
                b.set_param("wind_direction", &"S".into()).unwrap();
            }
            a.step();
            b.step();
            ta.push(a.grid.to_text());
            tb.push(b.grid.to_text());
        }
        prop_assert_eq!(&ta[..t], &tb[..t]);
    }
}
