use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wind::clamp_unit;
use super::{Direction, ParamValue, WindField, WorkloadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Unburnt,
    Burning,
    Burnt,
    Unburnable,
}

impl Cell {
    pub fn to_char(self) -> char {
        match self {
            Self::Unburnt => '.',
            Self::Burning => '*',
            Self::Burnt => 'x',
            Self::Unburnable => '#',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '.' => Some(Self::Unburnt),
            '*' => Some(Self::Burning),
            'x' => Some(Self::Burnt),
            '#' => Some(Self::Unburnable),
            _ => None,
        }
    }

    /// Numeric encoding used in telemetry frames.
    pub fn value(self) -> f64 {
        match self {
            Self::Unburnable => -1.0,
            Self::Unburnt => 0.0,
            Self::Burnt => 0.5,
            Self::Burning => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub seed: u64,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl FireGrid {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self { width, height, cells: vec![Cell::Unburnt; width * height], seed, step: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Restarts the random stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Parses the one-character-per-cell text format. Blank lines and lines
    /// starting with `;` are skipped.
    pub fn parse(text: &str, seed: u64) -> Result<Self, WorkloadError> {
        let mut rows: Vec<Vec<Cell>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            let row = line
                .chars()
                .map(|c| Cell::from_char(c).ok_or_else(|| WorkloadError::GridFormat { line: n + 1, reason: format!("unknown cell {c:?}") }))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(WorkloadError::GridFormat { line: n + 1, reason: format!("row has {} cells, expected {}", row.len(), first.len()) });
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(WorkloadError::GridFormat { line: 0, reason: "empty grid".into() });
        }
        let mut grid = Self::new(rows[0].len(), rows.len(), seed);
        grid.cells = rows.into_iter().flatten().collect();
        Ok(grid)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for row in self.cells.chunks(self.width) {
            out.extend(row.iter().map(|c| c.to_char()));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cell: Cell) {
        self.cells[row * self.width + col] = cell;
    }

    pub fn count(&self, cell: Cell) -> usize {
        self.cells.iter().filter(|c| **c == cell).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.value()).collect()
    }
}

impl fmt::Display for FireGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

const NEIGHBOURS: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

/// Advances the automaton one step. Burning cells are visited in row-major
/// order and each tries its unburnt N, E, S, W neighbours in turn, one draw
/// per attempt.
pub fn fire_step(grid: &mut FireGrid, wind: &WindField, p: f64) {
    let p = clamp_unit(p);
    let strength = clamp_unit(wind.strength);
    let before = grid.cells.clone();
    let mut next = before.clone();
    for row in 0..grid.height {
        for col in 0..grid.width {
            if before[row * grid.width + col] != Cell::Burning {
                continue;
            }
            next[row * grid.width + col] = Cell::Burnt;
            for dir in NEIGHBOURS {
                let (dr, dc) = dir.offset().expect("compass direction");
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r >= grid.height as i64 || c >= grid.width as i64 {
                    continue;
                }
                let idx = r as usize * grid.width + c as usize;
                if before[idx] != Cell::Unburnt {
                    continue;
                }
                let prob = if wind.direction == dir {
                    p * (1.0 + strength)
                } else if wind.direction.offset() == Some((-dr, -dc)) {
                    p * (1.0 - strength)
                } else {
                    p
                };
                if grid.rng.random::<f64>() < prob.clamp(0.0, 1.0) {
                    next[idx] = Cell::Burning;
                }
            }
        }
    }
    grid.cells = next;
    grid.step += 1;
}

/// A fire run with its steerable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FireModel {
    pub grid: FireGrid,
    pub wind: WindField,
    pub spread_prob: f64,
}

impl FireModel {
    pub const STEERABLE: [&'static str; 3] = ["wind_direction", "wind_strength", "spread_prob"];

    pub fn new(grid: FireGrid, wind: WindField, spread_prob: f64) -> Self {
        Self { grid, wind, spread_prob: clamp_unit(spread_prob) }
    }

    pub fn step(&mut self) {
        fire_step(&mut self.grid, &self.wind, self.spread_prob);
    }

    pub fn is_steerable(name: &str) -> bool {
        Self::STEERABLE.contains(&name)
    }

    pub fn set_param(&mut self, name: &str, value: &ParamValue) -> Result<(), WorkloadError> {
        let bad = |reason: &str| WorkloadError::BadValue { name: name.to_string(), reason: reason.to_string() };
        match name {
            "wind_direction" => self.wind.direction = value.as_str().ok_or_else(|| bad("expected a direction"))?.parse()?,
            "wind_strength" => self.wind.strength = clamp_unit(value.as_f64().ok_or_else(|| bad("expected a number"))?),
            "spread_prob" => {
                let p = value.as_f64().ok_or_else(|| bad("expected a number"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(bad("must lie in [0, 1]"));
                }
                self.spread_prob = p;
            }
            other => return Err(WorkloadError::NotSteerable(other.to_string())),
        }
        Ok(())
    }
}
