//! Tag: predators chase a scripted prey on a square grid.
//!
//! Geometry: cells are `(x, y)` with `0 <= x, y < grid`; x grows rightward,
//! y grows downward. Predator actions are `0 stay, 1 up, 2 down, 3 left,
//! 4 right`; a move into a wall leaves the predator in place. Predators may
//! share cells.
//!
//! Step order: (1) all predators move from their chosen actions, (2) capture
//! check, (3) if no capture the prey makes two scripted single-cell moves,
//! (4) shaped reward. Capture requires at least one predator standing on the
//! prey cell and at least two further predators (not on the cell) within
//! Chebyshev distance 1 of it; it ends the episode with reward +10 and marks
//! success.
//!
//! The prey is scripted and fast: each of its two moves picks, from
//! `[stay, up, down, left, right]` in that order, the first in-bounds,
//! non-predator-occupied cell maximizing its minimum Chebyshev distance to
//! all predators. Ties therefore favor staying, then the earlier direction.
//!
//! Non-capture steps pay `-0.02 * mean(Chebyshev distance to prey) / (grid-1)`,
//! so |reward| <= 10 always.
//!
//! Observation layout per agent (d_obs = 3*n_agents + 3): own position
//! `[x, y] / (grid-1)`, then for every other predator in ascending index and
//! finally the prey a triple `[visible, dx/R, dy/R]` where R is the sensing
//! radius and dx, dy are offsets from the observing agent. Entities beyond
//! Chebyshev distance R contribute the padding value 0.0 in all three slots.
//! The last entry is `t/horizon`. The global state is all positions
//! normalized by `grid-1` plus `t/horizon`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DecPomdpSpec, Environment, StepResult};
use crate::error::{BvmeError, Result};

pub const TAG_ACTIONS: usize = 5;
pub const CAPTURE_REWARD: f64 = 10.0;
pub const DISTANCE_PENALTY: f64 = 0.02;
/// Predators needed adjacent to the prey cell (beyond those on it).
pub const CAPTURE_ADJACENT: usize = 2;

/// (dx, dy) for actions 0..5 in the documented order.
const MOVES: [(i64, i64); TAG_ACTIONS] = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug)]
pub struct TagGridEnv {
    spec: DecPomdpSpec,
    grid: i64,
    radius: i64,
    predators: Vec<(i64, i64)>,
    prey: (i64, i64),
    t: usize,
    terminated: bool,
}

fn cheb(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

impl TagGridEnv {
    pub fn new(n_agents: usize, horizon: usize, grid: usize, sensing_radius: usize) -> Result<Self> {
        if !(2..=8).contains(&n_agents) {
            return Err(BvmeError::Config(format!("tag_grid supports 2..=8 predators, got {n_agents}")));
        }
        if grid < 4 {
            return Err(BvmeError::Config(format!("tag_grid needs grid >= 4, got {grid}")));
        }
        if horizon == 0 {
            return Err(BvmeError::Config("tag_grid horizon must be positive".into()));
        }
        let d_obs = 2 + 3 * (n_agents - 1) + 3 + 1;
        Ok(TagGridEnv {
            spec: DecPomdpSpec {
                name: "tag_grid".into(),
                n_agents,
                n_actions: TAG_ACTIONS,
                d_obs,
                d_state: 2 * n_agents + 3,
                horizon,
                reward_bound: CAPTURE_REWARD,
            },
            grid: grid as i64,
            radius: sensing_radius as i64,
            predators: Vec::new(),
            prey: (0, 0),
            t: 0,
            terminated: true,
        })
    }

    /// Deterministic constructor for scripted tests: explicit positions, no
    /// placement randomness. Positions must be in bounds and distinct.
    pub fn with_positions(
        n_agents: usize,
        horizon: usize,
        grid: usize,
        sensing_radius: usize,
        predators: Vec<(i64, i64)>,
        prey: (i64, i64),
    ) -> Result<Self> {
        let mut env = TagGridEnv::new(n_agents, horizon, grid, sensing_radius)?;
        if predators.len() != n_agents {
            return Err(BvmeError::Contract(format!("{} predator positions for {} agents", predators.len(), n_agents)));
        }
        let mut all = predators.clone();
        all.push(prey);
        for &(x, y) in &all {
            if x < 0 || y < 0 || x >= env.grid || y >= env.grid {
                return Err(BvmeError::Contract(format!("position ({x},{y}) out of bounds")));
            }
        }
        let mut dedup = all.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != all.len() {
            return Err(BvmeError::Contract("positions must be distinct".into()));
        }
        env.predators = predators;
        env.prey = prey;
        env.t = 0;
        env.terminated = false;
        Ok(env)
    }

    fn in_bounds(&self, p: (i64, i64)) -> bool {
        p.0 >= 0 && p.1 >= 0 && p.0 < self.grid && p.1 < self.grid
    }

    fn min_dist_to_predators(&self, p: (i64, i64)) -> i64 {
        self.predators.iter().map(|&q| cheb(p, q)).min().unwrap()
    }

    /// One scripted prey move: first candidate in action order strictly
    /// maximizing the minimum Chebyshev distance to the predators.
    fn prey_move_once(&mut self) {
        let mut best = self.prey;
        let mut best_dist = self.min_dist_to_predators(self.prey);
        for (dx, dy) in MOVES.iter().skip(1) {
            let cand = (self.prey.0 + dx, self.prey.1 + dy);
            if !self.in_bounds(cand) || self.predators.contains(&cand) {
                continue;
            }
            let d = self.min_dist_to_predators(cand);
            if d > best_dist {
                best = cand;
                best_dist = d;
            }
        }
        self.prey = best;
    }

    fn capture(&self) -> bool {
        let on_cell = self.predators.iter().filter(|&&p| p == self.prey).count();
        if on_cell == 0 {
            return false;
        }
        let adjacent = self
            .predators
            .iter()
            .filter(|&&p| p != self.prey && cheb(p, self.prey) <= 1)
            .count();
        adjacent >= CAPTURE_ADJACENT
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let norm = (self.grid - 1) as f64;
        let r = self.radius as f64;
        let h = self.spec.horizon as f64;
        (0..self.spec.n_agents)
            .map(|i| {
                let me = self.predators[i];
                let mut o = Vec::with_capacity(self.spec.d_obs);
                o.push(me.0 as f64 / norm);
                o.push(me.1 as f64 / norm);
                for (j, &p) in self.predators.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    push_relative(&mut o, me, p, self.radius, r);
                }
                push_relative(&mut o, me, self.prey, self.radius, r);
                o.push(self.t as f64 / h);
                o
            })
            .collect()
    }

    fn state(&self) -> Vec<f64> {
        let norm = (self.grid - 1) as f64;
        let mut s = Vec::with_capacity(self.spec.d_state);
        for &(x, y) in &self.predators {
            s.push(x as f64 / norm);
            s.push(y as f64 / norm);
        }
        s.push(self.prey.0 as f64 / norm);
        s.push(self.prey.1 as f64 / norm);
        s.push(self.t as f64 / self.spec.horizon as f64);
        s
    }

    fn bundle(&self, reward: f64, terminated: bool, success: Option<bool>) -> StepResult {
        let mut info = BTreeMap::new();
        if let Some(s) = success {
            info.insert("success".to_string(), if s { 1.0 } else { 0.0 });
        }
        StepResult { observations: self.observations(), state: self.state(), reward, terminated, info }
    }
}

fn push_relative(o: &mut Vec<f64>, me: (i64, i64), other: (i64, i64), radius: i64, r: f64) {
    if cheb(me, other) <= radius {
        o.push(1.0);
        o.push((other.0 - me.0) as f64 / r);
        o.push((other.1 - me.1) as f64 / r);
    } else {
        // Documented padding value for out-of-range entities.
        o.push(0.0);
        o.push(0.0);
        o.push(0.0);
    }
}

impl Environment for TagGridEnv {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Result<StepResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<(i64, i64)> = (0..self.grid)
            .flat_map(|y| (0..self.grid).map(move |x| (x, y)))
            .collect();
        cells.shuffle(&mut rng);
        self.predators = cells[..self.spec.n_agents].to_vec();
        self.prey = cells[self.spec.n_agents];
        self.t = 0;
        self.terminated = false;
        Ok(self.bundle(0.0, false, None))
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.terminated {
            return Err(BvmeError::Contract("step called on terminated tag_grid episode".into()));
        }
        if actions.len() != self.spec.n_agents {
            return Err(BvmeError::Contract(format!(
                "tag_grid expects {} actions, got {}",
                self.spec.n_agents,
                actions.len()
            )));
        }
        if let Some(bad) = actions.iter().find(|a| **a >= TAG_ACTIONS) {
            return Err(BvmeError::Contract(format!("tag_grid action {bad} out of range 0..{TAG_ACTIONS}")));
        }

        for (p, &a) in self.predators.iter_mut().zip(actions) {
            let (dx, dy) = MOVES[a];
            let cand = (p.0 + dx, p.1 + dy);
            if cand.0 >= 0 && cand.1 >= 0 && cand.0 < self.grid && cand.1 < self.grid {
                *p = cand;
            }
        }

        if self.capture() {
            self.t += 1;
            self.terminated = true;
            return Ok(self.bundle(CAPTURE_REWARD, true, Some(true)));
        }

        self.prey_move_once();
        self.prey_move_once();

        let mean_dist = self.predators.iter().map(|&p| cheb(p, self.prey) as f64).sum::<f64>()
            / self.spec.n_agents as f64;
        let reward = -DISTANCE_PENALTY * mean_dist / (self.grid - 1) as f64;

        self.t += 1;
        let terminated = self.t >= self.spec.horizon;
        self.terminated = terminated;
        let success = terminated.then_some(false);
        Ok(self.bundle(reward, terminated, success))
    }
}
