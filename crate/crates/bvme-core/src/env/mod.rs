//! Small cooperative Dec-POMDPs with deterministic seeded dynamics.
//!
//! Two tasks ship with the crate:
//!
//! * [`gather`]: an n-agent, 3-arm coordination game at horizon 3. The team
//!   earns +1 on every step where all agents pick the same arm; an episode
//!   counts as a success when the agents are gathered on the final step.
//!   Small enough for exhaustive open-loop policy search.
//! * [`tag`]: four predators chase one scripted prey on an 8x8 grid. The
//!   prey moves twice per predator step, always maximizing its minimum
//!   Chebyshev distance to the predators, so captures require coordinated
//!   encirclement. Observations are truncated to a sensing radius, which is
//!   what makes inter-agent messages carry real information.

pub mod gather;
pub mod tag;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};

pub use gather::GatherEnv;
pub use tag::TagGridEnv;

/// Static description of a Dec-POMDP instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecPomdpSpec {
    pub name: String,
    pub n_agents: usize,
    /// Size of each agent's discrete action set.
    pub n_actions: usize,
    pub d_obs: usize,
    pub d_state: usize,
    pub horizon: usize,
    /// Largest possible absolute one-step team reward.
    pub reward_bound: f64,
}

/// Observations, global state, and step outcome returned by reset/step.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// One observation vector per agent, each of length `d_obs`.
    pub observations: Vec<Vec<f64>>,
    /// Centralized state, length `d_state` (training only, never fed to agents).
    pub state: Vec<f64>,
    /// Shared team reward for the transition (0.0 on reset).
    pub reward: f64,
    pub terminated: bool,
    /// Extra scalars; `success = 1.0` marks a successful episode at the
    /// terminal step.
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    pub fn success(&self) -> bool {
        self.info.get("success").copied().unwrap_or(0.0) > 0.5
    }
}

/// Episodic multi-agent environment with seeded deterministic dynamics.
///
/// `reset(seed)` must fully determine the episode given the action sequence;
/// `step` is a contract error after termination, with a wrong-length action
/// slice, or with an out-of-range action.
pub trait Environment {
    fn spec(&self) -> &DecPomdpSpec;
    fn reset(&mut self, seed: u64) -> Result<StepResult>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;
}

/// Environment selection and parameters, as read from the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub name: String,
    #[serde(default = "default_n_agents")]
    pub n_agents: usize,
    /// Episode length; 0 selects the environment default.
    #[serde(default)]
    pub horizon: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_sensing_radius")]
    pub sensing_radius: usize,
}

fn default_n_agents() -> usize {
    2
}

fn default_grid() -> usize {
    8
}

fn default_sensing_radius() -> usize {
    2
}

impl EnvConfig {
    pub fn gather(n_agents: usize) -> Self {
        EnvConfig { name: "gather".into(), n_agents, horizon: 0, grid: 0, sensing_radius: 0 }
    }

    pub fn tag_grid() -> Self {
        EnvConfig { name: "tag_grid".into(), n_agents: 4, horizon: 0, grid: 8, sensing_radius: 2 }
    }
}

/// Builds an environment from its config. Unknown names are a config error.
pub fn make_env(cfg: &EnvConfig) -> Result<Box<dyn Environment>> {
    match cfg.name.as_str() {
        "gather" => Ok(Box::new(GatherEnv::new(cfg.n_agents, if cfg.horizon == 0 { 3 } else { cfg.horizon })?)),
        "tag_grid" => Ok(Box::new(TagGridEnv::new(
            cfg.n_agents,
            if cfg.horizon == 0 { 50 } else { cfg.horizon },
            if cfg.grid == 0 { 8 } else { cfg.grid },
            cfg.sensing_radius.max(1),
        )?)),
        other => Err(BvmeError::Config(format!("unknown environment '{other}'"))),
    }
}
