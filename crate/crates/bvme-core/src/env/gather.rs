//! Gather: an n-agent coordination game over 3 arms.
//!
//! Payoff, fixed here: on every step the team earns +1 exactly when all
//! agents choose the same arm, otherwise 0. Every arm pays the same, so the
//! task is pure coordination; under uniform random play with n=2 the
//! per-step gather probability is 3 * (1/3)^2 = 1/3.
//!
//! An episode succeeds when the agents are gathered on the final step, i.e.
//! the optimal per-step payoff is achieved at the end of the episode. With
//! n=2 the random-play success rate is therefore exactly 1/3.
//!
//! Observation layout per agent (d_obs = 4): `[t/horizon, onehot3(own last
//! action)]`, with the one-hot all zero before the first step. Agents never
//! observe each other directly; anything an agent learns about the others
//! must arrive through the message channel. The global state is the
//! concatenation of all agent observations.

use std::collections::BTreeMap;

use super::{DecPomdpSpec, Environment, StepResult};
use crate::error::{BvmeError, Result};

pub const GATHER_ARMS: usize = 3;

#[derive(Debug)]
pub struct GatherEnv {
    spec: DecPomdpSpec,
    t: usize,
    last_actions: Vec<Option<usize>>,
    terminated: bool,
}

impl GatherEnv {
    pub fn new(n_agents: usize, horizon: usize) -> Result<Self> {
        if !(2..=4).contains(&n_agents) {
            return Err(BvmeError::Config(format!("gather supports 2..=4 agents, got {n_agents}")));
        }
        if horizon == 0 {
            return Err(BvmeError::Config("gather horizon must be positive".into()));
        }
        let d_obs = 1 + GATHER_ARMS;
        Ok(GatherEnv {
            spec: DecPomdpSpec {
                name: "gather".into(),
                n_agents,
                n_actions: GATHER_ARMS,
                d_obs,
                d_state: n_agents * d_obs,
                horizon,
                reward_bound: 1.0,
            },
            t: 0,
            last_actions: vec![None; n_agents],
            terminated: true,
        })
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        let h = self.spec.horizon as f64;
        self.last_actions
            .iter()
            .map(|last| {
                let mut o = vec![0.0; self.spec.d_obs];
                o[0] = self.t as f64 / h;
                if let Some(a) = last {
                    o[1 + a] = 1.0;
                }
                o
            })
            .collect()
    }

    fn bundle(&self, reward: f64, terminated: bool, success: Option<bool>) -> StepResult {
        let observations = self.observations();
        let state = observations.iter().flatten().copied().collect();
        let mut info = BTreeMap::new();
        if let Some(s) = success {
            info.insert("success".to_string(), if s { 1.0 } else { 0.0 });
        }
        StepResult { observations, state, reward, terminated, info }
    }
}

impl Environment for GatherEnv {
    fn spec(&self) -> &DecPomdpSpec {
        &self.spec
    }

    /// Gather has no stochastic dynamics; the seed is accepted for interface
    /// uniformity and ignored.
    fn reset(&mut self, _seed: u64) -> Result<StepResult> {
        self.t = 0;
        self.last_actions = vec![None; self.spec.n_agents];
        self.terminated = false;
        Ok(self.bundle(0.0, false, None))
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.terminated {
            return Err(BvmeError::Contract("step called on terminated gather episode".into()));
        }
        if actions.len() != self.spec.n_agents {
            return Err(BvmeError::Contract(format!(
                "gather expects {} actions, got {}",
                self.spec.n_agents,
                actions.len()
            )));
        }
        if let Some(bad) = actions.iter().find(|a| **a >= GATHER_ARMS) {
            return Err(BvmeError::Contract(format!("gather action {bad} out of range 0..{GATHER_ARMS}")));
        }

        let gathered = actions.iter().all(|a| *a == actions[0]);
        let reward = if gathered { 1.0 } else { 0.0 };
        self.last_actions = actions.iter().map(|a| Some(*a)).collect();
        self.t += 1;
        let terminated = self.t >= self.spec.horizon;
        self.terminated = terminated;
        let success = terminated.then_some(gathered);
        Ok(self.bundle(reward, terminated, success))
    }
}
