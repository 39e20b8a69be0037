//! Episodic training loop: replay buffer, rollout collection, the gradient
//! step on the combined objective, target-network cadence, and greedy
//! evaluation.
//!
//! A run is single-threaded and fully determined by its master seed, which
//! fans out into separate streams for environment resets, epsilon-greedy
//! exploration, and message/adjacency noise. Training unrolls full padded
//! episodes; masks keep padding out of every loss term. Targets come from a
//! frozen deep copy of the model refreshed on an episode-count cadence, run
//! in full mean mode (mean adjacency, mean messages) so target values carry
//! no sampling noise.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{BvmeError, Result};
use crate::model::{Method, Model, ModelDims};
use crate::nn::{GradStats, RmsProp};
use crate::rng::{stream_rng, RngBundle, Stream};
use crate::tensor::{no_grad, zero_grads, Tensor};
use crate::value::{agent_q_forward, masked_td_loss, qmix_forward, td_target, total_loss};
use crate::vme::{bvme_penalty, BvmeConfig};

/// Optimization and schedule settings with their conventional defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_alpha")]
    pub rmsprop_alpha: f64,
    #[serde(default = "d_eps")]
    pub rmsprop_eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_buffer")]
    pub buffer_capacity: usize,
    #[serde(default = "d_target")]
    pub target_update_episodes: u64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_eps_start")]
    pub eps_start: f64,
    #[serde(default = "d_eps_end")]
    pub eps_end: f64,
    #[serde(default = "d_anneal")]
    pub eps_anneal_steps: u64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    /// Gradient iterations run once per this many collected episodes.
    #[serde(default = "d_train_every")]
    pub train_every_episodes: u64,
    /// Weight of the pluggable group term (zero: hook disabled).
    #[serde(default)]
    pub lambda_g: f64,
    /// Keep the sigma head out of the optimizer.
    #[serde(default)]
    pub freeze_sigma_head: bool,
    /// With lambda_kl = 0, skip building the penalty term entirely instead
    /// of adding an exact zero. Exists so equivalence tests can compare the
    /// two paths; results are identical either way.
    #[serde(default)]
    pub elide_zero_penalty: bool,
}

fn d_lr() -> f64 {
    5e-4
}
fn d_alpha() -> f64 {
    0.99
}
fn d_eps() -> f64 {
    1e-5
}
fn d_batch() -> usize {
    32
}
fn d_buffer() -> usize {
    5000
}
fn d_target() -> u64 {
    200
}
fn d_gamma() -> f64 {
    0.99
}
fn d_eps_start() -> f64 {
    1.0
}
fn d_eps_end() -> f64 {
    0.05
}
fn d_anneal() -> u64 {
    50_000
}
fn d_clip() -> f64 {
    10.0
}
fn d_train_every() -> u64 {
    1
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: d_lr(),
            rmsprop_alpha: d_alpha(),
            rmsprop_eps: d_eps(),
            batch_size: d_batch(),
            buffer_capacity: d_buffer(),
            target_update_episodes: d_target(),
            gamma: d_gamma(),
            eps_start: d_eps_start(),
            eps_end: d_eps_end(),
            eps_anneal_steps: d_anneal(),
            grad_clip: d_clip(),
            train_every_episodes: d_train_every(),
            lambda_g: 0.0,
            freeze_sigma_head: false,
            elide_zero_penalty: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(BvmeError::Config("lr, batch_size, and buffer_capacity must be positive".into()));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(BvmeError::Config(format!(
                "buffer capacity {} smaller than batch size {}",
                self.buffer_capacity, self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(BvmeError::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.target_update_episodes == 0 || self.train_every_episodes == 0 {
            return Err(BvmeError::Config("episode cadences must be nonzero".into()));
        }
        if self.eps_anneal_steps == 0 || self.eps_end > self.eps_start {
            return Err(BvmeError::Config("exploration schedule must anneal downward over > 0 steps".into()));
        }
        Ok(())
    }
}

/// Linearly annealed exploration rate; with default settings
/// `max(0.05, 1 - 0.95 * step / 50000)`, and exactly `eps_end` once the
/// anneal window has passed.
pub fn epsilon(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.eps_anneal_steps {
        return cfg.eps_end;
    }
    let frac = step as f64 / cfg.eps_anneal_steps as f64;
    (cfg.eps_start - (cfg.eps_start - cfg.eps_end) * frac).max(cfg.eps_end)
}

/// One collected episode. Observation and state sequences hold T+1 entries
/// (including the terminal frame); the rest hold T.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// Flattened per-step observations, each `n_agents * d_obs` long.
    pub obs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub success: bool,
    /// Discounted return under the collecting config's gamma.
    pub ret: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// FIFO episode store with strict oldest-first eviction.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReplayBuffer { capacity, episodes: VecDeque::new() }
    }

    pub fn push(&mut self, e: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, i: usize) -> &EpisodeRecord {
        &self.episodes[i]
    }

    /// Uniform sample of distinct episode indices.
    pub fn sample_indices(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.episodes.len() < count {
            return Err(BvmeError::NotReady(format!(
                "buffer holds {} episodes, batch needs {count}",
                self.episodes.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.episodes.len(), count).into_vec())
    }
}

/// Per-iteration diagnostics alongside the loss values.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub td: f64,
    pub bvme: f64,
    pub group: f64,
    pub total: f64,
    /// Mean KL per agent-step over the batch's valid steps (0 without
    /// posterior heads).
    pub mean_kl: f64,
    pub grad: GradStats,
}

/// Greedy evaluation metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub success_rate: f64,
    /// Mean discounted return per episode.
    pub mean_return: f64,
    pub mean_kl: f64,
}

/// Everything a single training run owns.
pub struct RunState {
    pub model: Model,
    pub target: Model,
    pub opt: RmsProp,
    pub cfg: TrainConfig,
    pub buffer: ReplayBuffer,
    pub env_steps: u64,
    pub episodes: u64,
    pub train_iterations: u64,
    pub rngs: RngBundle,
    /// Running (min, max) of every log variance produced by the posterior
    /// heads during collection and training.
    pub log_var_seen: Option<(f64, f64)>,
    target_bucket: u64,
}

impl RunState {
    pub fn new(seed: u64, method: Method, dims: ModelDims, bvme: BvmeConfig, cfg: TrainConfig) -> Result<RunState> {
        cfg.validate()?;
        let mut rngs = RngBundle::new(seed);
        let model = Model::init(&mut rngs.init, method, dims, bvme)?;
        let target = model.deep_copy();
        let opt = RmsProp::new(cfg.lr, cfg.rmsprop_alpha, cfg.rmsprop_eps, cfg.grad_clip);
        let buffer = ReplayBuffer::new(cfg.buffer_capacity);
        Ok(RunState {
            model,
            target,
            opt,
            cfg,
            buffer,
            env_steps: 0,
            episodes: 0,
            train_iterations: 0,
            rngs,
            log_var_seen: None,
            target_bucket: 0,
        })
    }

    /// Parameters the optimizer updates (sigma head optionally frozen).
    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut params = self.model.params();
        if self.cfg.freeze_sigma_head {
            let frozen: Vec<u64> = self.model.sigma_head_params().iter().map(Tensor::id).collect();
            params.retain(|p| !frozen.contains(&p.id()));
        }
        params
    }

    fn observe_log_vars(&mut self, vals: &[f64]) {
        if vals.is_empty() {
            return;
        }
        let (mut lo, mut hi) = self.log_var_seen.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
        for v in vals {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        self.log_var_seen = Some((lo, hi));
    }

    /// Rolls out one epsilon-greedy episode and appends it to the buffer.
    pub fn collect_episode(&mut self, env: &mut dyn Environment) -> Result<()> {
        let spec = env.spec().clone();
        let (n, d_obs, n_actions) = (spec.n_agents, spec.d_obs, spec.n_actions);
        let env_seed: u64 = self.rngs.env.gen();
        let mut frame = env.reset(env_seed)?;

        let mut obs_seq = vec![flatten_obs(&frame.observations)];
        let mut states = vec![frame.state.clone()];
        let mut actions_seq = Vec::new();
        let mut rewards = Vec::new();
        let mut terminals = Vec::new();
        let mut h = Tensor::zeros(&[n, self.model.agent.hidden()]);
        let mut seen_log_vars: Vec<f64> = Vec::new();

        loop {
            let obs_t = Tensor::constant(&[n, d_obs], obs_seq.last().unwrap().clone())?;
            let model = &self.model;
            let sampling = &mut self.rngs.sampling;
            let h_ref = &h;
            let (q_vals, h_next, log_var) = no_grad(|| -> Result<_> {
                let out = model.comm_forward(&obs_t, 1, true, sampling)?;
                let (q, h2) = agent_q_forward(&model.agent, &obs_t, &out.z, h_ref)?;
                Ok((q.to_vec(), h2, out.log_var.map(|t| t.to_vec())))
            })?;
            if let Some(lv) = log_var {
                seen_log_vars.extend(lv);
            }
            h = h_next;

            let eps = epsilon(self.env_steps, &self.cfg);
            let mut acts = Vec::with_capacity(n);
            for i in 0..n {
                let coin: f64 = self.rngs.exploration.gen();
                if coin < eps {
                    acts.push(self.rngs.exploration.gen_range(0..n_actions));
                } else {
                    acts.push(argmax(&q_vals[i * n_actions..(i + 1) * n_actions]));
                }
            }

            frame = env.step(&acts)?;
            self.env_steps += 1;
            obs_seq.push(flatten_obs(&frame.observations));
            states.push(frame.state.clone());
            actions_seq.push(acts);
            rewards.push(frame.reward);
            terminals.push(frame.terminated);
            if frame.terminated {
                break;
            }
        }

        self.observe_log_vars(&seen_log_vars);
        let ret = rewards.iter().enumerate().map(|(t, r)| self.cfg.gamma.powi(t as i32) * r).sum();
        self.buffer.push(EpisodeRecord {
            obs: obs_seq,
            states,
            actions: actions_seq,
            rewards,
            terminals,
            success: frame.success(),
            ret,
        });
        self.episodes += 1;
        Ok(())
    }

    /// One gradient step on a sampled batch of episodes. Retryable
    /// "not ready" error while the buffer is shorter than a batch.
    pub fn train_iteration(&mut self) -> Result<TrainStats> {
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rngs.sampling)?;
        let b = idx.len();
        let n = self.model.dims.n_agents;
        let d_obs = self.model.dims.d_obs;
        let d_state = self.model.dims.d_state;
        let n_actions = self.model.dims.n_actions;
        let t_max = idx.iter().map(|&i| self.buffer.get(i).len()).max().unwrap();

        // Padded batch slices, t-major where flattened.
        let mut mask = vec![0.0; t_max * b];
        let mut rewards = vec![0.0; t_max * b];
        let mut terminals = vec![true; t_max * b];
        for (bi, &ei) in idx.iter().enumerate() {
            let e = self.buffer.get(ei);
            for t in 0..e.len() {
                mask[t * b + bi] = 1.0;
                rewards[t * b + bi] = e.rewards[t];
                terminals[t * b + bi] = e.terminals[t];
            }
        }

        let obs_at = |t: usize| -> Vec<f64> {
            let mut out = vec![0.0; b * n * d_obs];
            for (bi, &ei) in idx.iter().enumerate() {
                let e = self.buffer.get(ei);
                if t < e.obs.len() {
                    out[bi * n * d_obs..(bi + 1) * n * d_obs].copy_from_slice(&e.obs[t]);
                }
            }
            out
        };
        let state_at = |t: usize| -> Vec<f64> {
            let mut out = vec![0.0; b * d_state];
            for (bi, &ei) in idx.iter().enumerate() {
                let e = self.buffer.get(ei);
                if t < e.states.len() {
                    out[bi * d_state..(bi + 1) * d_state].copy_from_slice(&e.states[t]);
                }
            }
            out
        };

        // Online pass over time, collecting chosen-action utilities and the
        // per-(episode, step) KL sums.
        let mut h = Tensor::zeros(&[b * n, self.model.agent.hidden()]);
        let mut chosen_rows = Vec::with_capacity(t_max);
        let mut kl_flat: Vec<Tensor> = Vec::new();
        let mut kl_mask: Vec<f64> = Vec::new();
        let mut kl_value_acc = 0.0;
        let mut seen_log_vars: Vec<f64> = Vec::new();
        for t in 0..t_max {
            let obs_t = Tensor::constant(&[b * n, d_obs], obs_at(t))?;
            let out = self.model.comm_forward(&obs_t, b, true, &mut self.rngs.sampling)?;
            let (q, h_next) = agent_q_forward(&self.model.agent, &obs_t, &out.z, &h)?;
            h = h_next;

            let mut hot = vec![0.0; b * n * n_actions];
            for (bi, &ei) in idx.iter().enumerate() {
                let e = self.buffer.get(ei);
                if t < e.len() {
                    for i in 0..n {
                        hot[(bi * n + i) * n_actions + e.actions[t][i]] = 1.0;
                    }
                }
            }
            let hot_t = Tensor::constant(&[b * n, n_actions], hot)?;
            let picked = q.mul(&hot_t)?.sum_axis(1)?.reshape(&[b, n])?;
            chosen_rows.push(picked);

            if let Some(kl) = &out.kl_rows {
                let vals = kl.values();
                for bi in 0..b {
                    let m = mask[t * b + bi];
                    kl_flat.push(kl.slice(0, bi * n, (bi + 1) * n)?.sum_all()?);
                    kl_mask.push(m);
                    if m > 0.0 {
                        kl_value_acc += vals[bi * n..(bi + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            if let Some(lv) = &out.log_var {
                seen_log_vars.extend(lv.values().iter().copied());
            }
        }

        let chosen_refs: Vec<&Tensor> = chosen_rows.iter().collect();
        let chosen_all = Tensor::concat(&chosen_refs, 0)?;
        let mut states_flat = Vec::with_capacity(t_max * b * d_state);
        for t in 0..t_max {
            states_flat.extend(state_at(t));
        }
        let states_all = Tensor::constant(&[t_max * b, d_state], states_flat)?;
        let q_tot = qmix_forward(&self.model.mixer, &chosen_all, &states_all)?;

        // Target pass in full mean mode: per-agent greedy utilities mixed by
        // the frozen copy, evaluated on next-step frames.
        let target = &self.target;
        let buffer = &self.buffer;
        let next_max: Vec<f64> = no_grad(|| -> Result<Vec<f64>> {
            let mut h_t = Tensor::zeros(&[b * n, target.agent.hidden()]);
            let mut max_rows_flat = Vec::with_capacity(t_max * b * n);
            let mut throwaway = stream_rng(0, Stream::Sampling);
            for t in 0..=t_max {
                let mut obs_v = vec![0.0; b * n * d_obs];
                for (bi, &ei) in idx.iter().enumerate() {
                    let e = buffer.get(ei);
                    if t < e.obs.len() {
                        obs_v[bi * n * d_obs..(bi + 1) * n * d_obs].copy_from_slice(&e.obs[t]);
                    }
                }
                let obs_t = Tensor::constant(&[b * n, d_obs], obs_v)?;
                let out = target.comm_forward(&obs_t, b, false, &mut throwaway)?;
                let (q, h_next) = agent_q_forward(&target.agent, &obs_t, &out.z, &h_t)?;
                h_t = h_next;
                if t >= 1 {
                    let qv = q.values();
                    for row in 0..b * n {
                        max_rows_flat.push(max_of(&qv[row * n_actions..(row + 1) * n_actions]));
                    }
                }
            }
            let max_rows = Tensor::constant(&[t_max * b, n], max_rows_flat)?;
            let mut next_states = Vec::with_capacity(t_max * b * d_state);
            for t in 1..=t_max {
                next_states.extend(state_at(t));
            }
            let ns = Tensor::constant(&[t_max * b, d_state], next_states)?;
            Ok(qmix_forward(&target.mixer, &max_rows, &ns)?.to_vec())
        })?;

        let term_flags: Vec<bool> = terminals.clone();
        let y = td_target(&rewards, &term_flags, &next_max, self.cfg.gamma)?;
        let td = masked_td_loss(&q_tot, &y, &mask)?;

        let valid_steps: f64 = mask.iter().sum();
        let bvme_term = if kl_flat.is_empty() || (self.cfg.elide_zero_penalty && self.model.bvme.lambda_kl == 0.0) {
            Tensor::scalar(0.0)
        } else {
            bvme_penalty(&kl_flat, &kl_mask, &self.model.bvme, n, self.model.dims.d_msg)?
        };
        let loss = total_loss(&td, &bvme_term, None, self.cfg.lambda_g)?;

        let params = self.trainable_params();
        zero_grads(&params);
        loss.total.backward()?;
        let grad = self.opt.step(&params)?;
        self.train_iterations += 1;
        self.observe_log_vars(&seen_log_vars);

        let mean_kl = if kl_flat.is_empty() { 0.0 } else { kl_value_acc / (valid_steps * n as f64) };
        Ok(TrainStats {
            td: loss.td.item(),
            bvme: loss.bvme.item(),
            group: loss.group.item(),
            total: loss.total.item(),
            mean_kl,
            grad,
        })
    }

    /// Copies online parameters into the target when the episode counter
    /// enters a new cadence bucket.
    pub fn maybe_update_target(&mut self) -> bool {
        let bucket = self.episodes / self.cfg.target_update_episodes;
        if bucket > self.target_bucket {
            self.target_bucket = bucket;
            self.target.copy_params_from(&self.model);
            true
        } else {
            false
        }
    }

    /// Greedy mean-mode evaluation over a fixed suite of episode seeds
    /// derived from `eval_seed`. Identical parameters and seed give
    /// identical metrics.
    pub fn evaluate(&self, env: &mut dyn Environment, episodes: usize, eval_seed: u64) -> Result<EvalMetrics> {
        if episodes == 0 {
            return Err(BvmeError::Contract("evaluation needs at least one episode".into()));
        }
        let spec = env.spec().clone();
        let (n, d_obs, n_actions) = (spec.n_agents, spec.d_obs, spec.n_actions);
        let mut seed_rng = stream_rng(eval_seed, Stream::Eval);
        let mut noise_rng = stream_rng(eval_seed, Stream::Sampling);
        let mut successes = 0usize;
        let mut return_acc = 0.0;
        let mut kl_acc = 0.0;
        let mut kl_steps = 0usize;

        for _ in 0..episodes {
            let env_seed: u64 = seed_rng.gen();
            let mut frame = env.reset(env_seed)?;
            let mut h = Tensor::zeros(&[n, self.model.agent.hidden()]);
            let mut discount = 1.0;
            loop {
                let obs_t = Tensor::constant(&[n, d_obs], flatten_obs(&frame.observations))?;
                let model = &self.model;
                let h_ref = &h;
                let nr = &mut noise_rng;
                let (q_vals, h_next, kl) = no_grad(|| -> Result<_> {
                    let out = model.comm_forward(&obs_t, 1, false, nr)?;
                    let (q, h2) = agent_q_forward(&model.agent, &obs_t, &out.z, h_ref)?;
                    Ok((q.to_vec(), h2, out.kl_rows.map(|t| t.to_vec())))
                })?;
                h = h_next;
                if let Some(kl) = kl {
                    kl_acc += kl.iter().sum::<f64>() / n as f64;
                    kl_steps += 1;
                }
                let acts: Vec<usize> =
                    (0..n).map(|i| argmax(&q_vals[i * n_actions..(i + 1) * n_actions])).collect();
                frame = env.step(&acts)?;
                return_acc += discount * frame.reward;
                discount *= self.cfg.gamma;
                if frame.terminated {
                    break;
                }
            }
            if frame.success() {
                successes += 1;
            }
        }

        Ok(EvalMetrics {
            success_rate: successes as f64 / episodes as f64,
            mean_return: return_acc / episodes as f64,
            mean_kl: if kl_steps == 0 { 0.0 } else { kl_acc / kl_steps as f64 },
        })
    }
}

fn flatten_obs(obs: &[Vec<f64>]) -> Vec<f64> {
    obs.iter().flatten().copied().collect()
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(vals: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate().skip(1) {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

fn max_of(vals: &[f64]) -> f64 {
    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}
