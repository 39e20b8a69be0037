//! Per-agent recurrent Q-networks, the monotonic mixing network, TD targets,
//! and the training objective.
//!
//! Each agent runs the same network (parameter sharing): an affine+ReLU map
//! on [observation; incoming message], a GRU cell, and a linear head with one
//! Q-value per action. The mixer combines per-agent chosen-action Q-values
//! into Q_tot with weights produced by hypernetworks from the global state;
//! those weights pass through |.|, which makes Q_tot monotone non-decreasing
//! in every agent utility, so the per-agent argmaxes realize the joint
//! argmax. Targets are plain one-step returns against a frozen target copy.
//!
//! All forward functions are row-batched: rows may be (episode, agent) pairs
//! for the agent network or (episode, timestep) pairs for the mixer.

use rand_chacha::ChaCha8Rng;

use crate::error::{BvmeError, Result};
use crate::nn::{Activation, GruParams, Linear};
use crate::tensor::Tensor;

/// Shared agent network: input map, GRU cell, output head.
#[derive(Debug, Clone)]
pub struct AgentQParams {
    pub input: Linear,
    pub gru: GruParams,
    pub output: Linear,
}

impl AgentQParams {
    pub fn init(rng: &mut ChaCha8Rng, d_obs: usize, d_msg: usize, hidden: usize, n_actions: usize) -> AgentQParams {
        assert!(n_actions >= 2, "need at least two actions");
        AgentQParams {
            input: Linear::init(rng, d_obs + d_msg, hidden, true, Activation::Relu),
            gru: GruParams::init(rng, hidden, hidden),
            output: Linear::init(rng, hidden, n_actions, true, Activation::Linear),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.input.params();
        p.extend(self.gru.params());
        p.extend(self.output.params());
        p
    }

    pub fn hidden(&self) -> usize {
        self.input.fan_out()
    }
}

/// One recurrent step for a row batch: rows are agents (or episode-agent
/// pairs). Returns per-row Q-values over actions and the next hidden state.
pub fn agent_q_forward(p: &AgentQParams, obs: &Tensor, z: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
    let (os, zs) = (obs.shape(), z.shape());
    if os.len() != 2 || zs.len() != 2 || os[0] != zs[0] {
        return Err(BvmeError::dimension(
            "agent_q_forward",
            format!("obs {os:?} and messages {zs:?} must be 2-d with equal row counts"),
        ));
    }
    let x = Tensor::concat(&[obs, z], 1)?;
    let e = p.input.forward(&x)?;
    let h = p.gru.step(&e, h_prev)?;
    let q = p.output.forward(&h)?;
    Ok((q, h))
}

/// Hypernetworks producing the state-conditioned mixing weights.
///
/// w1: state -> n*embed (|.| applied), b1: state -> embed,
/// w2: state -> embed (|.| applied), b2: state -> embed -> 1 (two layers).
#[derive(Debug, Clone)]
pub struct MixerParams {
    pub n_agents: usize,
    pub embed: usize,
    pub hyper_w1: Linear,
    pub hyper_b1: Linear,
    pub hyper_w2: Linear,
    pub hyper_b2_hidden: Linear,
    pub hyper_b2_out: Linear,
}

impl MixerParams {
    pub fn init(rng: &mut ChaCha8Rng, n_agents: usize, d_state: usize, embed: usize) -> MixerParams {
        assert!(n_agents >= 1 && embed >= 1);
        MixerParams {
            n_agents,
            embed,
            hyper_w1: Linear::init(rng, d_state, n_agents * embed, true, Activation::Linear),
            hyper_b1: Linear::init(rng, d_state, embed, true, Activation::Linear),
            hyper_w2: Linear::init(rng, d_state, embed, true, Activation::Linear),
            hyper_b2_hidden: Linear::init(rng, d_state, embed, true, Activation::Relu),
            hyper_b2_out: Linear::init(rng, embed, 1, true, Activation::Linear),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.hyper_w1.params();
        p.extend(self.hyper_b1.params());
        p.extend(self.hyper_w2.params());
        p.extend(self.hyper_b2_hidden.params());
        p.extend(self.hyper_b2_out.params());
        p
    }
}

/// Mixes per-row agent utilities `qs` [R, n] with states `s` [R, d_state]
/// into Q_tot [R, 1].
///
/// hidden = elu(sum_i qs_i * |w1_i(s)| + b1(s)); q_tot = hidden . |w2(s)| + b2(s).
pub fn qmix_forward(m: &MixerParams, qs: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (qsh, ssh) = (qs.shape(), s.shape());
    if qsh.len() != 2 || qsh[1] != m.n_agents {
        return Err(BvmeError::dimension("qmix_forward", format!("utilities must be [rows, {}], got {qsh:?}", m.n_agents)));
    }
    if ssh.len() != 2 || ssh[0] != qsh[0] {
        return Err(BvmeError::dimension(
            "qmix_forward",
            format!("states {ssh:?} must be 2-d with the same rows as utilities {qsh:?}"),
        ));
    }
    let e = m.embed;
    let w1 = m.hyper_w1.forward(s)?.abs()?;
    let ones_row = Tensor::full(&[1, e], 1.0);
    // sum_i qs[:, i] (outer) w1[:, i*e..(i+1)*e], built from column tiles.
    let mut acc: Option<Tensor> = None;
    for i in 0..m.n_agents {
        let qi = qs.slice(1, i, i + 1)?.matmul(&ones_row)?;
        let term = qi.mul(&w1.slice(1, i * e, (i + 1) * e)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    let hidden = acc.unwrap().add(&m.hyper_b1.forward(s)?)?.elu()?;
    let w2 = m.hyper_w2.forward(s)?.abs()?;
    let rows = qsh[0];
    let out = hidden.mul(&w2)?.sum_axis(1)?.reshape(&[rows, 1])?;
    let b2 = m.hyper_b2_out.forward(&m.hyper_b2_hidden.forward(s)?)?;
    out.add(&b2)
}

/// One-step TD targets `y_t = r_t + gamma * (1 - terminal_t) * next_max_t`,
/// computed outside the graph (targets carry no gradient).
pub fn td_target(rewards: &[f64], terminals: &[bool], target_next_max: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.len() != terminals.len() || rewards.len() != target_next_max.len() {
        return Err(BvmeError::Contract(format!(
            "td_target length mismatch: {} rewards, {} terminals, {} next values",
            rewards.len(),
            terminals.len(),
            target_next_max.len()
        )));
    }
    Ok(rewards
        .iter()
        .zip(terminals)
        .zip(target_next_max)
        .map(|((r, t), v)| if *t { *r } else { r + gamma * v })
        .collect())
}

/// Masked mean-squared TD error: `sum_t m_t (pred_t - y_t)^2 / sum_t m_t`.
/// Padding rows with mask 0 contribute nothing to value or gradient.
pub fn masked_td_loss(pred: &Tensor, targets: &[f64], mask: &[f64]) -> Result<Tensor> {
    let shape = pred.shape();
    let rows: usize = shape.iter().product();
    if rows != targets.len() || rows != mask.len() {
        return Err(BvmeError::Contract(format!(
            "masked_td_loss length mismatch: {rows} predictions, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let valid: f64 = mask.iter().sum();
    if valid <= 0.0 {
        return Err(BvmeError::Contract("masked_td_loss needs at least one unmasked step".into()));
    }
    let flat = pred.reshape(&[rows])?;
    let y = Tensor::constant(&[rows], targets.to_vec())?;
    let m = Tensor::constant(&[rows], mask.to_vec())?;
    flat.sub(&y)?.square()?.mul(&m)?.sum_all()?.scale(1.0 / valid)
}

/// The loss components and their weighted sum.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub td: Tensor,
    pub bvme: Tensor,
    /// Pluggable group term; zero when no hook is installed.
    pub group: Tensor,
    pub total: Tensor,
}

/// `total = td + lambda_g * group + bvme`. A missing hook contributes an
/// exact zero group term.
pub fn total_loss(td: &Tensor, bvme: &Tensor, group_hook: Option<&Tensor>, lambda_g: f64) -> Result<LossTerms> {
    let group = match group_hook {
        Some(g) => g.clone(),
        None => Tensor::scalar(0.0),
    };
    let total = td.add(&group.scale(lambda_g)?)?.add(bvme)?;
    Ok(LossTerms { td: td.clone(), bvme: bvme.clone(), group, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference_gradients, max_rel_err};
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::no_grad;
    use rand::Rng;

    fn zeroed(params: &[Tensor]) {
        for t in params {
            let n: usize = t.shape().iter().product();
            t.set_values(&vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn zero_agent_net_gives_zero_q_and_zero_state() {
        let mut rng = stream_rng(1, Stream::Init);
        let p = AgentQParams::init(&mut rng, 3, 2, 4, 3);
        zeroed(&p.params());
        let obs = Tensor::constant(&[1, 3], vec![0.5, -0.2, 0.9]).unwrap();
        let z = Tensor::constant(&[1, 2], vec![1.0, -1.0]).unwrap();
        let h0 = Tensor::zeros(&[1, 4]);
        let (q, h) = agent_q_forward(&p, &obs, &z, &h0).unwrap();
        assert!(q.to_vec().iter().all(|v| *v == 0.0));
        assert!(h.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn agent_forward_is_deterministic() {
        let mut rng = stream_rng(2, Stream::Init);
        let p = AgentQParams::init(&mut rng, 3, 2, 8, 4);
        let obs = Tensor::constant(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let z = Tensor::constant(&[2, 2], vec![0.7, -0.8, 0.9, 1.0]).unwrap();
        let h0 = Tensor::zeros(&[2, 8]);
        let (q1, h1) = agent_q_forward(&p, &obs, &z, &h0).unwrap();
        let (q2, h2) = agent_q_forward(&p, &obs, &z, &h0).unwrap();
        assert_eq!(q1.to_vec(), q2.to_vec());
        assert_eq!(h1.to_vec(), h2.to_vec());
    }

    #[test]
    fn max_q_gradient_wrt_message_matches_finite_differences() {
        let mut rng = stream_rng(3, Stream::Init);
        let p = AgentQParams::init(&mut rng, 3, 2, 8, 4);
        let obs = Tensor::constant(&[1, 3], vec![0.3, -0.1, 0.8]).unwrap();
        let z0 = vec![0.25, -0.6];
        let z = Tensor::param(&[1, 2], z0.clone()).unwrap();
        let h0 = Tensor::zeros(&[1, 8]);

        // Fix the argmax once, then differentiate that entry.
        let (q, _) = agent_q_forward(&p, &obs, &z, &h0).unwrap();
        let qv = q.to_vec();
        let arg = qv
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        let select = |record: bool| -> f64 {
            let go = || {
                let (q, _) = agent_q_forward(&p, &obs, &z, &h0).unwrap();
                let picked = q.slice(1, arg, arg + 1).unwrap().sum_all().unwrap();
                if record {
                    picked.backward().unwrap();
                }
                picked.item()
            };
            if record {
                go()
            } else {
                no_grad(go)
            }
        };
        select(true);
        let analytic = z.grad().unwrap();
        let fd = finite_difference_gradients(
            |v| {
                z.set_values(v).unwrap();
                let out = select(false);
                z.set_values(&z0).unwrap();
                out
            },
            &z0,
            1e-4,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &fd, 1e-3) < 1e-4);
    }

    #[test]
    fn single_agent_mixer_is_monotone_numerically() {
        let mut rng = stream_rng(4, Stream::Init);
        let m = MixerParams::init(&mut rng, 1, 3, 4);
        let mut check_rng = stream_rng(5, Stream::Eval);
        no_grad(|| {
            for _ in 0..100 {
                let sv: Vec<f64> = (0..3).map(|_| check_rng.gen_range(-2.0..2.0)).collect();
                let qv: f64 = check_rng.gen_range(-3.0..3.0);
                let s = Tensor::constant(&[1, 3], sv).unwrap();
                let lo = qmix_forward(&m, &Tensor::constant(&[1, 1], vec![qv]).unwrap(), &s).unwrap().item();
                let hi = qmix_forward(&m, &Tensor::constant(&[1, 1], vec![qv + 0.1]).unwrap(), &s).unwrap().item();
                assert!(hi >= lo - 1e-12, "qv={qv} lo={lo} hi={hi}");
            }
        });
    }

    #[test]
    fn zero_hypernets_leave_only_final_bias() {
        let mut rng = stream_rng(6, Stream::Init);
        let m = MixerParams::init(&mut rng, 3, 2, 4);
        zeroed(&m.params());
        m.hyper_b2_out.b.as_ref().unwrap().set_values(&[0.7]).unwrap();
        let s = Tensor::constant(&[2, 2], vec![0.5, -0.5, 1.0, 2.0]).unwrap();
        for qs in [[1.0, 2.0, 3.0, -1.0, -2.0, -3.0], [9.0, 9.0, 9.0, 0.0, 0.0, 0.0]] {
            let q = Tensor::constant(&[2, 3], qs.to_vec()).unwrap();
            let out = qmix_forward(&m, &q, &s).unwrap().to_vec();
            assert_eq!(out, vec![0.7, 0.7]);
        }
    }

    #[test]
    fn mixer_partials_wrt_utilities_are_nonnegative() {
        let mut rng = stream_rng(7, Stream::Init);
        let m = MixerParams::init(&mut rng, 3, 4, 5);
        let mut pt = stream_rng(8, Stream::Eval);
        let rows = 200;
        let qv: Vec<f64> = (0..rows * 3).map(|_| pt.gen_range(-5.0..5.0)).collect();
        let sv: Vec<f64> = (0..rows * 4).map(|_| pt.gen_range(-2.0..2.0)).collect();
        let qs = Tensor::param(&[rows, 3], qv).unwrap();
        let s = Tensor::constant(&[rows, 4], sv).unwrap();
        qmix_forward(&m, &qs, &s).unwrap().sum_all().unwrap().backward().unwrap();
        let g = qs.grad().unwrap();
        assert!(g.iter().all(|v| *v >= -1e-9), "min partial {}", g.iter().cloned().fold(f64::MAX, f64::min));
    }

    #[test]
    fn mixer_gradients_match_finite_differences() {
        let mut rng = stream_rng(9, Stream::Init);
        let m = MixerParams::init(&mut rng, 2, 3, 4);
        let qs0 = vec![0.8, -0.5];
        let qs = Tensor::param(&[1, 2], qs0.clone()).unwrap();
        let s = Tensor::constant(&[1, 3], vec![0.2, -0.7, 1.1]).unwrap();
        qmix_forward(&m, &qs, &s).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic = qs.grad().unwrap();
        let fd = finite_difference_gradients(
            |v| {
                qs.set_values(v).unwrap();
                let out = no_grad(|| qmix_forward(&m, &qs, &s).unwrap().item());
                qs.set_values(&qs0).unwrap();
                out
            },
            &qs0,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &fd, 1e-4) < 1e-6);
    }

    #[test]
    fn td_target_examples() {
        // Terminal step pays the reward only.
        let y = td_target(&[2.5], &[true], &[7.0], 0.99).unwrap();
        assert_eq!(y, vec![2.5]);
        // r=1, gamma=0.99, next target 2, non-terminal.
        let y = td_target(&[1.0], &[false], &[2.0], 0.99).unwrap();
        assert!((y[0] - 2.98).abs() < 1e-12);
        // gamma = 0 reduces to the reward everywhere.
        let y = td_target(&[0.3, -0.1], &[false, false], &[5.0, 9.0], 0.0).unwrap();
        assert_eq!(y, vec![0.3, -0.1]);
        assert!(td_target(&[1.0], &[false, true], &[0.0], 0.99).is_err());
    }

    #[test]
    fn masked_loss_ignores_padding() {
        let pred = Tensor::param(&[4, 1], vec![1.0, 2.0, 3.0, 50.0]).unwrap();
        let targets = [0.5, 2.5, 2.0, -99.0];
        let full = masked_td_loss(&pred, &targets, &[1.0, 1.0, 1.0, 0.0]).unwrap().item();
        let pred3 = Tensor::param(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let trimmed = masked_td_loss(&pred3, &targets[..3], &[1.0, 1.0, 1.0]).unwrap().item();
        assert!((full - trimmed).abs() < 1e-12);
        // (0.25 + 0.25 + 1.0) / 3
        assert!((full - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_rejects_empty_mask() {
        let pred = Tensor::param(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert!(masked_td_loss(&pred, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(masked_td_loss(&pred, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let td = Tensor::scalar(1.0);
        let bvme = Tensor::scalar(0.5);
        let group = Tensor::scalar(2.0);
        let t = total_loss(&td, &bvme, Some(&group), 0.25).unwrap();
        assert!((t.total.item() - 2.0).abs() < 1e-12);

        let plain = total_loss(&td, &Tensor::scalar(0.0), None, 0.0).unwrap();
        assert_eq!(plain.total.item(), 1.0);
        assert_eq!(plain.group.item(), 0.0);
    }
}
