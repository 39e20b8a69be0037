//! Layers, initialization, and the optimizer.
//!
//! Convention: activations are row vectors, so a linear map stores its
//! weight as `[fan_in, fan_out]` and computes `x . w + b` for a batch of
//! rows. Weights initialize uniformly on +/- sqrt(3 / fan_in), which has
//! standard deviation exactly 1/sqrt(fan_in); biases start at zero.
//!
//! The GRU uses the gate convention
//! `h' = (1 - z) * h_prev + z * h_hat`,
//! so all-zero weights give z = 0.5 and h' = 0.5 * h_prev.
//!
//! RMSprop keeps one squared-gradient accumulator per parameter, keyed by
//! tensor identity, and applies global gradient-norm clipping across all
//! parameters jointly before the update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BvmeError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

fn activate(x: Tensor, act: Activation) -> Result<Tensor> {
    match act {
        Activation::Linear => Ok(x),
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

/// One dense layer `act(x . w + b)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub act: Activation,
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, bias: bool, act: Activation) -> Linear {
        let w = Tensor::param(&[fan_in, fan_out], uniform_fan_in(rng, fan_in, fan_in * fan_out)).unwrap();
        let b = bias.then(|| Tensor::param(&[fan_out], vec![0.0; fan_out]).unwrap());
        Linear { w, b, act }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.w)?;
        if let Some(b) = &self.b {
            y = y.add(b)?;
        }
        activate(y, self.act)
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, Tensor::len)
    }
}

/// Samples `n` values uniformly on +/- sqrt(3/fan_in).
fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (3.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

impl MlpParams {
    /// `dims = [in, h1, ..., out]`, one activation per layer.
    pub fn init(rng: &mut ChaCha8Rng, dims: &[usize], acts: &[Activation], bias: bool) -> Result<MlpParams> {
        if dims.len() < 2 || acts.len() != dims.len() - 1 {
            return Err(BvmeError::Contract(format!(
                "mlp needs >=2 dims and one activation per layer: dims={dims:?} acts={}",
                acts.len()
            )));
        }
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &act)| Linear::init(rng, d[0], d[1], bias, act))
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

/// Single-step GRU cell.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> GruParams {
        let w = |rng: &mut ChaCha8Rng| Tensor::param(&[input, hidden], uniform_fan_in(rng, input, input * hidden)).unwrap();
        let u = |rng: &mut ChaCha8Rng| Tensor::param(&[hidden, hidden], uniform_fan_in(rng, hidden, hidden * hidden)).unwrap();
        let b = || Tensor::param(&[hidden], vec![0.0; hidden]).unwrap();
        GruParams {
            w_z: w(rng),
            u_z: u(rng),
            b_z: b(),
            w_r: w(rng),
            u_r: u(rng),
            b_r: b(),
            w_h: w(rng),
            u_h: u(rng),
            b_h: b(),
            hidden,
        }
    }

    /// One recurrence step for a batch of rows: `x` is `[R, input]`,
    /// `h_prev` is `[R, hidden]`.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        let z = x.matmul(&self.w_z)?.add(&h_prev.matmul(&self.u_z)?)?.add(&self.b_z)?.sigmoid()?;
        let r = x.matmul(&self.w_r)?.add(&h_prev.matmul(&self.u_r)?)?.add(&self.b_r)?.sigmoid()?;
        let rh = r.mul(h_prev)?;
        let h_hat = x.matmul(&self.w_h)?.add(&rh.matmul(&self.u_h)?)?.add(&self.b_h)?.tanh()?;
        // (1 - z) * h_prev + z * h_hat
        let keep = z.neg()?.add_scalar(1.0)?.mul(h_prev)?;
        keep.add(&z.mul(&h_hat)?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.w_z.clone(),
            self.u_z.clone(),
            self.b_z.clone(),
            self.w_r.clone(),
            self.u_r.clone(),
            self.b_r.clone(),
            self.w_h.clone(),
            self.u_h.clone(),
            self.b_h.clone(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }
}

/// Global L2 norm over a list of gradient vectors.
fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Statistics from one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct GradStats {
    pub norm_pre_clip: f64,
    pub norm_post_clip: f64,
    pub clip_scale: f64,
}

/// RMSprop with global gradient-norm clipping.
#[derive(Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Squared-gradient accumulators, one per parameter, keyed by tensor id.
    state: Vec<(u64, Vec<f64>)>,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64, clip_norm: f64) -> RmsProp {
        RmsProp { lr, alpha, eps, clip_norm, state: Vec::new() }
    }

    /// Applies one update. Every parameter must carry a gradient; the
    /// parameter list must be identical (same tensors, same order) on every
    /// call, since accumulators are keyed by identity.
    pub fn step(&mut self, params: &[Tensor]) -> Result<GradStats> {
        let mut grads = Vec::with_capacity(params.len());
        for p in params {
            match p.grad() {
                Some(g) => grads.push(g),
                None => {
                    return Err(BvmeError::Contract(format!(
                        "missing gradient for parameter id {}",
                        p.id()
                    )))
                }
            }
        }

        if self.state.is_empty() {
            self.state = params.iter().map(|p| (p.id(), vec![0.0; p.len()])).collect();
        } else if self.state.len() != params.len() {
            return Err(BvmeError::Contract(format!(
                "optimizer state tracks {} parameters, got {}",
                self.state.len(),
                params.len()
            )));
        }

        let norm_pre = global_norm(&grads);
        let scale = if norm_pre > self.clip_norm && norm_pre > 0.0 {
            self.clip_norm / norm_pre
        } else {
            1.0
        };
        if scale != 1.0 {
            for g in &mut grads {
                for gi in g.iter_mut() {
                    *gi *= scale;
                }
            }
        }
        let norm_post = norm_pre * scale;

        for ((p, g), (id, v)) in params.iter().zip(&grads).zip(&mut self.state) {
            if p.id() != *id {
                return Err(BvmeError::Contract(format!(
                    "optimizer state keyed to parameter id {id}, got {}",
                    p.id()
                )));
            }
            let mut theta = p.to_vec();
            for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.alpha * *vi + (1.0 - self.alpha) * gi * gi;
                *t -= self.lr * gi / (vi.sqrt() + self.eps);
            }
            p.set_values(&theta)?;
        }

        Ok(GradStats { norm_pre_clip: norm_pre, norm_post_clip: norm_post, clip_scale: scale })
    }
}

/// Total element count over a parameter list.
pub fn param_count(params: &[Tensor]) -> usize {
    params.iter().map(Tensor::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference_gradients, max_rel_err};
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::{no_grad, zero_grads};
    use proptest::prelude::*;

    #[test]
    fn init_weight_std_is_inverse_sqrt_fan_in() {
        let mut rng = stream_rng(42, Stream::Init);
        let fan_in = 10_000;
        let layer = Linear::init(&mut rng, fan_in, 4, true, Activation::Linear);
        let w = layer.w.to_vec();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        let target = 1.0 / (fan_in as f64).sqrt();
        assert!((std - target).abs() / target < 0.1, "std={std} target={target}");
        assert!(layer.b.unwrap().to_vec().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Linear::init(&mut stream_rng(7, Stream::Init), 8, 8, true, Activation::Relu);
        let b = Linear::init(&mut stream_rng(7, Stream::Init), 8, 8, true, Activation::Relu);
        assert_eq!(a.w.to_vec(), b.w.to_vec());
        let c = Linear::init(&mut stream_rng(8, Stream::Init), 8, 8, true, Activation::Relu);
        assert_ne!(a.w.to_vec(), c.w.to_vec());
    }

    #[test]
    fn mlp_forward_known_values() {
        let w = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::param(&[2], vec![1.0, -5.0]).unwrap();
        let mlp = MlpParams {
            layers: vec![Linear { w, b: Some(b), act: Activation::Relu }],
        };
        let x = Tensor::constant(&[1, 2], vec![2.0, 3.0]).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 0.0]);
    }

    #[test]
    fn zero_weight_gru_halves_hidden_state() {
        let zeros2 = || Tensor::param(&[2, 2], vec![0.0; 4]).unwrap();
        let zb = || Tensor::param(&[2], vec![0.0; 2]).unwrap();
        let gru = GruParams {
            w_z: zeros2(),
            u_z: zeros2(),
            b_z: zb(),
            w_r: zeros2(),
            u_r: zeros2(),
            b_r: zb(),
            w_h: zeros2(),
            u_h: zeros2(),
            b_h: zb(),
            hidden: 2,
        };
        let x = Tensor::constant(&[1, 2], vec![3.0, -1.0]).unwrap();
        let h = Tensor::constant(&[1, 2], vec![0.8, -0.4]).unwrap();
        let h2 = gru.step(&x, &h).unwrap();
        assert_eq!(h2.to_vec(), vec![0.4, -0.2]);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = stream_rng(3, Stream::Init);
        let gru = GruParams::init(&mut rng, 3, 2);
        let x = Tensor::constant(&[2, 3], vec![0.5, -0.2, 0.9, -1.1, 0.3, 0.0]).unwrap();
        let h0 = Tensor::constant(&[2, 2], vec![0.1, -0.3, 0.7, 0.2]).unwrap();

        let loss = gru.step(&x, &h0).unwrap().square().unwrap().sum_all().unwrap();
        loss.backward().unwrap();

        // Check one input-to-gate and one recurrent matrix.
        for target in [&gru.w_h, &gru.u_z] {
            let theta = target.to_vec();
            let fd = finite_difference_gradients(
                |v| {
                    no_grad(|| {
                        target.set_values(v).unwrap();
                        let out = gru
                            .step(&x, &h0)
                            .unwrap()
                            .square()
                            .unwrap()
                            .sum_all()
                            .unwrap()
                            .item();
                        target.set_values(&theta).unwrap();
                        out
                    })
                },
                &theta,
                1e-4,
            )
            .unwrap();
            assert!(max_rel_err(&target.grad().unwrap(), &fd, 1e-3) < 1e-6);
        }
    }

    #[test]
    fn rmsprop_first_step_matches_hand_value() {
        // v = 0.01, delta = -lr * 1 / (0.1 + 1e-5).
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let loss = p.clone();
        zero_grads(&[p.clone()]);
        loss.sum_all().unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0]);
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5, 10.0);
        opt.step(&[p.clone()]).unwrap();
        let expected = 1.0 - 5e-4 / (0.1 + 1e-5);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15, "{} vs {expected}", p.to_vec()[0]);
    }

    #[test]
    fn rmsprop_requires_gradients_and_stable_param_list() {
        let p = Tensor::param(&[1], vec![1.0]).unwrap();
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5, 10.0);
        assert!(opt.step(&[p.clone()]).is_err());

        zero_grads(&[p.clone()]);
        opt.step(&[p.clone()]).unwrap();
        let q = Tensor::param(&[1], vec![1.0]).unwrap();
        zero_grads(&[q.clone()]);
        assert!(opt.step(&[q]).is_err());
    }

    #[test]
    fn clipping_rescales_to_exactly_the_cap() {
        let p = Tensor::param(&[4], vec![0.0; 4]).unwrap();
        // Force gradient of 3-4-0-0: norm 5, clip at 2 -> post norm 2.
        zero_grads(&[p.clone()]);
        let x = Tensor::constant(&[4], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        p.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = RmsProp::new(1e-3, 0.99, 1e-5, 2.0);
        let stats = opt.step(&[p]).unwrap();
        assert!((stats.norm_pre_clip - 5.0).abs() < 1e-12);
        assert!((stats.norm_post_clip - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn post_clip_norm_never_exceeds_cap(grads in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let n = grads.len();
            let p = Tensor::param(&[n], vec![0.0; n]).unwrap();
            zero_grads(&[p.clone()]);
            let x = Tensor::constant(&[n], grads).unwrap();
            p.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
            let mut opt = RmsProp::new(1e-3, 0.99, 1e-5, 10.0);
            let stats = opt.step(&[p]).unwrap();
            prop_assert!(stats.norm_post_clip <= 10.0 + 1e-12);
        }

        #[test]
        fn gru_output_bounded_by_convex_combination(
            hv in proptest::collection::vec(-3.0f64..3.0, 2),
            xv in proptest::collection::vec(-3.0f64..3.0, 3),
            seed in 0u64..500
        ) {
            let mut rng = stream_rng(seed, Stream::Init);
            let gru = GruParams::init(&mut rng, 3, 2);
            let x = Tensor::constant(&[1, 3], xv).unwrap();
            let h = Tensor::constant(&[1, 2], hv.clone()).unwrap();
            let h2 = no_grad(|| gru.step(&x, &h).unwrap());
            let bound = hv.iter().fold(1.0f64, |m, v| m.max(v.abs())) + 1e-12;
            for v in h2.to_vec() {
                prop_assert!(v.abs() <= bound, "|{v}| > {bound}");
            }
        }
    }
}
