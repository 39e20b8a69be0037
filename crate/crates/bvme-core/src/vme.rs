//! Variational message encoding under a bandwidth penalty.
//!
//! Deterministic per-agent messages m are replaced by a diagonal Gaussian
//! posterior per agent: mu = Enc_mu(m), log sigma^2 = Enc_sigma(m), both
//! single affine layers d_msg -> d_msg. Teammates receive a reparameterized
//! sample z = mu + sigma * eps during training and the mean at (deterministic)
//! execution. Compression pressure comes from the closed-form KL of each
//! posterior against an isotropic zero-mean prior N(0, sigma0^2 I):
//!
//!   KL_i = 1/2 * sum_d ( (sigma_{i,d}^2 + mu_{i,d}^2) / sigma0^2
//!                        - 1 + log(sigma0^2 / sigma_{i,d}^2) )
//!
//! and is added to the loss as lambda_kl times the batch-averaged KL, with an
//! optional extra division by d_msg so lambda_kl transfers across message
//! widths. Log variances are clamped to a finite interval before use, so
//! sigma stays inside [exp(min/2), exp(max/2)] and the KL stays finite.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};
use crate::nn::{Activation, Linear};
use crate::tensor::Tensor;

/// Isotropic Gaussian prior N(0, sigma0^2 I) shared by all agents.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BvmePrior {
    pub sigma0: f64,
}

impl BvmePrior {
    pub fn new(sigma0: f64) -> Result<BvmePrior> {
        if !(sigma0 > 0.0) || !sigma0.is_finite() {
            return Err(BvmeError::domain("prior", format!("sigma0 must be finite and positive, got {sigma0}")));
        }
        Ok(BvmePrior { sigma0 })
    }
}

/// Where the stochastic sample enters the value pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Teammates receive the sampled z; TD gradients reach both heads.
    OnPath,
    /// Teammates receive mu; the sigma head only learns from the KL term.
    OffPath,
}

/// What teammates receive from a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Reparameterized draw mu + sigma * eps (training).
    Stochastic,
    /// Posterior mean (deterministic execution).
    Mean,
}

/// Knobs of the bandwidth penalty.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BvmeConfig {
    /// Penalty weight; 0 turns the bottleneck off.
    pub lambda_kl: f64,
    /// Prior std.
    pub sigma0: f64,
    /// Whether the Q-pipeline consumes the sample or the mean.
    pub coupling: Coupling,
    /// Training-time message realization.
    pub sample_mode: SampleMode,
    /// Divide the penalty by d_msg as well as by n and T.
    pub normalize_by_dim: bool,
    /// Clamp bounds for predicted log variances.
    pub log_var_min: f64,
    pub log_var_max: f64,
}

impl Default for BvmeConfig {
    fn default() -> BvmeConfig {
        BvmeConfig {
            lambda_kl: 1e-3,
            sigma0: 1.0,
            coupling: Coupling::OnPath,
            sample_mode: SampleMode::Stochastic,
            normalize_by_dim: true,
            log_var_min: -5.0,
            log_var_max: 3.0,
        }
    }
}

impl BvmeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_kl < 0.0 || !self.lambda_kl.is_finite() {
            return Err(BvmeError::Config(format!("lambda_kl must be finite and >= 0, got {}", self.lambda_kl)));
        }
        BvmePrior::new(self.sigma0)?;
        if self.log_var_min >= self.log_var_max {
            return Err(BvmeError::Config(format!(
                "log variance clamp needs min < max, got [{}, {}]",
                self.log_var_min, self.log_var_max
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian message posterior for n agents, each entry [n, d_msg].
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    /// Clamped log variances.
    pub log_var: Tensor,
}

impl GaussianPosterior {
    pub fn d_msg(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// The two affine posterior heads, each d_msg -> d_msg with bias.
#[derive(Debug, Clone)]
pub struct VmeHeads {
    pub enc_mu: Linear,
    pub enc_sigma: Linear,
}

impl VmeHeads {
    pub fn init(rng: &mut ChaCha8Rng, d_msg: usize) -> VmeHeads {
        VmeHeads {
            enc_mu: Linear::init(rng, d_msg, d_msg, true, Activation::Linear),
            enc_sigma: Linear::init(rng, d_msg, d_msg, true, Activation::Linear),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.enc_mu.params();
        p.extend(self.enc_sigma.params());
        p
    }

    /// Scalar parameter count: two square weights plus two bias vectors.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.shape().iter().product::<usize>()).sum()
    }
}

/// Runs both heads on messages `m` [n, d_msg] and clamps the log variances.
pub fn encode_posterior(m: &Tensor, heads: &VmeHeads, log_var_min: f64, log_var_max: f64) -> Result<GaussianPosterior> {
    let shape = m.shape();
    if shape.len() != 2 {
        return Err(BvmeError::dimension("encode_posterior", format!("messages must be [n, d_msg], got {shape:?}")));
    }
    let mu = heads.enc_mu.forward(m)?;
    let log_var = heads.enc_sigma.forward(m)?.clamp(log_var_min, log_var_max)?;
    Ok(GaussianPosterior { mu, log_var })
}

/// Realizes messages from the posterior. Sampling keeps the draw
/// differentiable through mu and log_var.
pub fn sample_message(post: &GaussianPosterior, mode: SampleMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match mode {
        SampleMode::Mean => Ok(post.mu.clone()),
        SampleMode::Stochastic => {
            let shape = post.mu.shape();
            let count: usize = shape.iter().product();
            let eps: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
            let eps_t = Tensor::constant(&shape, eps)?;
            let sigma = post.log_var.scale(0.5)?.exp()?;
            post.mu.add(&sigma.mul(&eps_t)?)
        }
    }
}

/// Per-agent KL against N(0, sigma0^2 I): output shape [n], differentiable.
///
/// Uses the expansion
///   1/2 * ( e^{lv} / s0^2 + mu^2 / s0^2 - 1 + ln s0^2 - lv )
/// summed over message dims, which needs no division ops.
pub fn kl_to_prior(post: &GaussianPosterior, prior: BvmePrior) -> Result<Tensor> {
    let c1 = 1.0 / (prior.sigma0 * prior.sigma0);
    let c2 = (prior.sigma0 * prior.sigma0).ln();
    let var_term = post.log_var.exp()?.scale(c1)?;
    let mu_term = post.mu.square()?.scale(c1)?;
    let elementwise = var_term
        .add(&mu_term)?
        .add(&post.log_var.neg()?)?
        .add_scalar(c2 - 1.0)?
        .scale(0.5)?;
    elementwise.sum_axis(1)
}

/// Scalar KL summed over agents and dims.
pub fn kl_sum(post: &GaussianPosterior, prior: BvmePrior) -> Result<Tensor> {
    kl_to_prior(post, prior)?.sum_all()
}

/// Folds per-step KL sums into the scalar penalty
/// `lambda_kl / (n * T * [d_msg]) * sum_t mask_t * kl_t`.
///
/// `kl_step_sums[t]` is the scalar KL summed over agents at step t of the
/// padded batch slice and `step_mask[t]` is 1 for real steps, 0 for padding.
/// T counts valid steps only (`sum_t mask_t`), so appending all-masked
/// padding never changes the penalty.
pub fn bvme_penalty(
    kl_step_sums: &[Tensor],
    step_mask: &[f64],
    cfg: &BvmeConfig,
    n_agents: usize,
    d_msg: usize,
) -> Result<Tensor> {
    if kl_step_sums.len() != step_mask.len() {
        return Err(BvmeError::dimension(
            "bvme_penalty",
            format!("{} KL terms vs {} mask entries", kl_step_sums.len(), step_mask.len()),
        ));
    }
    let t_b: f64 = step_mask.iter().sum();
    if t_b <= 0.0 {
        return Err(BvmeError::Contract("bvme_penalty needs at least one unmasked step".into()));
    }
    let mut denom = n_agents as f64 * t_b;
    if cfg.normalize_by_dim {
        denom *= d_msg as f64;
    }
    let mut acc = Tensor::scalar(0.0);
    for (kl, m) in kl_step_sums.iter().zip(step_mask) {
        if *m != 0.0 {
            acc = acc.add(&kl.scale(*m)?)?;
        }
    }
    acc.scale(cfg.lambda_kl / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{self, finite_difference_gradients, max_rel_err, mc_kl_estimate};
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::no_grad;
    use proptest::prelude::*;
    use rand::Rng;

    fn posterior(mu: &[f64], log_var: &[f64], d: usize) -> GaussianPosterior {
        let n = mu.len() / d;
        GaussianPosterior {
            mu: Tensor::param(&[n, d], mu.to_vec()).unwrap(),
            log_var: Tensor::param(&[n, d], log_var.to_vec()).unwrap(),
        }
    }

    #[test]
    fn kl_matches_frozen_hand_value() {
        // mu=5, sigma=1 (log_var=0), sigma0=0.1, one dim.
        let post = posterior(&[5.0], &[0.0], 1);
        let kl = kl_sum(&post, BvmePrior::new(0.1).unwrap()).unwrap().item();
        let rel = (kl - oracle::KL_5_1_01).abs() / oracle::KL_5_1_01;
        assert!(rel < 1e-12, "kl={kl} rel={rel}");
    }

    #[test]
    fn kl_is_zero_when_posterior_equals_prior() {
        // sigma0 = 1, mu = 0, log_var = 0 means posterior == prior.
        let post = posterior(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 3);
        let kl = kl_sum(&post, BvmePrior::new(1.0).unwrap()).unwrap().item();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let post = posterior(&[0.4, -1.2], &[(0.25f64).ln() * 2.0, (0.9f64).ln() * 2.0], 2);
        let analytic = kl_sum(&post, BvmePrior::new(0.7).unwrap()).unwrap().item();
        let mut rng = stream_rng(99, Stream::Sampling);
        let mc = mc_kl_estimate(0.4, 0.25, 0.7, 400_000, &mut rng).unwrap()
            + mc_kl_estimate(-1.2, 0.9, 0.7, 400_000, &mut rng).unwrap();
        let rel = (analytic - mc).abs() / analytic.abs();
        assert!(rel < 0.02, "analytic={analytic} mc={mc} rel={rel}");
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let prior = BvmePrior::new(0.5).unwrap();
        let mu0 = [0.3, -0.7, 1.1, 0.2];
        let lv0 = [-0.5, 0.4, 0.0, -1.3];
        let post = posterior(&mu0, &lv0, 2);
        kl_sum(&post, prior).unwrap().backward().unwrap();

        for (t, base) in [(&post.mu, &mu0[..]), (&post.log_var, &lv0[..])] {
            let analytic = t.grad().unwrap();
            let fd = finite_difference_gradients(
                |v| {
                    t.set_values(v).unwrap();
                    let out = no_grad(|| kl_sum(&post, prior).unwrap().item());
                    t.set_values(base).unwrap();
                    out
                },
                base,
                1e-6,
            )
            .unwrap();
            assert!(max_rel_err(&analytic, &fd, 1e-6) < 1e-7);
        }
    }

    #[test]
    fn unit_posterior_against_unit_prior_has_half_nat() {
        // d=1, mu=1, sigma=1, sigma0=1: KL = 0.5*(2 - 1 + 0) = 0.5.
        let post = posterior(&[1.0], &[0.0], 1);
        let kl = kl_sum(&post, BvmePrior::new(1.0).unwrap()).unwrap().item();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_gradient_wrt_mu_is_mu_over_sigma0_squared() {
        let prior = BvmePrior::new(0.5).unwrap();
        let mu0 = [0.8, -0.3];
        let post = posterior(&mu0, &[0.2, -0.7], 2);
        kl_sum(&post, prior).unwrap().backward().unwrap();
        let g = post.mu.grad().unwrap();
        for (gi, mi) in g.iter().zip(&mu0) {
            assert!((gi - mi / 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heads_give_standard_normal_posterior() {
        let mut rng = stream_rng(8, Stream::Init);
        let heads = VmeHeads::init(&mut rng, 3);
        for t in heads.params() {
            let zeros = vec![0.0; t.shape().iter().product()];
            t.set_values(&zeros).unwrap();
        }
        let m = Tensor::constant(&[2, 3], vec![0.4, -0.1, 0.9, 1.2, 0.0, -2.0]).unwrap();
        let post = encode_posterior(&m, &heads, -5.0, 3.0).unwrap();
        assert!(post.mu.to_vec().iter().all(|v| *v == 0.0));
        assert!(post.log_var.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_kl_full_mask_reduces_to_weighted_constant() {
        // Every agent contributes KL = c at every step: penalty = lambda*c/d_msg.
        let c = 2.5;
        let (n, d, t) = (3, 4, 6);
        let cfg = BvmeConfig { lambda_kl: 0.8, ..BvmeConfig::default() };
        let kls: Vec<Tensor> = (0..t).map(|_| Tensor::scalar(c * n as f64)).collect();
        let mask = vec![1.0; t];
        let p = bvme_penalty(&kls, &mask, &cfg, n, d).unwrap().item();
        assert!((p - 0.8 * c / d as f64).abs() < 1e-12);
    }

    #[test]
    fn encode_clamps_log_var() {
        let mut rng = stream_rng(3, Stream::Init);
        let heads = VmeHeads::init(&mut rng, 2);
        // Force extreme raw log variances via huge bias.
        heads.enc_sigma.b.as_ref().unwrap().set_values(&[50.0, -50.0]).unwrap();
        let m = Tensor::constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let post = encode_posterior(&m, &heads, -5.0, 3.0).unwrap();
        let lv = post.log_var.to_vec();
        assert_eq!(lv, vec![3.0, -5.0]);
    }

    #[test]
    fn head_param_count_closed_form() {
        let mut rng = stream_rng(4, Stream::Init);
        for d in [1, 4, 5, 16] {
            let heads = VmeHeads::init(&mut rng, d);
            assert_eq!(heads.param_count(), 2 * (d * d + d));
        }
    }

    #[test]
    fn mean_mode_returns_mu_and_ignores_rng() {
        let post = posterior(&[0.5, -0.25], &[1.0, -1.0], 2);
        let mut rng = stream_rng(7, Stream::Sampling);
        let before = rng.clone();
        let z = sample_message(&post, SampleMode::Mean, &mut rng).unwrap();
        assert_eq!(z.to_vec(), vec![0.5, -0.25]);
        // Mean mode must not consume randomness.
        let a: u64 = rng.gen();
        let b: u64 = before.clone().gen();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_messages_concentrate_on_mu_for_tiny_sigma() {
        let post = posterior(&[2.0, -3.0], &[-5.0, -5.0], 2);
        // log_var -5 means sigma ~ 0.082; mean over many samples ~ mu.
        let mut rng = stream_rng(11, Stream::Sampling);
        let mut acc = [0.0; 2];
        let n = 20_000;
        no_grad(|| {
            for _ in 0..n {
                let z = sample_message(&post, SampleMode::Stochastic, &mut rng).unwrap();
                for (a, v) in acc.iter_mut().zip(z.to_vec()) {
                    *a += v;
                }
            }
        });
        let sigma = (-5.0f64 / 2.0).exp();
        let tol = 4.0 * sigma / (n as f64).sqrt();
        assert!((acc[0] / n as f64 - 2.0).abs() < tol);
        assert!((acc[1] / n as f64 + 3.0).abs() < tol);
    }

    #[test]
    fn sampling_is_differentiable_through_both_heads() {
        let post = posterior(&[0.2, 0.8], &[0.1, -0.2], 2);
        let mut rng = stream_rng(13, Stream::Sampling);
        let z = sample_message(&post, SampleMode::Stochastic, &mut rng).unwrap();
        z.sum_all().unwrap().backward().unwrap();
        assert!(post.mu.grad().is_some());
        assert!(post.log_var.grad().is_some());
        // d z / d mu = 1 per element.
        assert_eq!(post.mu.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn penalty_normalization_and_masking() {
        let cfg = BvmeConfig { lambda_kl: 0.6, sigma0: 1.0, ..BvmeConfig::default() };
        let kls = vec![Tensor::scalar(10.0), Tensor::scalar(20.0), Tensor::scalar(40.0)];
        let mask = [1.0, 1.0, 0.0];
        // n=2 agents, d_msg=4, 2 valid steps: 0.6 / (2*2*4) * (10 + 20) = 1.125
        let p = bvme_penalty(&kls, &mask, &cfg, 2, 4).unwrap().item();
        assert!((p - 1.125).abs() < 1e-12);

        let cfg2 = BvmeConfig { normalize_by_dim: false, ..cfg };
        // 0.6 / (2*2) * 30 = 4.5
        let p2 = bvme_penalty(&kls, &mask, &cfg2, 2, 4).unwrap().item();
        assert!((p2 - 4.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_ignores_appended_padding() {
        let cfg = BvmeConfig { lambda_kl: 0.3, ..BvmeConfig::default() };
        let kls = vec![Tensor::scalar(5.0), Tensor::scalar(7.0)];
        let base = bvme_penalty(&kls, &[1.0, 1.0], &cfg, 3, 2).unwrap().item();
        let padded = vec![
            Tensor::scalar(5.0),
            Tensor::scalar(7.0),
            Tensor::scalar(123.0),
            Tensor::scalar(-9.0),
        ];
        let with_pad = bvme_penalty(&padded, &[1.0, 1.0, 0.0, 0.0], &cfg, 3, 2).unwrap().item();
        assert!((base - with_pad).abs() < 1e-12);
    }

    #[test]
    fn penalty_rejects_mismatched_or_empty_mask() {
        let cfg = BvmeConfig::default();
        let kls = vec![Tensor::scalar(1.0)];
        assert!(bvme_penalty(&kls, &[1.0, 1.0], &cfg, 2, 4).is_err());
        assert!(bvme_penalty(&[], &[], &cfg, 2, 4).is_err());
        assert!(bvme_penalty(&kls, &[0.0], &cfg, 2, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BvmeConfig::default().validate().is_ok());
        assert!(BvmeConfig { lambda_kl: -0.1, ..BvmeConfig::default() }.validate().is_err());
        assert!(BvmeConfig { sigma0: 0.0, ..BvmeConfig::default() }.validate().is_err());
        assert!(BvmeConfig { log_var_min: 3.0, log_var_max: 3.0, ..BvmeConfig::default() }.validate().is_err());
    }

    proptest! {
        // Random posterior configurations against an independent per-dim
        // closed form computed with ordinary arithmetic.
        #[test]
        fn kl_matches_scalar_formula(
            mu in -3.0f64..3.0,
            lv in -4.0f64..2.0,
            s0 in 0.1f64..2.0,
        ) {
            let post = posterior(&[mu], &[lv], 1);
            let got = kl_sum(&post, BvmePrior::new(s0).unwrap()).unwrap().item();
            let var = lv.exp();
            let expect = 0.5 * ((var + mu * mu) / (s0 * s0) - 1.0 + ((s0 * s0) / var).ln());
            prop_assert!((got - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }

        #[test]
        fn kl_is_nonnegative(
            mu in -5.0f64..5.0,
            lv in -5.0f64..3.0,
            s0 in 0.05f64..3.0,
        ) {
            let post = posterior(&[mu], &[lv], 1);
            let got = kl_sum(&post, BvmePrior::new(s0).unwrap()).unwrap().item();
            prop_assert!(got >= -1e-12);
        }
    }
}
