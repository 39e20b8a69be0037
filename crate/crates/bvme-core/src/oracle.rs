//! Independent verification oracles.
//!
//! Everything in this module is deliberately written against plain `f64`
//! slices and the environment interface only. Nothing here calls the tensor
//! engine, the closed-form KL, or the policy stack, so a bug in those paths
//! cannot cancel out of a comparison against these oracles.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::Environment;
use crate::error::{BvmeError, Result};

/// Hard cap on the number of open-loop sequences the exhaustive search will
/// enumerate.
pub const EXHAUSTIVE_SEQUENCE_CAP: u64 = 1_000_000;

/// KL(N(5, 1) || N(0, 0.01)) = 0.5 * (2600 - 1 + ln 0.01), worked by hand:
/// (sigma^2 + mu^2) / sigma0^2 = 26 / 0.01 = 2600, ln 0.01 = -4.605170185988091.
pub const KL_5_1_01: f64 = 1297.197414907006;

/// Outcome of one oracle comparison, used by test reports.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: String,
    pub oracle_value: f64,
    pub checked_value: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OracleReport {
    /// Builds a report with relative error `|a-b| / max(|a|, |b|, floor)`.
    pub fn compare(name: &str, oracle_value: f64, checked_value: f64, tolerance: f64, floor: f64) -> Self {
        let abs_err = (oracle_value - checked_value).abs();
        let rel_err = abs_err / oracle_value.abs().max(checked_value.abs()).max(floor);
        OracleReport {
            name: name.to_string(),
            oracle_value,
            checked_value,
            abs_err,
            rel_err,
            tolerance,
            passed: rel_err < tolerance,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {}: oracle={:.9e} checked={:.9e} rel_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.oracle_value,
            self.checked_value,
            self.rel_err,
            self.tolerance
        )
    }
}

// ----------------------------------------------------------------------
// Monte-Carlo KL
// ----------------------------------------------------------------------

/// Log density of N(mu, sigma^2) at z.
pub fn gaussian_log_density(z: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(BvmeError::domain("gaussian_log_density", format!("sigma must be positive and finite, got {sigma}")));
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let d = (z - mu) / sigma;
    Ok(-0.5 * (ln_2pi + 2.0 * sigma.ln() + d * d))
}

/// Monte-Carlo estimate of KL(N(mu, sigma^2) || N(0, sigma0^2)) for one
/// coordinate: the sample mean of `log p(z) - log q(z)` over `z ~ p`.
pub fn mc_kl_estimate<R: Rng>(mu: f64, sigma: f64, sigma0: f64, samples: u64, rng: &mut R) -> Result<f64> {
    if samples == 0 {
        return Err(BvmeError::Contract("mc_kl_estimate needs at least one sample".into()));
    }
    if !(sigma > 0.0 && sigma0 > 0.0) {
        return Err(BvmeError::domain("mc_kl_estimate", format!("sigma={sigma} sigma0={sigma0} must be positive")));
    }
    let mut acc = 0.0f64;
    for _ in 0..samples {
        let eps: f64 = StandardNormal.sample(rng);
        let z = mu + sigma * eps;
        let lp = gaussian_log_density(z, mu, sigma)?;
        let lq = gaussian_log_density(z, 0.0, sigma0)?;
        acc += lp - lq;
    }
    Ok(acc / samples as f64)
}

// ----------------------------------------------------------------------
// Finite differences
// ----------------------------------------------------------------------

/// Central finite-difference gradient of `f` at `x` with step `h`.
///
/// `f` must be deterministic; a non-finite evaluation is a contract error.
pub fn finite_difference_gradients<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(BvmeError::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(BvmeError::Contract(format!(
                "finite-difference evaluation non-finite at coordinate {i}: f+={fp} f-={fm}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error used when comparing analytic and numeric gradients:
/// `|a-d| / max(|a|, |d|, floor)` elementwise, maximum over coordinates.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, d)| (a - d).abs() / a.abs().max(d.abs()).max(floor))
        .fold(0.0, f64::max)
}

// ----------------------------------------------------------------------
// Exhaustive open-loop policy search
// ----------------------------------------------------------------------

/// Result of the exhaustive search: the optimal discounted return and the
/// lexicographically smallest joint-action sequence attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub optimal_return: f64,
    /// `argmax[t][i]` is agent i's action at step t.
    pub argmax: Vec<Vec<usize>>,
    pub sequences_evaluated: u64,
}

/// Enumerates every open-loop joint-action sequence of an episodic
/// environment and returns the best discounted return.
///
/// Sequences are visited in lexicographic order over the flattened
/// `(t, agent)` action array, so on ties the first (lexicographically
/// smallest) maximizer is kept. The environment is reset with `seed` before
/// each rollout; it must be deterministic given that seed.
pub fn exhaustive_policy_value(env: &mut dyn Environment, seed: u64, gamma: f64) -> Result<ExhaustiveResult> {
    let spec = env.spec().clone();
    let n = spec.n_agents;
    let horizon = spec.horizon;
    let n_actions = spec.n_actions;
    let slots = n * horizon;

    let mut total: u64 = 1;
    for _ in 0..slots {
        total = total.saturating_mul(n_actions as u64);
        if total > EXHAUSTIVE_SEQUENCE_CAP {
            return Err(BvmeError::Contract(format!(
                "exhaustive search needs {}^{} sequences, cap is {}",
                n_actions, slots, EXHAUSTIVE_SEQUENCE_CAP
            )));
        }
    }

    let mut best_return = f64::NEG_INFINITY;
    let mut best_seq: Vec<usize> = Vec::new();
    // Flattened action assignment, index t*n + i.
    let mut seq = vec![0usize; slots];
    let mut evaluated: u64 = 0;

    loop {
        env.reset(seed)?;
        let mut ret = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            let joint = &seq[t * n..(t + 1) * n];
            let step = env.step(joint)?;
            ret += discount * step.reward;
            discount *= gamma;
            if step.terminated {
                break;
            }
        }
        evaluated += 1;
        if ret > best_return {
            best_return = ret;
            best_seq = seq.clone();
        }

        // Advance to the next sequence in lexicographic order.
        let mut pos = slots;
        loop {
            if pos == 0 {
                let argmax = best_seq.chunks(n).map(|c| c.to_vec()).collect();
                return Ok(ExhaustiveResult { optimal_return: best_return, argmax, sequences_evaluated: evaluated });
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < n_actions {
                break;
            }
            seq[pos] = 0;
        }
    }
}
