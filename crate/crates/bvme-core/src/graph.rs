//! Attention coordination graphs over agent features.
//!
//! Edge means come from scaled dot-product attention: with per-agent feature
//! rows F, scores are `(F Wq)(F Wk)^T / sqrt(d_k)` and the mean adjacency is
//! the row softmax of the scores over the current mask. The diagonal
//! (self-loop) is always in the mask. In learned mode every edge also
//! carries a std from one learned log-std scalar, so the adjacency can be
//! sampled with reparameterized Gaussian noise (clipped at zero); in dense
//! mode the softmax rows are used as-is.
//!
//! Top-k sparsification keeps, per row, the self-loop plus the k strongest
//! off-diagonal mean weights (ties to the lower agent index), then
//! renormalizes by re-softmaxing the surviving scores. Selection reads mean
//! values and is not differentiated; gradients flow through the surviving
//! scores only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};
use crate::nn::{Activation, Linear};
use crate::tensor::Tensor;

/// How the adjacency backbone is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Attention means + learned edge noise + top-k sparsification.
    Learned,
    /// Dense softmax attention, no noise, no sparsification.
    Dense,
}

/// Adjacency selection at execution time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Recompute the mean adjacency from the current features every step.
    Dynamic,
    /// Reuse one adjacency sampled in advance.
    StaticSampled,
    /// Use the mean adjacency.
    Mean,
}

/// Attention projections and the edge-noise parameter.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_query: Linear,
    pub w_key: Linear,
    /// Learned log std shared by all edges, shape [1, 1].
    pub edge_log_std: Tensor,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_k: usize, edge_std_init: f64) -> AttentionParams {
        assert!(edge_std_init > 0.0, "edge noise std must be positive");
        AttentionParams {
            w_query: Linear::init(rng, d_in, d_k, false, Activation::Linear),
            w_key: Linear::init(rng, d_in, d_k, false, Activation::Linear),
            edge_log_std: Tensor::param(&[1, 1], vec![edge_std_init.ln()]).unwrap(),
            d_k,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.w_query.params();
        p.extend(self.w_key.params());
        p.push(self.edge_log_std.clone());
        p
    }
}

/// One coordination graph: raw scores, masked row-stochastic means, optional
/// per-edge stds, and the 0/1 mask (diagonal always 1).
#[derive(Debug, Clone)]
pub struct CoordinationGraph {
    pub n: usize,
    pub scores: Tensor,
    pub mu: Tensor,
    pub sigma_diag: Option<Tensor>,
    pub mask: Vec<f64>,
}

/// Additive bias sending masked scores to the softmax floor.
const MASK_NEG: f64 = -1e30;

fn masked_softmax(scores: &Tensor, mask: &[f64], n: usize) -> Result<Tensor> {
    let bias: Vec<f64> = mask.iter().map(|m| if *m > 0.5 { 0.0 } else { MASK_NEG }).collect();
    let bias_t = Tensor::constant(&[n, n], bias)?;
    scores.add(&bias_t)?.row_softmax()
}

/// Broadcasts the scalar [1,1] log-std to an [n,n] std matrix, keeping it
/// differentiable with respect to the scalar.
fn splat_sigma(edge_log_std: &Tensor, n: usize) -> Result<Tensor> {
    let ones = Tensor::constant(&[n * n, 1], vec![1.0; n * n])?;
    ones.matmul(edge_log_std)?.reshape(&[n, n])?.exp()
}

/// Builds the mean coordination graph from per-agent features `[n, d]`.
///
/// Learned mode attaches per-edge stds; dense mode leaves them out. The
/// result's mean rows are row-stochastic over the (initially full) mask.
pub fn attention_mean_adjacency(features: &Tensor, p: &AttentionParams, mode: GraphMode) -> Result<CoordinationGraph> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(BvmeError::dimension("attention_mean_adjacency", format!("features must be [n, d], got {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(BvmeError::Contract(format!("coordination graph needs n >= 2 agents, got {n}")));
    }
    let q = p.w_query.forward(features)?;
    let k = p.w_key.forward(features)?;
    let scores = q.matmul_tr(&k)?.scale(1.0 / (p.d_k as f64).sqrt())?;
    let mask = vec![1.0; n * n];
    let mu = masked_softmax(&scores, &mask, n)?;
    let sigma_diag = match mode {
        GraphMode::Learned => Some(splat_sigma(&p.edge_log_std, n)?),
        GraphMode::Dense => None,
    };
    Ok(CoordinationGraph { n, scores, mu, sigma_diag, mask })
}

/// Keeps, per row, the self-loop plus the `k` largest off-diagonal mean
/// weights (ties to the lower index) and renormalizes the row. `k` must lie
/// in `1..=n-1`; `k = n-1` keeps every edge.
pub fn sparsify_topk(g: &CoordinationGraph, k: usize, sigma_source: Option<&AttentionParams>) -> Result<CoordinationGraph> {
    let n = g.n;
    if k == 0 || k > n - 1 {
        return Err(BvmeError::Contract(format!("top-k keep count must be in 1..={}, got {k}", n - 1)));
    }
    let mu_vals = g.mu.to_vec();
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 1.0;
        // Sort candidates by (weight desc, index asc); stable on exact ties.
        let mut others: Vec<usize> = (0..n).filter(|j| *j != i).collect();
        others.sort_by(|&a, &b| {
            mu_vals[i * n + b]
                .partial_cmp(&mu_vals[i * n + a])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in others.iter().take(k) {
            mask[i * n + j] = 1.0;
        }
    }
    let mu = masked_softmax(&g.scores, &mask, n)?;
    let sigma_diag = match sigma_source {
        Some(p) => Some(splat_sigma(&p.edge_log_std, n)?),
        None => g.sigma_diag.clone(),
    };
    Ok(CoordinationGraph { n, scores: g.scores.clone(), mu, sigma_diag, mask })
}

/// Draws one adjacency `clip(mu + sigma * eps, >= 0) * mask` with
/// reparameterized noise, differentiable through both mu and sigma.
pub fn sample_adjacency(g: &CoordinationGraph, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let sigma = g
        .sigma_diag
        .as_ref()
        .ok_or_else(|| BvmeError::Contract("sample_adjacency needs per-edge stds (learned mode)".into()))?;
    let n = g.n;
    let eps: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let eps_t = Tensor::constant(&[n, n], eps)?;
    let mask_t = Tensor::constant(&[n, n], g.mask.clone())?;
    g.mu
        .add(&sigma.mul(&eps_t)?)?
        .clamp(0.0, f64::INFINITY)?
        .mul(&mask_t)
}

/// Adjacency used when acting: recomputed mean (`Dynamic`), a cached sample
/// (`StaticSampled`), or the mean (`Mean`).
pub fn execution_adjacency(g: &CoordinationGraph, mode: ExecMode, cached: Option<&Tensor>) -> Result<Tensor> {
    match mode {
        ExecMode::Dynamic | ExecMode::Mean => Ok(g.mu.clone()),
        ExecMode::StaticSampled => cached
            .cloned()
            .ok_or_else(|| BvmeError::Contract("static_sampled execution needs a cached adjacency".into())),
    }
}

/// Graph-convolution parameters: per layer a bias-free weight applied after
/// neighborhood aggregation, with ReLU.
#[derive(Debug, Clone)]
pub struct GnnParams {
    pub layers: Vec<Linear>,
}

impl GnnParams {
    /// `dims = [d_in, hidden..., d_out]`.
    pub fn init(rng: &mut ChaCha8Rng, dims: &[usize]) -> Result<GnnParams> {
        if dims.len() < 2 {
            return Err(BvmeError::Contract(format!("gnn needs at least one layer, dims={dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|d| Linear::init(rng, d[0], d[1], false, Activation::Relu))
            .collect();
        Ok(GnnParams { layers })
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }
}

/// Message passing: per layer `X <- relu((A X) W)`.
pub fn gnn_forward(adj: &Tensor, x: &Tensor, p: &GnnParams) -> Result<Tensor> {
    let adj_shape = adj.shape();
    let x_shape = x.shape();
    if adj_shape.len() != 2 || adj_shape[0] != adj_shape[1] {
        return Err(BvmeError::dimension("gnn_forward", format!("adjacency must be square, got {adj_shape:?}")));
    }
    if x_shape.len() != 2 || x_shape[0] != adj_shape[0] {
        return Err(BvmeError::dimension(
            "gnn_forward",
            format!("features {x_shape:?} incompatible with adjacency {adj_shape:?}"),
        ));
    }
    let mut h = x.clone();
    for layer in &p.layers {
        h = layer.forward(&adj.matmul(&h)?)?;
    }
    Ok(h)
}
