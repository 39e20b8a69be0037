//! The full value model: observation features, coordination graph, message
//! encoding, recurrent per-agent Q-networks, and the monotonic mixer.
//!
//! One `Model` instance covers all four methods:
//!
//! * `bvme`: learned (or dense) graph backbone plus variational message
//!   heads; teammates receive a sampled z while training and the mean when
//!   acting deterministically.
//! * `gacg_plain`: the same sampled sparse graph backbone, but messages are
//!   the deterministic final-layer projection, no posterior heads.
//! * `dicg_dense`: dense softmax attention graph, deterministic messages.
//! * `qmix_nograph`: no communication at all; the message input is zero.
//!
//! Forward passes are row-batched: `R = episodes * n_agents` rows, grouped
//! by episode. Graph construction stays per-episode (each episode has its
//! own n-by-n adjacency); everything else runs on the full row batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};
use crate::graph::{
    attention_mean_adjacency, gnn_forward, sample_adjacency, sparsify_topk, AttentionParams, GnnParams, GraphMode,
};
use crate::nn::{Activation, Linear};
use crate::tensor::Tensor;
use crate::value::{AgentQParams, MixerParams};
use crate::vme::{encode_posterior, kl_to_prior, sample_message, BvmeConfig, BvmePrior, Coupling, SampleMode, VmeHeads};

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bvme,
    GacgPlain,
    DicgDense,
    QmixNograph,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bvme => "bvme",
            Method::GacgPlain => "gacg_plain",
            Method::DicgDense => "dicg_dense",
            Method::QmixNograph => "qmix_nograph",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "bvme" => Ok(Method::Bvme),
            "gacg_plain" => Ok(Method::GacgPlain),
            "dicg_dense" => Ok(Method::DicgDense),
            "qmix_nograph" => Ok(Method::QmixNograph),
            other => Err(BvmeError::Config(format!(
                "unknown method '{other}' (expected bvme, gacg_plain, dicg_dense, or qmix_nograph)"
            ))),
        }
    }

    pub fn uses_graph(&self) -> bool {
        !matches!(self, Method::QmixNograph)
    }

    pub fn uses_vme(&self) -> bool {
        matches!(self, Method::Bvme)
    }
}

/// Width and structural settings for one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_agents: usize,
    pub n_actions: usize,
    pub d_obs: usize,
    pub d_state: usize,
    /// Message width; every inter-agent tensor has this many columns.
    pub d_msg: usize,
    /// Hidden widths of the message-passing layers; the final layer always
    /// projects back to d_msg.
    pub gnn_hidden: Vec<usize>,
    pub agent_hidden: usize,
    pub mixer_embed: usize,
    pub attn_dk: usize,
    /// Non-self neighbors kept per row in learned graph mode; clamped to
    /// n_agents - 1.
    pub topk: usize,
    pub edge_std_init: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 || self.n_actions < 2 || self.d_obs < 1 || self.d_state < 1 {
            return Err(BvmeError::Config(format!("degenerate dims: {self:?}")));
        }
        if self.d_msg < 1 || self.agent_hidden < 1 || self.mixer_embed < 1 || self.attn_dk < 1 {
            return Err(BvmeError::Config(format!("zero-width component: {self:?}")));
        }
        if self.edge_std_init <= 0.0 {
            return Err(BvmeError::Config(format!("edge_std_init must be positive, got {}", self.edge_std_init)));
        }
        Ok(())
    }

    /// Effective top-k for this agent count (contract range 1..=n-1).
    pub fn effective_topk(&self) -> usize {
        self.topk.clamp(1, self.n_agents.saturating_sub(1).max(1))
    }
}

/// Message width under bandwidth ratio r: `max(1, round(r * d_obs))`.
pub fn message_width(r: f64, d_obs: usize) -> usize {
    ((r * d_obs as f64).round() as usize).max(1)
}

/// Feature encoder, attention, and message-passing layers (absent for the
/// no-communication method).
#[derive(Debug, Clone)]
pub struct CommStack {
    pub feature_enc: Linear,
    pub attn: AttentionParams,
    pub gnn: GnnParams,
}

/// One method's complete parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub dims: ModelDims,
    pub bvme: BvmeConfig,
    /// Forces the adjacency backbone regardless of method (dense-vs-sparse
    /// comparisons); None derives it from the method.
    pub graph_override: Option<GraphMode>,
    pub comm: Option<CommStack>,
    pub vme: Option<VmeHeads>,
    pub agent: AgentQParams,
    pub mixer: MixerParams,
}

/// Messages and diagnostics produced by one communication step.
pub struct CommOutput {
    /// What each agent's Q-network receives, [R, d_msg].
    pub z: Tensor,
    /// Per-row KL against the prior, [R]; present only with posterior heads.
    pub kl_rows: Option<Tensor>,
    /// Clamped log variances, [R, d_msg]; present only with posterior heads.
    pub log_var: Option<Tensor>,
}

impl Model {
    pub fn init(rng: &mut ChaCha8Rng, method: Method, dims: ModelDims, bvme: BvmeConfig) -> Result<Model> {
        dims.validate()?;
        bvme.validate()?;
        if method.uses_graph() && dims.n_agents < 2 {
            return Err(BvmeError::Config(format!("{} needs n_agents >= 2", method.as_str())));
        }
        let comm = if method.uses_graph() {
            let mut gnn_dims = vec![dims.d_msg];
            gnn_dims.extend(&dims.gnn_hidden);
            gnn_dims.push(dims.d_msg);
            Some(CommStack {
                feature_enc: Linear::init(rng, dims.d_obs, dims.d_msg, true, Activation::Relu),
                attn: AttentionParams::init(rng, dims.d_msg, dims.attn_dk, dims.edge_std_init),
                gnn: GnnParams::init(rng, &gnn_dims)?,
            })
        } else {
            None
        };
        let vme = if method.uses_vme() { Some(VmeHeads::init(rng, dims.d_msg)) } else { None };
        let agent = AgentQParams::init(rng, dims.d_obs, dims.d_msg, dims.agent_hidden, dims.n_actions);
        let mixer = MixerParams::init(rng, dims.n_agents, dims.d_state, dims.mixer_embed);
        Ok(Model { method, dims, bvme, graph_override: None, comm, vme, agent, mixer })
    }

    /// Dense softmax backbone for `dicg_dense`, learned-noise backbone
    /// otherwise, unless overridden.
    pub fn graph_mode(&self) -> GraphMode {
        if let Some(mode) = self.graph_override {
            return mode;
        }
        match self.method {
            Method::DicgDense => GraphMode::Dense,
            _ => GraphMode::Learned,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(String, Tensor)>, prefix: &str, l: &Linear| {
            out.push((format!("{prefix}.w"), l.w.clone()));
            if let Some(b) = &l.b {
                out.push((format!("{prefix}.b"), b.clone()));
            }
        };
        if let Some(c) = &self.comm {
            lin(&mut out, "enc", &c.feature_enc);
            lin(&mut out, "attn.query", &c.attn.w_query);
            lin(&mut out, "attn.key", &c.attn.w_key);
            out.push(("attn.edge_log_std".into(), c.attn.edge_log_std.clone()));
            for (i, layer) in c.gnn.layers.iter().enumerate() {
                lin(&mut out, &format!("gnn.{i}"), layer);
            }
        }
        if let Some(v) = &self.vme {
            lin(&mut out, "vme.mu", &v.enc_mu);
            lin(&mut out, "vme.sigma", &v.enc_sigma);
        }
        lin(&mut out, "agent.input", &self.agent.input);
        let g = &self.agent.gru;
        for (name, t) in [
            ("agent.gru.w_z", &g.w_z),
            ("agent.gru.u_z", &g.u_z),
            ("agent.gru.b_z", &g.b_z),
            ("agent.gru.w_r", &g.w_r),
            ("agent.gru.u_r", &g.u_r),
            ("agent.gru.b_r", &g.b_r),
            ("agent.gru.w_h", &g.w_h),
            ("agent.gru.u_h", &g.u_h),
            ("agent.gru.b_h", &g.b_h),
        ] {
            out.push((name.into(), t.clone()));
        }
        lin(&mut out, "agent.output", &self.agent.output);
        lin(&mut out, "mixer.w1", &self.mixer.hyper_w1);
        lin(&mut out, "mixer.b1", &self.mixer.hyper_b1);
        lin(&mut out, "mixer.w2", &self.mixer.hyper_w2);
        lin(&mut out, "mixer.b2_hidden", &self.mixer.hyper_b2_hidden);
        lin(&mut out, "mixer.b2_out", &self.mixer.hyper_b2_out);
        out
    }

    /// Parameters of the log-variance head (empty without posterior heads).
    pub fn sigma_head_params(&self) -> Vec<Tensor> {
        self.vme.as_ref().map(|v| v.enc_sigma.params()).unwrap_or_default()
    }

    /// Fresh deep copy with identical parameter values (for the target net).
    pub fn deep_copy(&self) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut copy = Model::init(&mut rng, self.method, self.dims.clone(), self.bvme).expect("dims already validated");
        copy.graph_override = self.graph_override;
        copy.copy_params_from(self);
        copy
    }

    /// Copies every parameter value from `src` (same method and dims).
    pub fn copy_params_from(&self, src: &Model) {
        let dst = self.params();
        let from = src.params();
        assert_eq!(dst.len(), from.len(), "parameter lists diverge");
        for (d, s) in dst.iter().zip(&from) {
            d.set_values(&s.to_vec()).expect("shapes match by construction");
        }
    }

    /// Runs encoder, graph, message passing, and (when present) the
    /// posterior heads for one timestep.
    ///
    /// `obs` is [episodes * n_agents, d_obs], rows grouped by episode.
    /// `sampled = true` is the training pass (sampled adjacency in learned
    /// mode, message realization per the coupling and sample-mode settings);
    /// `sampled = false` is full mean mode for evaluation and target
    /// forwards. KL rows are produced whenever posterior heads exist.
    pub fn comm_forward(&self, obs: &Tensor, episodes: usize, sampled: bool, rng: &mut ChaCha8Rng) -> Result<CommOutput> {
        let n = self.dims.n_agents;
        let shape = obs.shape();
        if shape.len() != 2 || shape[0] != episodes * n || shape[1] != self.dims.d_obs {
            return Err(BvmeError::dimension(
                "comm_forward",
                format!("expected [{} * {n}, {}], got {shape:?}", episodes, self.dims.d_obs),
            ));
        }
        let comm = match &self.comm {
            None => {
                return Ok(CommOutput {
                    z: Tensor::zeros(&[episodes * n, self.dims.d_msg]),
                    kl_rows: None,
                    log_var: None,
                });
            }
            Some(c) => c,
        };

        let x = comm.feature_enc.forward(obs)?;
        let mode = self.graph_mode();
        let mut per_episode = Vec::with_capacity(episodes);
        for b in 0..episodes {
            let xb = x.slice(0, b * n, (b + 1) * n)?;
            let mut g = attention_mean_adjacency(&xb, &comm.attn, mode)?;
            if mode == GraphMode::Learned && n > 2 {
                g = sparsify_topk(&g, self.dims.effective_topk(), Some(&comm.attn))?;
            }
            let adj = if sampled && mode == GraphMode::Learned {
                sample_adjacency(&g, rng)?
            } else {
                g.mu.clone()
            };
            per_episode.push(gnn_forward(&adj, &xb, &comm.gnn)?);
        }
        let refs: Vec<&Tensor> = per_episode.iter().collect();
        let m = if refs.len() == 1 { per_episode[0].clone() } else { Tensor::concat(&refs, 0)? };

        match &self.vme {
            None => Ok(CommOutput { z: m, kl_rows: None, log_var: None }),
            Some(heads) => {
                let post = encode_posterior(&m, heads, self.bvme.log_var_min, self.bvme.log_var_max)?;
                let z = if sampled && self.bvme.coupling == Coupling::OnPath && self.bvme.sample_mode == SampleMode::Stochastic
                {
                    sample_message(&post, SampleMode::Stochastic, rng)?
                } else {
                    post.mu.clone()
                };
                let kl = kl_to_prior(&post, BvmePrior::new(self.bvme.sigma0)?)?;
                Ok(CommOutput { z, kl_rows: Some(kl), log_var: Some(post.log_var.clone()) })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::no_grad;
    use crate::value::agent_q_forward;

    fn dims(n: usize) -> ModelDims {
        ModelDims {
            n_agents: n,
            n_actions: 3,
            d_obs: 4,
            d_state: 4 * n,
            d_msg: 4,
            gnn_hidden: vec![8],
            agent_hidden: 8,
            mixer_embed: 4,
            attn_dk: 4,
            topk: 1,
            edge_std_init: 0.1,
        }
    }

    #[test]
    fn method_parsing_round_trips() {
        for m in [Method::Bvme, Method::GacgPlain, Method::DicgDense, Method::QmixNograph] {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("vdn").is_err());
    }

    #[test]
    fn message_width_rounding() {
        assert_eq!(message_width(1.0, 4), 4);
        assert_eq!(message_width(0.30, 15), 5);
        assert_eq!(message_width(0.05, 15), 1);
        assert_eq!(message_width(0.01, 4), 1);
    }

    #[test]
    fn component_presence_tracks_method() {
        let mut rng = stream_rng(1, Stream::Init);
        let b = Model::init(&mut rng, Method::Bvme, dims(2), BvmeConfig::default()).unwrap();
        assert!(b.comm.is_some() && b.vme.is_some());
        let g = Model::init(&mut rng, Method::GacgPlain, dims(2), BvmeConfig::default()).unwrap();
        assert!(g.comm.is_some() && g.vme.is_none());
        let d = Model::init(&mut rng, Method::DicgDense, dims(2), BvmeConfig::default()).unwrap();
        assert!(d.comm.is_some() && d.vme.is_none());
        assert_eq!(d.graph_mode(), GraphMode::Dense);
        let q = Model::init(&mut rng, Method::QmixNograph, dims(2), BvmeConfig::default()).unwrap();
        assert!(q.comm.is_none() && q.vme.is_none());
    }

    #[test]
    fn named_params_are_unique_and_complete() {
        let mut rng = stream_rng(2, Stream::Init);
        let m = Model::init(&mut rng, Method::Bvme, dims(3), BvmeConfig::default()).unwrap();
        let named = m.named_params();
        let mut names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before, "duplicate parameter names");
        assert_eq!(named.len(), m.params().len());
    }

    #[test]
    fn deep_copy_matches_and_is_independent() {
        let mut rng = stream_rng(3, Stream::Init);
        let m = Model::init(&mut rng, Method::Bvme, dims(2), BvmeConfig::default()).unwrap();
        let t = m.deep_copy();
        let mv = m.params();
        let tv = t.params();
        for (a, b) in mv.iter().zip(&tv) {
            assert_eq!(a.to_vec(), b.to_vec());
            assert!(a.id() != b.id(), "deep copy must not alias storage");
        }
        // Mutating the original must not touch the copy.
        let w = &mv[0];
        let mut vals = w.to_vec();
        let orig = vals.clone();
        vals[0] += 1.0;
        w.set_values(&vals).unwrap();
        assert_eq!(tv[0].to_vec(), orig);
    }

    #[test]
    fn nograph_messages_are_zero() {
        let mut rng = stream_rng(4, Stream::Init);
        let m = Model::init(&mut rng, Method::QmixNograph, dims(2), BvmeConfig::default()).unwrap();
        let obs = Tensor::constant(&[4, 4], vec![0.3; 16]).unwrap();
        let mut srng = stream_rng(5, Stream::Sampling);
        let out = m.comm_forward(&obs, 2, true, &mut srng).unwrap();
        assert!(out.z.to_vec().iter().all(|v| *v == 0.0));
        assert!(out.kl_rows.is_none());
    }

    #[test]
    fn mean_mode_forward_is_deterministic_end_to_end() {
        let mut rng = stream_rng(6, Stream::Init);
        let m = Model::init(&mut rng, Method::Bvme, dims(2), BvmeConfig::default()).unwrap();
        let obs = Tensor::constant(&[2, 4], vec![0.1, 0.9, -0.3, 0.5, 0.2, -0.8, 0.4, 0.0]).unwrap();
        let h0 = Tensor::zeros(&[2, 8]);
        let run = || {
            no_grad(|| {
                let mut srng = stream_rng(7, Stream::Sampling);
                let out = m.comm_forward(&obs, 1, false, &mut srng).unwrap();
                let (q, _) = agent_q_forward(&m.agent, &obs, &out.z, &h0).unwrap();
                q.to_vec()
            })
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampled_bvme_messages_differ_from_mean() {
        let mut rng = stream_rng(8, Stream::Init);
        let m = Model::init(&mut rng, Method::Bvme, dims(2), BvmeConfig::default()).unwrap();
        let obs = Tensor::constant(&[2, 4], vec![0.4; 8]).unwrap();
        let mut srng = stream_rng(9, Stream::Sampling);
        let sampled = no_grad(|| m.comm_forward(&obs, 1, true, &mut srng).unwrap().z.to_vec());
        let mut srng2 = stream_rng(9, Stream::Sampling);
        let mean = no_grad(|| m.comm_forward(&obs, 1, false, &mut srng2).unwrap().z.to_vec());
        assert_ne!(sampled, mean);
    }

    #[test]
    fn off_path_forwards_the_mean_even_when_sampling() {
        // Dense backbone pins the adjacency to its softmax rows in both
        // passes, so any train/eval difference could only come from message
        // sampling; off-path must not sample.
        let mut rng = stream_rng(10, Stream::Init);
        let cfg = BvmeConfig { coupling: Coupling::OffPath, ..BvmeConfig::default() };
        let mut m = Model::init(&mut rng, Method::Bvme, dims(2), cfg).unwrap();
        m.graph_override = Some(GraphMode::Dense);
        let obs = Tensor::constant(&[2, 4], vec![0.4; 8]).unwrap();
        let mut srng = stream_rng(11, Stream::Sampling);
        let train = no_grad(|| m.comm_forward(&obs, 1, true, &mut srng).unwrap().z.to_vec());
        let mut srng2 = stream_rng(11, Stream::Sampling);
        let mean = no_grad(|| m.comm_forward(&obs, 1, false, &mut srng2).unwrap().z.to_vec());
        assert_eq!(train, mean);
    }

    #[test]
    fn vme_param_count_closed_form_across_widths() {
        let mut rng = stream_rng(12, Stream::Init);
        for r in [1.0, 0.30, 0.05] {
            let d_obs = 15;
            let d_msg = message_width(r, d_obs);
            let mut d = dims(3);
            d.d_obs = d_obs;
            d.d_state = 15;
            d.d_msg = d_msg;
            let m = Model::init(&mut rng, Method::Bvme, d, BvmeConfig::default()).unwrap();
            assert_eq!(m.vme.as_ref().unwrap().param_count(), 2 * (d_msg * d_msg + d_msg));
        }
    }
}
