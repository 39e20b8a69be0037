//! Shared builders for the criterion benches.

use bvme_core::model::{Method, ModelDims};
use bvme_core::runtime::{RunState, TrainConfig};
use bvme_core::vme::BvmeConfig;
use bvme_core::env::{make_env, EnvConfig};

/// A small gather-game run with the buffer already filled past one batch.
pub fn warmed_gather_run(method: Method) -> (RunState, Box<dyn bvme_core::env::Environment>) {
    let mut env = make_env(&EnvConfig::gather(2)).expect("gather env");
    let spec = env.spec().clone();
    let dims = ModelDims {
        n_agents: spec.n_agents,
        n_actions: spec.n_actions,
        d_obs: spec.d_obs,
        d_state: spec.d_state,
        d_msg: spec.d_obs,
        gnn_hidden: vec![32],
        agent_hidden: 32,
        mixer_embed: 16,
        attn_dk: 8,
        topk: 1,
        edge_std_init: 0.1,
    };
    let cfg = TrainConfig { batch_size: 8, buffer_capacity: 64, ..TrainConfig::default() };
    let mut run = RunState::new(99, method, dims, BvmeConfig::default(), cfg).expect("run state");
    while run.buffer.len() < run.cfg.batch_size {
        run.collect_episode(env.as_mut()).expect("episode");
    }
    (run, env)
}
