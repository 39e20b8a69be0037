//! Experiment configuration, multi-seed runs, learning-curve metrics, and
//! bandwidth sweeps.
//!
//! A config file is TOML with sections `env`, `method`, `bvme`, `model`,
//! `training`, and `sweep`; top-level keys name the run and set the
//! evaluation protocol. One experiment trains each seed sequentially,
//! streams per-iteration metrics to JSONL, and writes a self-describing
//! `result.json` whose stored curve reproduces the stored AUC on re-read.
//! Sweeps clone the base config along one axis, record per-cell failures
//! without aborting the rest, and emit a CSV summary keyed by axis value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{make_env, EnvConfig};
use crate::error::{BvmeError, Result};
use crate::graph::GraphMode;
use crate::metrics::{EvalRecord, MetricsWriter, TrainRecord};
use crate::model::{message_width, Method, ModelDims};
use crate::runtime::{RunState, TrainConfig};
use crate::vme::{BvmeConfig, Coupling};

/// Method choice plus its bandwidth setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSection {
    pub name: Method,
    /// Bandwidth ratio in (0, 1]; message width is max(1, round(r * d_obs)).
    #[serde(default = "d_r")]
    pub r: f64,
    /// Forces the adjacency backbone independently of the method.
    #[serde(default)]
    pub graph_mode: Option<GraphMode>,
}

fn d_r() -> f64 {
    1.0
}

/// Network width settings independent of the environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub gnn_hidden: Vec<usize>,
    pub agent_hidden: usize,
    pub mixer_embed: usize,
    pub attn_dk: usize,
    pub topk: usize,
    pub edge_std_init: f64,
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            gnn_hidden: vec![32],
            agent_hidden: 32,
            mixer_embed: 16,
            attn_dk: 8,
            topk: 1,
            edge_std_init: 0.1,
        }
    }
}

/// Value grids for the sweep axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub r_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub sigma0_values: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> SweepSection {
        SweepSection {
            r_values: vec![0.30, 0.10, 0.05],
            lambda_values: vec![0.5, 1.0, 2.0],
            sigma0_values: vec![0.005, 0.01, 0.02],
        }
    }
}

/// Everything one experiment needs. Parsed from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_total_steps")]
    pub total_env_steps: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every_steps: u64,
    #[serde(default = "d_eval_episodes")]
    pub eval_episodes: usize,
    pub env: EnvConfig,
    pub method: MethodSection,
    #[serde(default)]
    pub bvme: BvmeConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn d_total_steps() -> u64 {
    20_000
}
fn d_eval_every() -> u64 {
    2000
}
fn d_eval_episodes() -> usize {
    32
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| BvmeError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BvmeError::Config(format!("config read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(BvmeError::Config("experiment name must be a nonempty path-safe string".into()));
        }
        if self.seeds.is_empty() {
            return Err(BvmeError::Config("seeds list must be nonempty".into()));
        }
        if !(self.method.r > 0.0 && self.method.r <= 1.0) {
            return Err(BvmeError::Config(format!("bandwidth ratio r must lie in (0, 1], got {}", self.method.r)));
        }
        if self.eval_every_steps == 0 || self.eval_episodes == 0 {
            return Err(BvmeError::Config("evaluation cadence and episode count must be positive".into()));
        }
        if self.model.agent_hidden == 0
            || self.model.mixer_embed == 0
            || self.model.attn_dk == 0
            || self.model.topk == 0
            || self.model.gnn_hidden.iter().any(|w| *w == 0)
        {
            return Err(BvmeError::Config("model widths must be positive".into()));
        }
        if !(self.model.edge_std_init > 0.0) {
            return Err(BvmeError::Config("edge_std_init must be positive".into()));
        }
        // Sweep grid values are validated when each cell's config is built,
        // so a bad grid entry fails that cell alone.
        self.bvme.validate()?;
        self.training.validate()?;
        // Env construction performs its own name and size checks.
        make_env(&self.env).map(|_| ())
    }

    /// Settings that parse fine but have no effect for this method.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.method.name.uses_vme() && self.bvme.lambda_kl != 0.0 {
            out.push(format!(
                "method {} has no posterior heads; lambda_kl = {} is ignored",
                self.method.name.as_str(),
                self.bvme.lambda_kl
            ));
        }
        if self.method.name == Method::QmixNograph && self.method.graph_mode.is_some() {
            out.push("qmix_nograph builds no graph; graph_mode is ignored".into());
        }
        out
    }

    /// Model dimensions implied by the environment and the bandwidth ratio.
    pub fn dims(&self) -> Result<ModelDims> {
        let env = make_env(&self.env)?;
        let spec = env.spec();
        Ok(ModelDims {
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            d_obs: spec.d_obs,
            d_state: spec.d_state,
            d_msg: message_width(self.method.r, spec.d_obs),
            gnn_hidden: self.model.gnn_hidden.clone(),
            agent_hidden: self.model.agent_hidden,
            mixer_embed: self.model.mixer_embed,
            attn_dk: self.model.attn_dk,
            topk: self.model.topk,
            edge_std_init: self.model.edge_std_init,
        })
    }

    /// Fraction of message entries saved relative to the r = 0.30 reference.
    pub fn message_reduction(&self) -> f64 {
        (0.30 - self.method.r) / 0.30
    }
}

/// One aggregated curve point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CurvePoint {
    pub env_steps: u64,
    pub mean: f64,
    pub stderr: f64,
}

/// Success-rate curve with per-point standard error over seeds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<LearningCurve> {
        for pair in points.windows(2) {
            if pair[1].env_steps <= pair[0].env_steps {
                return Err(BvmeError::Contract(format!(
                    "curve steps must strictly increase: {} then {}",
                    pair[0].env_steps, pair[1].env_steps
                )));
            }
        }
        for p in &points {
            if !(0.0..=1.0).contains(&p.mean) || p.stderr < 0.0 || !p.mean.is_finite() {
                return Err(BvmeError::Contract(format!(
                    "curve values must lie in [0, 1] with nonnegative stderr, got ({}, {})",
                    p.mean, p.stderr
                )));
            }
        }
        Ok(LearningCurve { points })
    }

    /// Convenience constructor with zero standard errors.
    pub fn from_xy(xs: &[u64], ys: &[f64]) -> Result<LearningCurve> {
        if xs.len() != ys.len() {
            return Err(BvmeError::Contract("curve xs and ys lengths differ".into()));
        }
        Self::new(
            xs.iter()
                .zip(ys)
                .map(|(&x, &y)| CurvePoint { env_steps: x, mean: y, stderr: 0.0 })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.env_steps as f64).collect()
    }

    fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }
}

/// Trapezoidal area under the curve with env-steps normalized to [0, 1].
/// Needs at least two points.
pub fn compute_auc(curve: &LearningCurve) -> Result<f64> {
    if curve.len() < 2 {
        return Err(BvmeError::Contract(format!("AUC needs >= 2 curve points, got {}", curve.len())));
    }
    let xs = curve.xs();
    let ys = curve.ys();
    Ok(trapezoid_normalized(&xs, &ys))
}

fn trapezoid_normalized(xs: &[f64], ys: &[f64]) -> f64 {
    let span = xs[xs.len() - 1] - xs[0];
    let mut area = 0.0;
    for i in 0..xs.len() - 1 {
        let dt = (xs[i + 1] - xs[i]) / span;
        area += dt * (ys[i] + ys[i + 1]) / 2.0;
    }
    area
}

/// Step grid shared by both curves: the union of their points restricted to
/// the overlapping range. Errors when the ranges do not overlap in an
/// interval.
fn union_grid(a: &LearningCurve, b: &LearningCurve) -> Result<Vec<f64>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(BvmeError::Contract("curve comparison needs >= 2 points per curve".into()));
    }
    let (a_lo, a_hi) = (a.points[0].env_steps as f64, a.points[a.len() - 1].env_steps as f64);
    let (b_lo, b_hi) = (b.points[0].env_steps as f64, b.points[b.len() - 1].env_steps as f64);
    let lo = a_lo.max(b_lo);
    let hi = a_hi.min(b_hi);
    if !(hi > lo) {
        return Err(BvmeError::Contract(format!(
            "curve step ranges [{a_lo}, {a_hi}] and [{b_lo}, {b_hi}] do not overlap"
        )));
    }
    let mut grid: Vec<f64> = a
        .xs()
        .into_iter()
        .chain(b.xs())
        .filter(|x| (lo..=hi).contains(x))
        .chain([lo, hi])
        .collect();
    grid.sort_by(|p, q| p.partial_cmp(q).unwrap());
    grid.dedup();
    Ok(grid)
}

/// Linear interpolation on a strictly increasing grid; `x` must lie inside.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => ys[i],
        Err(i) => {
            let w = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            ys[i - 1] + w * (ys[i] - ys[i - 1])
        }
    }
}

fn resample(curve: &LearningCurve, grid: &[f64]) -> Vec<f64> {
    let xs = curve.xs();
    let ys = curve.ys();
    grid.iter().map(|&x| interp(&xs, &ys, x)).collect()
}

/// AUC(a) − AUC(b) after resampling both curves onto the union grid of
/// their overlapping step range. Exactly antisymmetric in its arguments.
pub fn compute_delta_auc(a: &LearningCurve, b: &LearningCurve) -> Result<f64> {
    let grid = union_grid(a, b)?;
    let ya = resample(a, &grid);
    let yb = resample(b, &grid);
    Ok(trapezoid_normalized(&grid, &ya) - trapezoid_normalized(&grid, &yb))
}

/// Signed trapezoidal integral of (high − low) over the common normalized
/// grid; crossing segments cancel rather than clip.
pub fn compute_drop_area(high: &LearningCurve, low: &LearningCurve) -> Result<f64> {
    let grid = union_grid(high, low)?;
    let yh = resample(high, &grid);
    let yl = resample(low, &grid);
    let diff: Vec<f64> = yh.iter().zip(&yl).map(|(h, l)| h - l).collect();
    Ok(trapezoid_normalized(&grid, &diff))
}

/// One seed's evaluation trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedPoint {
    pub env_steps: u64,
    pub success: f64,
    pub mean_return: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub points: Vec<SeedPoint>,
    pub final_success: f64,
    pub final_return: f64,
}

/// Everything a finished experiment reports. The raw curve is stored so the
/// AUC can be recomputed from the file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub method: Method,
    pub r: f64,
    pub graph_mode: Option<GraphMode>,
    pub lambda_kl: f64,
    pub sigma0: f64,
    pub coupling: Coupling,
    pub message_reduction: f64,
    pub total_env_steps: u64,
    pub eval_every_steps: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub curve: LearningCurve,
    /// None when the curve has a single point.
    pub auc: Option<f64>,
    pub auc_stderr: Option<f64>,
    pub per_seed_auc: Vec<Option<f64>>,
    pub final_success: f64,
    pub final_success_stderr: f64,
    pub seed_runs: Vec<SeedRun>,
}

impl ExperimentResult {
    pub fn load(path: &Path) -> Result<ExperimentResult> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BvmeError::Io(format!("result parse {}: {e}", path.display())))
    }
}

/// Sample standard error of the mean; 0 for fewer than two values.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Trains every seed of `cfg` sequentially and writes
/// `<outdir>/<name>/result.json` plus one metrics JSONL per seed.
pub fn run_experiment(cfg: &ExperimentConfig, outdir: &Path) -> Result<ExperimentResult> {
    cfg.validate()?;
    let dir = outdir.join(&cfg.name);
    std::fs::create_dir_all(&dir)?;

    let mut seed_runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seed_runs.push(run_seed(cfg, seed, &dir)?);
    }

    let grid: Vec<u64> = seed_runs[0].points.iter().map(|p| p.env_steps).collect();
    for run in &seed_runs {
        let g: Vec<u64> = run.points.iter().map(|p| p.env_steps).collect();
        if g != grid {
            return Err(BvmeError::Contract("seed runs produced different evaluation grids".into()));
        }
    }

    let mut points = Vec::with_capacity(grid.len());
    for (i, &x) in grid.iter().enumerate() {
        let vals: Vec<f64> = seed_runs.iter().map(|r| r.points[i].success).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        points.push(CurvePoint { env_steps: x, mean, stderr: standard_error(&vals) });
    }
    let curve = LearningCurve::new(points)?;

    let per_seed_auc: Vec<Option<f64>> = seed_runs
        .iter()
        .map(|r| {
            let xs: Vec<u64> = r.points.iter().map(|p| p.env_steps).collect();
            let ys: Vec<f64> = r.points.iter().map(|p| p.success).collect();
            LearningCurve::from_xy(&xs, &ys).ok().and_then(|c| compute_auc(&c).ok())
        })
        .collect();
    let auc = if curve.len() >= 2 { Some(compute_auc(&curve)?) } else { None };
    let seed_aucs: Vec<f64> = per_seed_auc.iter().flatten().copied().collect();
    let auc_stderr = if seed_aucs.len() == per_seed_auc.len() && !seed_aucs.is_empty() {
        Some(standard_error(&seed_aucs))
    } else {
        None
    };

    let finals: Vec<f64> = seed_runs.iter().map(|r| r.final_success).collect();
    let final_success = finals.iter().sum::<f64>() / finals.len() as f64;
    let final_success_stderr = standard_error(&finals);

    let result = ExperimentResult {
        name: cfg.name.clone(),
        method: cfg.method.name,
        r: cfg.method.r,
        graph_mode: cfg.method.graph_mode,
        lambda_kl: cfg.bvme.lambda_kl,
        sigma0: cfg.bvme.sigma0,
        coupling: cfg.bvme.coupling,
        message_reduction: cfg.message_reduction(),
        total_env_steps: cfg.total_env_steps,
        eval_every_steps: cfg.eval_every_steps,
        eval_episodes: cfg.eval_episodes,
        seeds: cfg.seeds.clone(),
        curve,
        auc,
        auc_stderr,
        per_seed_auc,
        final_success,
        final_success_stderr,
        seed_runs,
    };
    let text = serde_json::to_string_pretty(&result).map_err(|e| BvmeError::Io(format!("result serialize: {e}")))?;
    std::fs::write(dir.join("result.json"), text)?;
    Ok(result)
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedRun> {
    let mut env = make_env(&cfg.env)?;
    let dims = cfg.dims()?;
    let mut run = RunState::new(seed, cfg.method.name, dims, cfg.bvme, cfg.training.clone())?;
    if cfg.method.graph_mode.is_some() {
        run.model.graph_override = cfg.method.graph_mode;
        run.target.graph_override = cfg.method.graph_mode;
    }
    let run_id = format!("{}_s{}", cfg.name, seed);
    let mut writer = MetricsWriter::create(&dir.join(format!("seed_{seed}.jsonl")))?;

    let mut points = Vec::new();
    let mut acc = LossAccumulator::default();
    let record_eval = |run: &RunState, env: &mut dyn crate::env::Environment, at: u64, acc: &mut LossAccumulator, points: &mut Vec<SeedPoint>, writer: &mut MetricsWriter| -> Result<()> {
        let m = run.evaluate(env, cfg.eval_episodes, seed)?;
        let mut rec = EvalRecord::new(&run_id, at);
        rec.success_rate = m.success_rate;
        rec.mean_return = m.mean_return;
        let (td, bvme, kl) = acc.drain();
        rec.td = td;
        rec.bvme = bvme;
        rec.mean_kl = kl;
        writer.append(&rec)?;
        points.push(SeedPoint {
            env_steps: at,
            success: m.success_rate,
            mean_return: m.mean_return,
            mean_kl: m.mean_kl,
        });
        Ok(())
    };

    record_eval(&run, env.as_mut(), 0, &mut acc, &mut points, &mut writer)?;
    let mut next_eval = cfg.eval_every_steps;
    while run.env_steps < cfg.total_env_steps {
        run.collect_episode(env.as_mut())?;
        if run.episodes % cfg.training.train_every_episodes == 0 {
            match run.train_iteration() {
                Ok(stats) => {
                    writer.append(&TrainRecord {
                        kind: "train".into(),
                        run_id: run_id.clone(),
                        iteration: run.train_iterations,
                        env_steps: run.env_steps,
                        td: stats.td,
                        bvme: stats.bvme,
                        group: stats.group,
                        total: stats.total,
                        mean_kl: stats.mean_kl,
                        grad_norm_pre_clip: stats.grad.norm_pre_clip,
                        grad_norm_post_clip: stats.grad.norm_post_clip,
                    })?;
                    acc.push(stats.td, stats.bvme, stats.mean_kl);
                }
                Err(BvmeError::NotReady(_)) => {}
                Err(e) => return Err(e),
            }
        }
        run.maybe_update_target();
        while next_eval <= cfg.total_env_steps && run.env_steps >= next_eval {
            record_eval(&run, env.as_mut(), next_eval, &mut acc, &mut points, &mut writer)?;
            next_eval += cfg.eval_every_steps;
        }
    }
    if points.last().map(|p| p.env_steps) != Some(cfg.total_env_steps) && cfg.total_env_steps > 0 {
        record_eval(&run, env.as_mut(), cfg.total_env_steps, &mut acc, &mut points, &mut writer)?;
    }
    writer.flush()?;

    let last = points.last().expect("at least the initial evaluation");
    Ok(SeedRun {
        seed,
        final_success: last.success,
        final_return: last.mean_return,
        points,
    })
}

#[derive(Default)]
struct LossAccumulator {
    td: f64,
    bvme: f64,
    kl: f64,
    count: u64,
}

impl LossAccumulator {
    fn push(&mut self, td: f64, bvme: f64, kl: f64) {
        self.td += td;
        self.bvme += bvme;
        self.kl += kl;
        self.count += 1;
    }

    fn drain(&mut self) -> (f64, f64, f64) {
        let out = if self.count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let c = self.count as f64;
            (self.td / c, self.bvme / c, self.kl / c)
        };
        *self = LossAccumulator::default();
        out
    }
}

/// Sweepable configuration axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Bandwidth ratio values from `sweep.r_values`.
    R,
    /// Cartesian product of `sweep.lambda_values` and `sweep.sigma0_values`.
    KlGrid,
    /// Messages drawn through the sample vs detached to the mean.
    Coupling,
    /// Learned sparse adjacency vs dense softmax adjacency.
    Backbone,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "r" => Ok(SweepAxis::R),
            "kl_grid" => Ok(SweepAxis::KlGrid),
            "coupling" => Ok(SweepAxis::Coupling),
            "backbone" => Ok(SweepAxis::Backbone),
            other => Err(BvmeError::Config(format!(
                "unknown sweep axis '{other}' (valid: r, kl_grid, coupling, backbone)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::R => "r",
            SweepAxis::KlGrid => "kl_grid",
            SweepAxis::Coupling => "coupling",
            SweepAxis::Backbone => "backbone",
        }
    }
}

/// Axis instantiations of a base config, labeled by axis value.
pub fn sweep_cells(base: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut cells = Vec::new();
    match axis {
        SweepAxis::R => {
            if base.sweep.r_values.is_empty() {
                return Err(BvmeError::Config("sweep.r_values is empty".into()));
            }
            for &r in &base.sweep.r_values {
                let mut c = base.clone();
                c.method.r = r;
                c.name = format!("{}_r{r}", base.name);
                cells.push((format!("{r}"), c));
            }
        }
        SweepAxis::KlGrid => {
            if base.sweep.lambda_values.is_empty() || base.sweep.sigma0_values.is_empty() {
                return Err(BvmeError::Config("kl_grid sweep needs lambda_values and sigma0_values".into()));
            }
            for &lambda in &base.sweep.lambda_values {
                for &sigma0 in &base.sweep.sigma0_values {
                    let mut c = base.clone();
                    c.bvme.lambda_kl = lambda;
                    c.bvme.sigma0 = sigma0;
                    c.name = format!("{}_kl{lambda}_s{sigma0}", base.name);
                    cells.push((format!("{lambda}x{sigma0}"), c));
                }
            }
        }
        SweepAxis::Coupling => {
            for coupling in [Coupling::OnPath, Coupling::OffPath] {
                let mut c = base.clone();
                c.bvme.coupling = coupling;
                let label = match coupling {
                    Coupling::OnPath => "on_path",
                    Coupling::OffPath => "off_path",
                };
                c.name = format!("{}_{label}", base.name);
                cells.push((label.to_string(), c));
            }
        }
        SweepAxis::Backbone => {
            for mode in [GraphMode::Learned, GraphMode::Dense] {
                let mut c = base.clone();
                c.method.graph_mode = Some(mode);
                let label = match mode {
                    GraphMode::Learned => "learned",
                    GraphMode::Dense => "dense",
                };
                c.name = format!("{}_{label}", base.name);
                cells.push((label.to_string(), c));
            }
        }
    }
    Ok(cells)
}

/// One sweep cell's outcome; failures carry the error text instead of
/// aborting the remaining cells.
#[derive(Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub axis_value: String,
    pub name: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub result: Option<ExperimentResult>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub csv_path: PathBuf,
}

/// Runs every cell of the axis, writing per-cell results under `outdir` and
/// a summary CSV `sweep_<axis>.csv`. The first cell is the baseline column
/// for delta AUC.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, outdir: &Path) -> Result<SweepOutcome> {
    base.validate()?;
    let cells_cfg = sweep_cells(base, axis)?;
    std::fs::create_dir_all(outdir)?;

    let mut cells = Vec::with_capacity(cells_cfg.len());
    for (axis_value, cfg) in &cells_cfg {
        let cell = match run_experiment(cfg, outdir) {
            Ok(result) => SweepCell {
                axis_value: axis_value.clone(),
                name: cfg.name.clone(),
                error: None,
                result: Some(result),
            },
            Err(e) => SweepCell {
                axis_value: axis_value.clone(),
                name: cfg.name.clone(),
                error: Some(e.to_string()),
                result: None,
            },
        };
        cells.push(cell);
    }

    let baseline_curve = cells.first().and_then(|c| c.result.as_ref()).map(|r| r.curve.clone());
    let mut csv = String::from("axis_value,seed_count,auc,auc_stderr,final_success,delta_auc_vs_baseline");
    let with_reduction = axis == SweepAxis::R;
    if with_reduction {
        csv.push_str(",message_reduction");
    }
    csv.push('\n');
    for ((_, cfg), cell) in cells_cfg.iter().zip(&cells) {
        let mut fields = vec![cell.axis_value.clone(), cfg.seeds.len().to_string()];
        match &cell.result {
            Some(r) => {
                fields.push(opt_num(r.auc));
                fields.push(opt_num(r.auc_stderr));
                fields.push(format!("{}", r.final_success));
                let delta = match (&baseline_curve, &r.curve) {
                    (Some(base_curve), own) if own.len() >= 2 && base_curve.len() >= 2 => {
                        compute_delta_auc(own, base_curve).ok()
                    }
                    _ => None,
                };
                fields.push(opt_num(delta));
            }
            None => {
                let msg = cell.error.as_deref().unwrap_or("unknown").replace(',', ";");
                fields.push(format!("error: {msg}"));
                fields.push(String::new());
                fields.push(String::new());
                fields.push(String::new());
            }
        }
        if with_reduction {
            fields.push(format!("{}", cfg.message_reduction()));
        }
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let csv_path = outdir.join(format!("sweep_{}.csv", axis.as_str()));
    std::fs::write(&csv_path, csv)?;
    Ok(SweepOutcome { axis, cells, csv_path })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Loads every `result.json` beneath `dir` (one level of experiment
/// directories), sorted by experiment name.
pub fn collect_results(dir: &Path) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::new();
    if dir.join("result.json").is_file() {
        out.push(ExperimentResult::load(&dir.join("result.json"))?);
    }
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let candidate = path.join("result.json");
            if candidate.is_file() {
                out.push(ExperimentResult::load(&candidate)?);
            }
        }
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}
