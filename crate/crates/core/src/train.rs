//! Training driver: base training (DDPM, EDM, flow matching, multisample
//! flow), consistency distillation, reflow retraining and bespoke fitting.
//!
//! Every run draws from RNG streams derived from `(seed, method, purpose)`,
//! so a config and seed fully determine the resulting weights.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::forward_backward;
use crate::bespoke::{fit_bespoke, generate_trajectories, BespokeConfig, BespokeFit, BespokeWeights};
use crate::blob::Blob;
use crate::coupling::optimal_coupling;
use crate::error::{Error, Result};
use crate::models::{BoundRef, ConditionalModel, Head, ModelMeta, Parameterization, TrunkConfig};
use crate::objectives::{
    cd_loss, ddpm_loss, edm_loss, fm_loss, multisample_fm_loss, reflow_loss, reflow_pairs, sample_ddpm_steps,
    sample_flow_times, Batch, PairDataset, TeacherSolver,
};
use crate::params::{AdamConfig, ParamSet};
use crate::rng::{index, normal_tensor, stream, Rng};
use crate::schedules::{karras_sigma_grid, sample_sigma_lognormal, DdpmParams, EdmParams};
use crate::tensor::Tensor;
use crate::toydata::{generate, split, Dataset, DatasetKind, DatasetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddpm,
    Edm,
    Fm,
    Multiflow,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::Edm => "edm",
            Method::Fm => "fm",
            Method::Multiflow => "multiflow",
        }
    }

    /// RNG stream label. Flow matching and multisample flow share draws so
    /// that they differ only in the coupling.
    fn stream_tag(self) -> &'static str {
        match self {
            Method::Fm | Method::Multiflow => "flow",
            m => m.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Load a dataset written by `gen-data` instead of generating one.
    pub path: Option<PathBuf>,
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            kind: "two_gaussians".into(),
            n: 20_000,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            split_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            depth: 4,
            time_embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    /// Defaults to 16, or 64 for multisample flow.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub lr_decay_milestones: Vec<usize>,
    pub lr_decay_rate: f64,
    /// Recorded in the checkpoint; reflow warns when the base model's final
    /// loss exceeds it.
    pub convergence_threshold: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 8000,
            batch_size: None,
            lr: 1e-4,
            lr_decay_milestones: vec![800, 1600, 3200, 4800],
            lr_decay_rate: 0.5,
            convergence_threshold: None,
            log_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdSection {
    pub ema_mu: f64,
    pub grid_levels: usize,
    pub solver: TeacherSolver,
    pub window: usize,
    pub rise: f64,
}

impl Default for CdSection {
    fn default() -> Self {
        Self {
            ema_mu: 0.95,
            grid_levels: 18,
            solver: TeacherSolver::Euler,
            window: 500,
            rise: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowSection {
    pub steps: usize,
    pub n_pairs: usize,
}

impl Default for ReflowSection {
    fn default() -> Self {
        Self {
            steps: 100,
            n_pairs: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BespokeSection {
    pub n: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weights: BespokeWeights,
    pub n_train_trajectories: usize,
    pub n_val_trajectories: usize,
    pub dense_steps: usize,
}

impl Default for BespokeSection {
    fn default() -> Self {
        let b = BespokeConfig::default();
        Self {
            n: 5,
            iterations: b.iterations,
            lr: b.lr,
            weights: b.weights,
            n_train_trajectories: 256,
            n_val_trajectories: 256,
            dense_steps: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub ddpm: DdpmParams,
    pub edm: EdmParams,
    pub train: TrainSection,
    pub cd: CdSection,
    pub reflow: ReflowSection,
    pub bespoke: BespokeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Fm,
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            ddpm: DdpmParams::default(),
            edm: EdmParams::default(),
            train: TrainSection::default(),
            cd: CdSection::default(),
            reflow: ReflowSection::default(),
            bespoke: BespokeSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML config. Errors carry the line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}: ")
                })
                .unwrap_or_default();
            Error::invalid(format!("config {loc}{}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn batch_size(&self) -> usize {
        self.train.batch_size.unwrap_or(match self.method {
            Method::Multiflow => 64,
            _ => 16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.iterations < 1 {
            return Err(Error::invalid("train.iterations must be at least 1"));
        }
        if self.batch_size() < 1 {
            return Err(Error::invalid("train.batch_size must be at least 1"));
        }
        if self.train.lr_decay_milestones.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("train.lr_decay_milestones must increase strictly"));
        }
        if !(self.train.lr > 0.0) || !(self.train.lr_decay_rate > 0.0) {
            return Err(Error::invalid("learning rate and decay rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cd.ema_mu) || self.cd.window < 1 || self.cd.grid_levels < 2 {
            return Err(Error::invalid("cd: ema_mu in [0, 1], window >= 1, grid_levels >= 2"));
        }
        DatasetKind::from_name(&self.data.kind)?;
        Ok(())
    }

    pub fn trunk(&self, data: &Dataset) -> TrunkConfig {
        TrunkConfig {
            data_dim: data.y.cols(),
            cond_dim: data.cond.cols(),
            hidden_dim: self.model.hidden_dim,
            depth: self.model.depth,
            time_embed_dim: self.model.time_embed_dim,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            ..Default::default()
        }
    }
}

/// Learning rate in effect at `iteration` (0-based): halved (or scaled by
/// the decay rate) once per milestone already reached.
pub fn lr_at(train: &TrainSection, iteration: usize) -> f64 {
    let k = train.lr_decay_milestones.iter().filter(|&&m| m <= iteration).count();
    train.lr * train.lr_decay_rate.powi(k as i32)
}

/// Hex SHA-256 over length-prefixed parts.
pub fn content_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped { iteration: usize },
    Failed { iteration: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub method: String,
    pub config: RunConfig,
    pub input_hash: String,
    pub loss_curve: Vec<f64>,
    /// `(iteration, lr)` at the start and at every change.
    pub lr_changes: Vec<(usize, f64)>,
    pub status: RunStatus,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Present only when timing was requested, so manifests stay
    /// byte-identical across repeated runs otherwise.
    #[serde(default)]
    pub wall_clock_ms: Option<f64>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub milestone_checkpoints: Vec<String>,
}

impl RunManifest {
    fn new(stage: &str, method: &str, cfg: &RunConfig, input_hash: String) -> Self {
        Self {
            stage: stage.into(),
            method: method.into(),
            config: cfg.clone(),
            input_hash,
            loss_curve: Vec::new(),
            lr_changes: Vec::new(),
            status: RunStatus::Completed,
            warnings: Vec::new(),
            wall_clock_ms: None,
            checkpoint: None,
            milestone_checkpoints: Vec::new(),
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed { .. })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Train/eval/test splits of the configured dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
    /// Hash of the full dataset contents.
    pub hash: String,
}

pub fn load_data(cfg: &DataSection) -> Result<Splits> {
    let data = match &cfg.path {
        Some(p) => Dataset::from_blob(Blob::read(p)?)?,
        None => generate(&DatasetSpec {
            kind: DatasetKind::from_name(&cfg.kind)?,
            n: cfg.n,
            seed: cfg.seed,
        })?,
    };
    let hash = content_hash(&[&data.to_blob()?.to_bytes()?]);
    let [train, eval, test] = split(&data, cfg.split, cfg.split_seed)?;
    Ok(Splits { train, eval, test, hash })
}

/// Root-mean per-coordinate standard deviation of the data.
pub fn estimate_sigma_data(y: &Tensor) -> Result<f64> {
    let (n, d) = y.dims2("sigma_data")?;
    if n < 2 {
        return Err(Error::invalid("need at least two samples to estimate sigma_data"));
    }
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| y.row(i)[j]).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (y.row(i)[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    Ok((total / d as f64).sqrt())
}

fn draw_rows(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| index(rng, n)).collect()
}

/// Mean of the last (up to) 100 losses.
fn tail_mean(losses: &[f64]) -> Option<f64> {
    let tail = &losses[losses.len().saturating_sub(100)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

const MAX_NON_FINITE: usize = 3;

/// Shared optimisation loop. `step` returns the loss and gradients for one
/// iteration; three consecutive non-finite losses abort the run.
struct Loop<'a> {
    train: &'a TrainSection,
    adam: AdamConfig,
    manifest: RunManifest,
    non_finite: usize,
    milestones: Vec<(usize, ParamSet)>,
}

enum StepOutcome {
    Continue,
    Abort,
}

impl<'a> Loop<'a> {
    fn new(train: &'a TrainSection, adam: AdamConfig, manifest: RunManifest) -> Self {
        Self {
            train,
            adam,
            manifest,
            non_finite: 0,
            milestones: Vec::new(),
        }
    }

    fn step(
        &mut self,
        it: usize,
        params: &mut ParamSet,
        result: Result<(f64, crate::params::Grads)>,
    ) -> Result<StepOutcome> {
        let lr = lr_at(self.train, it);
        if self.manifest.lr_changes.last().is_none_or(|&(_, l)| l != lr) {
            self.manifest.lr_changes.push((it, lr));
        }
        let failure = match result {
            Ok((loss, grads)) => match params.adam_step(&grads, &AdamConfig { lr, ..self.adam }) {
                Ok(()) => {
                    self.non_finite = 0;
                    self.manifest.loss_curve.push(loss);
                    if self.train.log_every > 0 && it % self.train.log_every == 0 {
                        log::info!("{} iter {it}: loss {loss:.5} lr {lr:.2e}", self.manifest.method);
                    }
                    None
                }
                Err(Error::NonFinite { op }) => Some(op),
                Err(e) => return Err(e),
            },
            Err(Error::NonFinite { op }) => Some(op),
            Err(e) => return Err(e),
        };
        if let Some(op) = failure {
            self.non_finite += 1;
            self.manifest.loss_curve.push(f64::NAN);
            log::warn!("{} iter {it}: non-finite value from {op}", self.manifest.method);
            if self.non_finite >= MAX_NON_FINITE {
                self.manifest.status = RunStatus::Failed {
                    iteration: it,
                    reason: format!("{MAX_NON_FINITE} consecutive non-finite steps (last from {op})"),
                };
                return Ok(StepOutcome::Abort);
            }
        }
        if self.train.lr_decay_milestones.contains(&(it + 1)) {
            self.milestones.push((it + 1, params.clone()));
        }
        Ok(StepOutcome::Continue)
    }
}

/// Result of a training stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConditionalModel,
    pub manifest: RunManifest,
    /// Parameter snapshots taken when each LR milestone was reached.
    pub milestones: Vec<(usize, ConditionalModel)>,
}

fn finish(model: ConditionalModel, lp: Loop<'_>, threshold: Option<f64>) -> TrainOutcome {
    let mut model = model;
    let finite: Vec<f64> = lp.manifest.loss_curve.iter().copied().filter(|l| l.is_finite()).collect();
    model.meta = ModelMeta {
        final_loss: tail_mean(&finite),
        convergence_threshold: threshold,
    };
    let milestones = lp
        .milestones
        .into_iter()
        .map(|(it, params)| {
            let mut m = model.clone();
            m.params = params;
            (it, m)
        })
        .collect();
    TrainOutcome {
        model,
        manifest: lp.manifest,
        milestones,
    }
}

fn parameterization(cfg: &RunConfig, data: &Dataset) -> Result<Parameterization> {
    Ok(match cfg.method {
        Method::Ddpm => Parameterization::Ddpm(cfg.ddpm),
        Method::Edm => Parameterization::Edm {
            edm: cfg.edm,
            sigma_data: match cfg.edm.sigma_data {
                Some(s) => s,
                None => estimate_sigma_data(&data.y)?,
            },
        },
        Method::Fm | Method::Multiflow => Parameterization::Flow,
    })
}

/// Base training for DDPM, EDM, flow matching and multisample flow.
pub fn train(cfg: &RunConfig, data: &Dataset, input_hash: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    let method = cfg.method.name();
    let param = parameterization(cfg, data)?;
    let mut model = ConditionalModel::new(method, cfg.trunk(data), param, &mut stream(cfg.seed, &[cfg.method.stream_tag(), "init"]))?;
    let schedule = model.ddpm_schedule().ok();
    let sigma_data = model.edm_params().map(|(_, s)| s);
    let mut rng = stream(cfg.seed, &[cfg.method.stream_tag(), "batches"]);
    let b = cfg.batch_size();
    let mut lp = Loop::new(&cfg.train, cfg.adam(), RunManifest::new("train", method, cfg, input_hash.into()));
    for it in 0..cfg.train.iterations {
        let idx = draw_rows(&mut rng, data.len(), b);
        let y = data.y.gather_rows(&idx);
        let eps = normal_tensor(&mut rng, y.shape());
        let times = match cfg.method {
            Method::Ddpm => sample_ddpm_steps(&mut rng, b, cfg.ddpm.steps),
            Method::Edm => (0..b)
                .map(|_| sample_sigma_lognormal(&mut rng, cfg.edm.p_mean, cfg.edm.p_std))
                .collect(),
            Method::Fm | Method::Multiflow => sample_flow_times(&mut rng, b),
        };
        let batch = Batch {
            y,
            cond: data.cond.gather_rows(&idx),
            eps,
            times,
        };
        let coupling = match cfg.method {
            Method::Multiflow => Some(optimal_coupling(&batch.y, &batch.eps)?),
            _ => None,
        };
        let result = forward_backward(&model.params, |tape, vars| {
            let net = BoundRef { model: &model, vars };
            match cfg.method {
                Method::Ddpm => ddpm_loss(tape, &net, schedule.as_ref().expect("ddpm schedule"), &batch),
                Method::Edm => edm_loss(tape, &net, sigma_data.expect("edm sigma_data"), &batch),
                Method::Fm => fm_loss(tape, &net, &batch),
                Method::Multiflow => multisample_fm_loss(tape, &net, &batch, coupling.as_ref().expect("coupling")),
            }
        });
        if let StepOutcome::Abort = lp.step(it, &mut model.params, result)? {
            break;
        }
    }
    Ok(finish(model, lp, cfg.train.convergence_threshold))
}

/// Stops consistency distillation when the mean loss over a window of
/// iterations exceeds the best earlier window mean by more than `rise`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    window: usize,
    rise: f64,
    sum: f64,
    count: usize,
    best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Continue,
    /// A window just closed with the lowest mean so far.
    NewBest,
    Stop,
}

impl EarlyStopper {
    pub fn new(window: usize, rise: f64) -> Self {
        Self {
            window: window.max(1),
            rise,
            sum: 0.0,
            count: 0,
            best: f64::INFINITY,
        }
    }

    pub fn push(&mut self, loss: f64) -> StopSignal {
        self.sum += loss;
        self.count += 1;
        if self.count < self.window {
            return StopSignal::Continue;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        if mean < self.best {
            self.best = mean;
            StopSignal::NewBest
        } else if mean > self.rise * self.best {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

/// Consistency distillation from an EDM teacher. The student starts from
/// the teacher's weights under the boundary-respecting parameterization;
/// the returned model carries the EMA weights (the best window's snapshot
/// when early stopping fires).
pub fn distill_cd(teacher: &ConditionalModel, cfg: &RunConfig, data: &Dataset, input_hash: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    teacher.expect_head(Head::EdmDenoiser)?;
    let (edm, sigma_data) = teacher.edm_params().expect("edm head has edm params");
    if teacher.is_consistency() {
        return Err(Error::invalid("the teacher must be an EDM denoiser, not a consistency model"));
    }
    let mut student = teacher.clone();
    student.method = "cd".into();
    student.param = Parameterization::Consistency { edm, sigma_data };
    student.params = teacher.params.values_only();
    let mut ema = student.clone();
    let grid = karras_sigma_grid(cfg.cd.grid_levels, edm.sigma_min, edm.sigma_max, edm.rho)?;
    let mut rng = stream(cfg.seed, &["cd", "batches"]);
    let b = cfg.batch_size();
    let mut stopper = EarlyStopper::new(cfg.cd.window, cfg.cd.rise);
    let mut best: Option<ParamSet> = None;
    let mut lp = Loop::new(&cfg.train, cfg.adam(), RunManifest::new("distill", "cd", cfg, input_hash.into()));
    for it in 0..cfg.train.iterations {
        let idx = draw_rows(&mut rng, data.len(), b);
        let y = data.y.gather_rows(&idx);
        let eps = normal_tensor(&mut rng, y.shape());
        let levels: Vec<usize> = (0..b).map(|_| index(&mut rng, grid.len() - 1)).collect();
        let batch = Batch {
            y,
            cond: data.cond.gather_rows(&idx),
            eps,
            times: vec![0.0; b],
        };
        let result = forward_backward(&student.params, |tape, vars| {
            let s = BoundRef { model: &student, vars };
            let e = ema.bind(tape, false);
            let t = teacher.bind(tape, false);
            cd_loss(tape, &s, &e, &t, &batch, &grid, &levels, cfg.cd.solver)
        });
        let loss = result.as_ref().map(|(l, _)| *l).unwrap_or(f64::NAN);
        if let StepOutcome::Abort = lp.step(it, &mut student.params, result)? {
            break;
        }
        ema.params.ema_update(&student.params, cfg.cd.ema_mu)?;
        if !loss.is_finite() {
            continue;
        }
        match stopper.push(loss) {
            StopSignal::Continue => {}
            StopSignal::NewBest => best = Some(ema.params.values_only()),
            StopSignal::Stop => {
                log::info!("cd: early stop at iteration {it}");
                lp.manifest.status = RunStatus::EarlyStopped { iteration: it };
                if let Some(p) = best.take() {
                    ema.params = p;
                }
                break;
            }
        }
    }
    Ok(finish(ema, lp, cfg.train.convergence_threshold))
}

/// Reflow output: the retrained model and the pairs it was trained on.
#[derive(Debug, Clone)]
pub struct ReflowOutcome {
    pub outcome: TrainOutcome,
    pub pairs: PairDataset,
}

/// Generate pairs from `base` and train a fresh flow model on them.
pub fn reflow_retrain(base: &ConditionalModel, cfg: &RunConfig, data: &Dataset, input_hash: &str) -> Result<ReflowOutcome> {
    cfg.validate()?;
    base.expect_head(Head::VectorField)?;
    let pairs = reflow_pairs(
        base,
        &data.cond,
        cfg.reflow.n_pairs,
        cfg.reflow.steps,
        &mut stream(cfg.seed, &["reflow", "pairs"]),
    )?;
    let mut model = ConditionalModel::new("reflow", base.config, Parameterization::Flow, &mut stream(cfg.seed, &["reflow", "init"]))?;
    let mut rng = stream(cfg.seed, &["reflow", "batches"]);
    let b = cfg.train.batch_size.unwrap_or(16);
    let mut manifest = RunManifest::new("reflow", "reflow", cfg, input_hash.into());
    manifest.warnings.extend(pairs.warning.clone());
    let mut lp = Loop::new(&cfg.train, cfg.adam(), manifest);
    for it in 0..cfg.train.iterations {
        let idx = draw_rows(&mut rng, pairs.len(), b);
        let times = sample_flow_times(&mut rng, b);
        let batch = pairs.batch(&idx, times);
        let result = forward_backward(&model.params, |tape, vars| {
            reflow_loss(tape, &BoundRef { model: &model, vars }, &batch)
        });
        if let StepOutcome::Abort = lp.step(it, &mut model.params, result)? {
            break;
        }
    }
    Ok(ReflowOutcome {
        outcome: finish(model, lp, cfg.train.convergence_threshold),
        pairs,
    })
}

#[derive(Debug, Clone)]
pub struct BespokeOutcome {
    pub fit: BespokeFit,
    pub manifest: RunManifest,
}

/// Fit an `n`-step bespoke transform for a frozen flow model.
pub fn fit_bespoke_run(base: &ConditionalModel, cfg: &RunConfig, data: &Dataset, input_hash: &str) -> Result<BespokeOutcome> {
    cfg.validate()?;
    base.expect_head(Head::VectorField)?;
    let bs = &cfg.bespoke;
    let mut rng = stream(cfg.seed, &["bespoke", "trajectories"]);
    let train = generate_trajectories(base, &data.cond, bs.n_train_trajectories, bs.dense_steps, &mut rng)?;
    let val = generate_trajectories(base, &data.cond, bs.n_val_trajectories, bs.dense_steps, &mut rng)?;
    let fit = fit_bespoke(
        base,
        &train,
        &val,
        &BespokeConfig {
            n: bs.n,
            iterations: bs.iterations,
            lr: bs.lr,
            weights: bs.weights,
        },
    )?;
    let mut manifest = RunManifest::new("fit_bespoke", "bespoke", cfg, input_hash.into());
    manifest.loss_curve = fit.loss_curve.clone();
    manifest.lr_changes = vec![(0, bs.lr)];
    Ok(BespokeOutcome { fit, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method, iterations: usize) -> RunConfig {
        let mut c = RunConfig {
            method,
            seed: 3,
            ..Default::default()
        };
        c.data.n = 500;
        c.model = ModelSection { hidden_dim: 16, depth: 2, time_embed_dim: 8 };
        c.train.iterations = iterations;
        c.train.lr = 1e-3;
        c.train.lr_decay_milestones = vec![10, 20];
        c
    }

    #[test]
    fn lr_schedule_from_milestones() {
        let t = TrainSection {
            lr: 1.0,
            lr_decay_milestones: vec![800, 1600, 3200, 4800],
            ..Default::default()
        };
        assert_eq!(lr_at(&t, 0), 1.0);
        assert_eq!(lr_at(&t, 799), 1.0);
        assert_eq!(lr_at(&t, 800), 0.5);
        assert_eq!(lr_at(&t, 3199), 0.25);
        assert_eq!(lr_at(&t, 10_000), 0.0625);
    }

    #[test]
    fn config_parsing() {
        let c = RunConfig::from_toml("method = \"edm\"\n[train]\niterations = 10\n").unwrap();
        assert_eq!(c.method, Method::Edm);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.lr_decay_milestones, vec![800, 1600, 3200, 4800]);
        let err = RunConfig::from_toml("method = \"fm\"\n\n[train]\niterations = \"x\"\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(RunConfig::from_toml("[train]\nlr_decay_milestones = [5, 3]\n").is_err());
        assert!(RunConfig::from_toml("[train]\niterations = 0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert_eq!(RunConfig::default().batch_size(), 16);
        assert_eq!(RunConfig { method: Method::Multiflow, ..Default::default() }.batch_size(), 64);
    }

    #[test]
    fn training_is_deterministic_and_logs_lr() {
        let cfg = small(Method::Fm, 30);
        let data = load_data(&cfg.data).unwrap();
        let a = train(&cfg, &data.train, &data.hash).unwrap();
        let b = train(&cfg, &data.train, &data.hash).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.lr_changes, vec![(0, 1e-3), (10, 5e-4), (20, 2.5e-4)]);
        assert_eq!(a.milestones.len(), 2);
        assert_eq!(a.manifest.loss_curve.len(), 30);
    }

    #[test]
    fn multiflow_batch_of_one_matches_fm() {
        let mut fm = small(Method::Fm, 20);
        fm.train.batch_size = Some(1);
        let mut mf = fm.clone();
        mf.method = Method::Multiflow;
        let data = load_data(&fm.data).unwrap();
        let a = train(&fm, &data.train, "").unwrap();
        let b = train(&mf, &data.train, "").unwrap();
        assert_eq!(a.manifest.loss_curve, b.manifest.loss_curve);
    }

    #[test]
    fn non_finite_losses_abort_the_run() {
        let mut cfg = small(Method::Fm, 20);
        cfg.train.lr = 1e300;
        let data = load_data(&cfg.data).unwrap();
        let out = train(&cfg, &data.train, "").unwrap();
        assert!(out.manifest.failed(), "{:?}", out.manifest.status);
    }

    #[test]
    fn early_stopper_fires_on_injected_spike() {
        let mut s = EarlyStopper::new(10, 1.2);
        let mut signals = Vec::new();
        for i in 0..30 {
            signals.push(s.push(1.0 - i as f64 * 0.001));
        }
        assert!(signals.iter().all(|&x| x != StopSignal::Stop));
        // A flat continuation does not fire.
        for _ in 0..10 {
            assert_ne!(s.push(0.98), StopSignal::Stop);
        }
        let mut last = StopSignal::Continue;
        for _ in 0..10 {
            last = s.push(5.0);
        }
        assert_eq!(last, StopSignal::Stop);
    }

    #[test]
    fn distill_requires_edm_teacher() {
        let cfg = small(Method::Fm, 2);
        let data = load_data(&cfg.data).unwrap();
        let fm = train(&cfg, &data.train, "").unwrap().model;
        assert!(matches!(distill_cd(&fm, &cfg, &data.train, ""), Err(Error::WrongHead { .. })));
        assert!(reflow_retrain(&train(&small(Method::Edm, 2), &data.train, "").unwrap().model, &cfg, &data.train, "").is_err());
    }

    #[test]
    fn distilled_model_keeps_boundary_identity() {
        let mut cfg = small(Method::Edm, 5);
        cfg.cd.window = 2;
        let data = load_data(&cfg.data).unwrap();
        let teacher = train(&cfg, &data.train, "").unwrap().model;
        let out = distill_cd(&teacher, &cfg, &data.train, "").unwrap();
        let x = data.test.y.gather_rows(&[0, 1, 2]);
        let c = data.test.cond.gather_rows(&[0, 1, 2]);
        let d = out.model.denoise(&x, cfg.edm.sigma_min, &c).unwrap();
        for (a, b) in d.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
