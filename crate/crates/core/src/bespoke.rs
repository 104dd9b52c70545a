//! Bespoke solvers: a learned scale-time transform `r -> (t(r), s(r))` for a
//! pretrained flow, fitted so that `n` Euler steps in the transformed frame
//! track the model's own dense trajectories.
//!
//! Both `t` and `s` are piecewise linear between `n + 1` uniform knots
//! `r_i = i / n`, with `t(0) = 0`, `t(1) = 1`, `s(0) = 1` and `t` strictly
//! increasing. One transformed Euler step from knot `i` reduces, in the
//! original frame, to
//!
//! `x_{i+1} = x_i + (s_i / s_{i+1}) (t_{i+1} - t_i) u(x_i, t_i)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_backward, ParamVars, Tape, Var};
use crate::blob::Blob;
use crate::error::{Error, Result};
use crate::models::{ConditionalModel, Head};
use crate::params::{AdamConfig, ParamSet};
use crate::rng::{index, normal_tensor, Rng};
use crate::samplers::{flow_trajectory, VelocityField};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BespokeTransform {
    pub n: usize,
    pub r_knots: Vec<f64>,
    pub t_of_r: Vec<f64>,
    pub s_of_r: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TransformHeader {
    n: usize,
}

impl BespokeTransform {
    /// `t(r) = r`, `s(r) = 1`: plain uniform Euler.
    pub fn identity(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::invalid("a bespoke transform needs at least one step"));
        }
        let r: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
        Ok(Self {
            n,
            t_of_r: r.clone(),
            r_knots: r,
            s_of_r: vec![1.0; n + 1],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n + 1;
        if self.n < 1 || self.r_knots.len() != m || self.t_of_r.len() != m || self.s_of_r.len() != m {
            return Err(Error::invalid(format!(
                "transform for {} steps needs {m} knots in each table",
                self.n
            )));
        }
        if self.t_of_r[0] != 0.0 || self.t_of_r[self.n] != 1.0 {
            return Err(Error::invalid("transform time must run from 0 to 1"));
        }
        if self.t_of_r.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("transform time must increase strictly"));
        }
        if self.s_of_r.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("transform scale must be positive and finite"));
        }
        Ok(())
    }

    pub fn to_blob(&self) -> Result<Blob> {
        let mut b = Blob::new("bespoke_transform").with_hyperparameters(&TransformHeader { n: self.n })?;
        let m = self.n + 1;
        b.insert("r", Tensor::new(vec![m], self.r_knots.clone())?);
        b.insert("t", Tensor::new(vec![m], self.t_of_r.clone())?);
        b.insert("s", Tensor::new(vec![m], self.s_of_r.clone())?);
        Ok(b)
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self> {
        blob.expect_kind("bespoke_transform")?;
        let h: TransformHeader = blob.hyper()?;
        let t = Self {
            n: h.n,
            r_knots: blob.take("r")?.into_data(),
            t_of_r: blob.take("t")?.into_data(),
            s_of_r: blob.take("s")?.into_data(),
        };
        t.validate()?;
        Ok(t)
    }
}

/// Dense Euler trajectories of a flow, `states[k]` at `t = k / K`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrajectories {
    pub states: Vec<Tensor>,
    pub cond: Tensor,
}

impl GroundTruthTrajectories {
    pub fn len(&self) -> usize {
        self.cond.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dense_steps(&self) -> usize {
        self.states.len() - 1
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let k_max = self.dense_steps();
        let k = ((t * k_max as f64).floor() as usize).min(k_max - 1);
        (k, t * k_max as f64 - k as f64)
    }

    /// Linear interpolation between the dense states.
    pub fn state_at(&self, t: f64) -> Result<Tensor> {
        let (k, w) = self.segment(t);
        let delta = self.states[k + 1].sub(&self.states[k])?;
        let mut x = self.states[k].clone();
        x.axpy(w, &delta)?;
        Ok(x)
    }

    /// [`Self::state_at`] with a differentiable time `t` of shape `[1]`.
    fn state_graph(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        let tv = tape.value(t).item();
        let (k, _) = self.segment(tv);
        let delta = tape.constant(self.states[k + 1].sub(&self.states[k])?);
        let scaled = tape.scale(t, self.dense_steps() as f64);
        let offset = tape.constant(Tensor::scalar(k as f64));
        let w = tape.sub(scaled, offset)?;
        let step = tape.scale_by(delta, w)?;
        let base = tape.constant(self.states[k].clone());
        tape.add(base, step)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.iter().map(|s| s.gather_rows(idx)).collect(),
            cond: self.cond.gather_rows(idx),
        }
    }
}

/// Integrate `n_traj` dense trajectories of `model` from fresh noise, with
/// conditions drawn uniformly from `cond_pool`.
pub fn generate_trajectories<M: VelocityField + ?Sized>(
    model: &M,
    cond_pool: &Tensor,
    n_traj: usize,
    dense_steps: usize,
    rng: &mut Rng,
) -> Result<GroundTruthTrajectories> {
    if n_traj < 1 || dense_steps < 1 || cond_pool.rows() < 1 {
        return Err(Error::invalid("need at least one trajectory, one step and one condition"));
    }
    let x0 = normal_tensor(rng, &[n_traj, model.data_dim()]);
    let idx: Vec<usize> = (0..n_traj).map(|_| index(rng, cond_pool.rows())).collect();
    let cond = cond_pool.gather_rows(&idx);
    let (states, _) = flow_trajectory(model, &x0, &cond, dense_steps)?;
    Ok(GroundTruthTrajectories { states, cond })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BespokeWeights {
    /// Step `i` is weighted by `s_i / s_n`, the factor mapping transformed
    /// local errors back to the original frame at `t = 1`.
    #[default]
    ScaleRatio,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BespokeConfig {
    pub n: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weights: BespokeWeights,
}

impl Default for BespokeConfig {
    fn default() -> Self {
        Self {
            n: 4,
            iterations: 300,
            lr: 2e-2,
            weights: BespokeWeights::ScaleRatio,
        }
    }
}

fn step_weights(s: &[f64], weights: BespokeWeights) -> Vec<f64> {
    let n = s.len() - 1;
    match weights {
        BespokeWeights::ScaleRatio => (0..=n).map(|i| s[i] / s[n]).collect(),
        BespokeWeights::Uniform => vec![1.0; n + 1],
    }
}

/// Weighted sum over steps of the mean Euclidean local error of the
/// transformed Euler step against the ground-truth trajectories.
pub fn transform_loss<M: VelocityField + ?Sized>(
    model: &M,
    traj: &GroundTruthTrajectories,
    transform: &BespokeTransform,
    weights: BespokeWeights,
) -> Result<f64> {
    transform.validate()?;
    let (t, s) = (&transform.t_of_r, &transform.s_of_r);
    let m = step_weights(s, weights);
    let mut total = 0.0;
    for i in 1..=transform.n {
        let prev = traj.state_at(t[i - 1])?;
        let next = traj.state_at(t[i])?;
        let u = model.velocity(&prev, t[i - 1], &traj.cond)?;
        let mut step = prev;
        step.axpy(s[i - 1] / s[i] * (t[i] - t[i - 1]), &u)?;
        let err = next.sub(&step)?;
        let mean_norm = err.row_sq_norms().iter().map(|v| v.sqrt()).sum::<f64>() / traj.len() as f64;
        total += m[i] * mean_norm;
    }
    Ok(total)
}

/// Knot values as tape variables of shape `[1]`, built from the raw
/// parameters `t_raw` (softplus increments) and `s_raw` (log scales).
fn knot_graph(tape: &mut Tape, vars: &ParamVars, n: usize) -> Result<(Vec<Var>, Vec<Var>)> {
    let t_raw = vars["t_raw"];
    let s_raw = vars["s_raw"];
    let sp = tape.softplus(t_raw);
    let total = tape.sum(sp);
    let inv = tape.recip(total);
    let inc = tape.scale_by(sp, inv)?;
    let mut t = vec![tape.constant(Tensor::scalar(0.0))];
    for i in 1..n {
        let head = tape.slice_cols(inc, 0, i)?;
        t.push(tape.sum(head));
    }
    t.push(tape.constant(Tensor::scalar(1.0)));
    let mut s = vec![tape.constant(Tensor::scalar(1.0))];
    for i in 1..=n {
        let raw = tape.slice_cols(s_raw, i - 1, i)?;
        let e = tape.exp(raw);
        s.push(tape.sum(e));
    }
    Ok((t, s))
}

fn raw_params(n: usize) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.insert("t_raw", Tensor::zeros(&[1, n]))?;
    p.insert("s_raw", Tensor::zeros(&[1, n]))?;
    Ok(p)
}

/// The transform described by raw parameters.
fn transform_from_params(params: &ParamSet, n: usize) -> Result<BespokeTransform> {
    let mut tape = Tape::new();
    let vars = tape.bind(params, false);
    let (t, s) = knot_graph(&mut tape, &vars, n)?;
    let mut out = BespokeTransform::identity(n)?;
    out.t_of_r = t.iter().map(|&v| tape.value(v).item()).collect();
    out.s_of_r = s.iter().map(|&v| tape.value(v).item()).collect();
    Ok(out)
}

fn loss_graph(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &ConditionalModel,
    traj: &GroundTruthTrajectories,
    n: usize,
    weights: BespokeWeights,
) -> Result<Var> {
    let (t, s) = knot_graph(tape, vars, n)?;
    let s_vals: Vec<f64> = s.iter().map(|&v| tape.value(v).item()).collect();
    let m = step_weights(&s_vals, weights);
    let net = tape.bind(&model.params, false);
    let cond = tape.constant(traj.cond.clone());
    let ones = tape.constant(Tensor::ones(&[traj.len(), 1]));
    let mut total: Option<Var> = None;
    for i in 1..=n {
        let prev = traj.state_graph(tape, t[i - 1])?;
        let next = traj.state_graph(tape, t[i])?;
        let tcol = tape.scale_by(ones, t[i - 1])?;
        let u = model.velocity_graph(tape, &net, prev, tcol, cond)?;
        let ratio = tape.div(s[i - 1], s[i])?;
        let dt = tape.sub(t[i], t[i - 1])?;
        let h = tape.mul(ratio, dt)?;
        let du = tape.scale_by(u, h)?;
        let step = tape.add(prev, du)?;
        let err = tape.sub(next, step)?;
        let sq = tape.square(err);
        let row = tape.sum_cols(sq)?;
        let norm = tape.sqrt(row);
        let mean = tape.mean(norm);
        let term = tape.scale(mean, m[i]);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("empty bespoke schedule"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BespokeFit {
    pub transform: BespokeTransform,
    pub train_loss: f64,
    pub val_loss: f64,
    pub identity_train_loss: f64,
    pub identity_val_loss: f64,
    /// `None` when no iterate beat the identity transform.
    pub best_iteration: Option<usize>,
    pub loss_curve: Vec<f64>,
}

/// Fit an `n`-step transform with Adam. The returned transform is the
/// iterate with the lowest validation loss among those whose training loss
/// does not exceed the identity's; the identity itself is the fallback.
pub fn fit_bespoke(
    model: &ConditionalModel,
    train: &GroundTruthTrajectories,
    val: &GroundTruthTrajectories,
    cfg: &BespokeConfig,
) -> Result<BespokeFit> {
    model.expect_head(Head::VectorField)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("bespoke fitting needs training and validation trajectories"));
    }
    let n = cfg.n;
    let identity = BespokeTransform::identity(n)?;
    let id_train = transform_loss(model, train, &identity, cfg.weights)?;
    let id_val = transform_loss(model, val, &identity, cfg.weights)?;
    let mut best = (identity.clone(), id_train, id_val, None);
    let mut last_finite = identity;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut params = raw_params(n)?;
    let mut curve = Vec::with_capacity(cfg.iterations);
    let diverged = |iteration, last: &BespokeTransform| Error::BespokeDiverged {
        iteration,
        last_finite: Box::new(last.clone()),
    };
    for it in 0..=cfg.iterations {
        let current = transform_from_params(&params, n)?;
        if current.validate().is_err() {
            return Err(diverged(it, &last_finite));
        }
        let (loss, grads) = match forward_backward(&params, |tape, vars| {
            loss_graph(tape, vars, model, train, n, cfg.weights)
        }) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(diverged(it, &last_finite)),
            Err(e) => return Err(e),
        };
        last_finite = current.clone();
        curve.push(loss);
        if loss <= id_train {
            let v = transform_loss(model, val, &current, cfg.weights)?;
            if v < best.2 {
                best = (current, loss, v, Some(it));
            }
        }
        if it == cfg.iterations {
            break;
        }
        match params.adam_step(&grads, &adam) {
            Ok(()) => {}
            Err(Error::NonFinite { .. }) => return Err(diverged(it, &last_finite)),
            Err(e) => return Err(e),
        }
    }
    let (transform, train_loss, val_loss, best_iteration) = best;
    Ok(BespokeFit {
        transform,
        train_loss,
        val_loss,
        identity_train_loss: id_train,
        identity_val_loss: id_val,
        best_iteration,
        loss_curve: curve,
    })
}
