//! Training losses. Each loss records its graph on a [`Tape`] and returns
//! the scalar loss variable; callers run the backward pass.
//!
//! All losses average the per-sample squared Euclidean error over the batch,
//! i.e. `mean_b ||pred_b - target_b||^2`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blob::Blob;
use crate::coupling::Coupling;
use crate::error::{Error, Result};
use crate::models::{ConditionalModel, Head, TapeNet};
use crate::rng::{index, normal_tensor, uniform, Rng};
use crate::samplers::euler_integrate_flow;
use crate::schedules::{DdpmSchedule, SigmaGrid};
use crate::tensor::Tensor;

/// Lower/upper clamp for flow-matching times.
pub const FLOW_T_CLAMP: f64 = 1e-5;

/// A minibatch: data `y`, conditions, noise draws, and one time value per
/// row (a DDPM step index, an EDM sigma, or a flow time).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub y: Tensor,
    pub cond: Tensor,
    pub eps: Tensor,
    pub times: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.y.rows();
        if self.eps.shape() != self.y.shape() {
            return Err(Error::shape(
                "batch",
                format!("eps {:?} vs y {:?}", self.eps.shape(), self.y.shape()),
            ));
        }
        if self.cond.rows() != b || self.times.len() != b {
            return Err(Error::shape(
                "batch",
                format!(
                    "{b} rows of y, {} of cond, {} time values",
                    self.cond.rows(),
                    self.times.len()
                ),
            ));
        }
        Ok(())
    }
}

/// `t ~ U(0,1)` clamped away from both endpoints.
pub fn sample_flow_times(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| uniform(rng).clamp(FLOW_T_CLAMP, 1.0 - FLOW_T_CLAMP))
        .collect()
}

pub fn sample_ddpm_steps(rng: &mut Rng, n: usize, steps: usize) -> Vec<f64> {
    (0..n).map(|_| index(rng, steps) as f64).collect()
}

fn mean_sq_error(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq)?;
    Ok(tape.mean(per_row))
}

/// Build a tensor whose row `i` is `a_i * x_i + b_i * z_i`.
fn row_mix(a: &[f64], x: &Tensor, b: &[f64], z: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(z, "row_mix")?;
    let d = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        out.extend(
            x.row(i)
                .iter()
                .zip(z.row(i))
                .map(|(xv, zv)| a[i] * xv + b[i] * zv),
        );
    }
    Tensor::new(vec![x.rows(), d], out)
}

/// Noise-prediction loss at `sqrt(ab_t) y + sqrt(1 - ab_t) eps`.
pub fn ddpm_loss(
    tape: &mut Tape,
    net: &dyn TapeNet,
    schedule: &DdpmSchedule,
    batch: &Batch,
) -> Result<Var> {
    batch.validate()?;
    let mut a = Vec::with_capacity(batch.len());
    let mut s = Vec::with_capacity(batch.len());
    for &t in &batch.times {
        let ti = t as usize;
        if t < 0.0 || t.fract() != 0.0 || ti >= schedule.steps() {
            return Err(Error::invalid(format!("DDPM step {t} outside 0..{}", schedule.steps())));
        }
        let ab = schedule.alpha_bar[ti];
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let xt = tape.constant(row_mix(&a, &batch.y, &s, &batch.eps)?);
    let cond = tape.constant(batch.cond.clone());
    let pred = net.forward(tape, xt, &batch.times, cond)?;
    let target = tape.constant(batch.eps.clone());
    mean_sq_error(tape, pred, target)
}

/// `lambda(sigma)`-weighted denoising loss at `y + sigma eps`; `batch.times`
/// holds the sigmas.
pub fn edm_loss(tape: &mut Tape, net: &dyn TapeNet, sigma_data: f64, batch: &Batch) -> Result<Var> {
    batch.validate()?;
    let ones = vec![1.0; batch.len()];
    let xt = tape.constant(row_mix(&ones, &batch.y, &batch.times, &batch.eps)?);
    let cond = tape.constant(batch.cond.clone());
    let pred = net.forward(tape, xt, &batch.times, cond)?;
    let target = tape.constant(batch.y.clone());
    let lambda: Vec<f64> = batch
        .times
        .iter()
        .map(|&s| crate::schedules::edm_precond(s, sigma_data).map(|c| c.lambda))
        .collect::<Result<_>>()?;
    let w = tape.constant(Tensor::new(vec![batch.len(), 1], lambda)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_cols(sq)?;
    let weighted = tape.mul(per_row, w)?;
    Ok(tape.mean(weighted))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSolver {
    #[default]
    Euler,
    Heun,
}

/// One Euler step of the probability-flow ODE `dx/dsigma = (x - D)/sigma`
/// from `hi` to `lo`, row by row.
pub fn teacher_euler_step(x: &Tensor, denoised: &Tensor, hi: &[f64], lo: &[f64]) -> Result<Tensor> {
    x.expect_same_shape(denoised, "teacher_step")?;
    let d = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        let h = lo[i] - hi[i];
        out.extend(
            x.row(i)
                .iter()
                .zip(denoised.row(i))
                .map(|(xv, dv)| xv + h * (xv - dv) / hi[i]),
        );
    }
    Tensor::new(vec![x.rows(), d], out)
}

fn teacher_heun_step(
    tape: &mut Tape,
    teacher: &dyn TapeNet,
    x: &Tensor,
    denoised: &Tensor,
    hi: &[f64],
    lo: &[f64],
    cond: Var,
) -> Result<Tensor> {
    let euler = teacher_euler_step(x, denoised, hi, lo)?;
    if lo.iter().any(|&s| s <= 0.0) {
        return Ok(euler);
    }
    let ev = tape.constant(euler.clone());
    let d2 = teacher.forward(tape, ev, lo, cond)?;
    let d2 = tape.value(d2).clone();
    let dim = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        let h = lo[i] - hi[i];
        for j in 0..dim {
            let slope1 = (x.row(i)[j] - denoised.row(i)[j]) / hi[i];
            let slope2 = (euler.row(i)[j] - d2.row(i)[j]) / lo[i];
            out.push(x.row(i)[j] + h * 0.5 * (slope1 + slope2));
        }
    }
    Tensor::new(vec![x.rows(), dim], out)
}

/// Consistency distillation loss.
///
/// Row `i` uses adjacent grid levels `hi = grid[levels[i]]` and
/// `lo = grid[levels[i] + 1]`. The student sees `x_hi = y + hi * eps`; the
/// EMA target sees the teacher's ODE step from `x_hi` down to `lo`. Neither
/// the teacher nor the EMA branch receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn cd_loss(
    tape: &mut Tape,
    student: &dyn TapeNet,
    ema_student: &dyn TapeNet,
    teacher: &dyn TapeNet,
    batch: &Batch,
    grid: &SigmaGrid,
    levels: &[usize],
    solver: TeacherSolver,
) -> Result<Var> {
    if grid.len() < 2 {
        return Err(Error::invalid("consistency distillation needs a grid of at least 2 levels"));
    }
    if levels.len() != batch.len() {
        return Err(Error::shape("cd_loss", "one grid level per batch row required"));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l + 1 >= grid.len()) {
        return Err(Error::invalid(format!("grid level {bad} has no successor")));
    }
    let hi: Vec<f64> = levels.iter().map(|&l| grid.sigmas[l]).collect();
    let lo: Vec<f64> = levels.iter().map(|&l| grid.sigmas[l + 1]).collect();
    let ones = vec![1.0; batch.len()];
    let x_hi = row_mix(&ones, &batch.y, &hi, &batch.eps)?;
    let cond = tape.constant(batch.cond.clone());

    let xv = tape.constant(x_hi.clone());
    let d_teacher = teacher.forward(tape, xv, &hi, cond)?;
    let d_teacher = tape.value(d_teacher).clone();
    let x_lo = match solver {
        TeacherSolver::Euler => teacher_euler_step(&x_hi, &d_teacher, &hi, &lo)?,
        TeacherSolver::Heun => teacher_heun_step(tape, teacher, &x_hi, &d_teacher, &hi, &lo, cond)?,
    };

    let x_lo = tape.constant(x_lo);
    let target = ema_student.forward(tape, x_lo, &lo, cond)?;
    let target = tape.detach(target);
    let xs = tape.constant(x_hi);
    let pred = student.forward(tape, xs, &hi, cond)?;
    mean_sq_error(tape, pred, target)
}

/// Flow-matching loss on the straight path `t y + (1 - t) eps`.
pub fn fm_loss(tape: &mut Tape, net: &dyn TapeNet, batch: &Batch) -> Result<Var> {
    batch.validate()?;
    let t = &batch.times;
    if t.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("flow time outside [0, 1]"));
    }
    let one_minus: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let xt = tape.constant(row_mix(t, &batch.y, &one_minus, &batch.eps)?);
    let cond = tape.constant(batch.cond.clone());
    let pred = net.forward(tape, xt, t, cond)?;
    let target = tape.constant(batch.y.sub(&batch.eps)?);
    mean_sq_error(tape, pred, target)
}

/// Flow matching on a coupled batch: row `i` of `y` is paired with noise
/// row `coupling.permutation[i]`.
pub fn multisample_fm_loss(
    tape: &mut Tape,
    net: &dyn TapeNet,
    batch: &Batch,
    coupling: &Coupling,
) -> Result<Var> {
    batch.validate()?;
    if coupling.batch_size != batch.len() || coupling.permutation.len() != batch.len() {
        return Err(Error::shape(
            "multisample_fm_loss",
            format!("coupling for {} rows, batch has {}", coupling.batch_size, batch.len()),
        ));
    }
    let coupled = Batch {
        eps: batch.eps.gather_rows(&coupling.permutation),
        ..batch.clone()
    };
    fm_loss(tape, net, &coupled)
}

/// Noise/endpoint pairs produced by a pretrained flow.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub eps: Tensor,
    pub y_hat: Tensor,
    pub cond: Tensor,
    pub solver_steps: usize,
    pub warning: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PairHeader {
    solver_steps: usize,
    #[serde(default)]
    warning: Option<String>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.eps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A training batch of stored pairs; the noise is never resampled.
    pub fn batch(&self, idx: &[usize], times: Vec<f64>) -> Batch {
        Batch {
            y: self.y_hat.gather_rows(idx),
            cond: self.cond.gather_rows(idx),
            eps: self.eps.gather_rows(idx),
            times,
        }
    }

    pub fn to_blob(&self) -> Result<Blob> {
        let mut b = Blob::new("reflow_pairs").with_hyperparameters(&PairHeader {
            solver_steps: self.solver_steps,
            warning: self.warning.clone(),
        })?;
        b.insert("eps", self.eps.clone());
        b.insert("y_hat", self.y_hat.clone());
        b.insert("cond", self.cond.clone());
        Ok(b)
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self> {
        blob.expect_kind("reflow_pairs")?;
        let h: PairHeader = blob.hyper()?;
        Ok(Self {
            eps: blob.take("eps")?,
            y_hat: blob.take("y_hat")?,
            cond: blob.take("cond")?,
            solver_steps: h.solver_steps,
            warning: h.warning,
        })
    }
}

/// Integrate the base flow from fresh noise to build (eps, y_hat, cond)
/// triples. Conditions are drawn uniformly from `cond_pool`.
pub fn reflow_pairs(
    base: &ConditionalModel,
    cond_pool: &Tensor,
    n_pairs: usize,
    solver_steps: usize,
    rng: &mut Rng,
) -> Result<PairDataset> {
    base.expect_head(Head::VectorField)?;
    if solver_steps < 1 || n_pairs < 1 || cond_pool.rows() < 1 {
        return Err(Error::invalid("reflow needs at least one pair, one step and one condition"));
    }
    let warning = match (base.meta.final_loss, base.meta.convergence_threshold) {
        (Some(l), Some(th)) if l > th => {
            let msg = format!("base model final loss {l:.4} exceeds convergence threshold {th:.4}");
            log::warn!("{msg}");
            Some(msg)
        }
        _ => None,
    };
    let eps = normal_tensor(rng, &[n_pairs, base.config.data_dim]);
    let idx: Vec<usize> = (0..n_pairs).map(|_| index(rng, cond_pool.rows())).collect();
    let cond = cond_pool.gather_rows(&idx);
    let y_hat = euler_integrate_flow(base, &eps, &cond, solver_steps)?;
    Ok(PairDataset {
        eps,
        y_hat,
        cond,
        solver_steps,
        warning,
    })
}

/// Flow-matching loss on stored reflow pairs.
pub fn reflow_loss(tape: &mut Tape, net: &dyn TapeNet, pairs: &Batch) -> Result<Var> {
    fm_loss(tape, net, pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::optimal_coupling;
    use crate::models::{Parameterization, TrunkConfig};
    use crate::rng::seeded;
    use crate::schedules::{karras_sigma_grid, make_ddpm_schedule};

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor);

    impl TapeNet for Fixed {
        fn forward(&self, tape: &mut Tape, _x: Var, _t: &[f64], _c: Var) -> Result<Var> {
            Ok(tape.constant(self.0.clone()))
        }
    }

    /// A consistency function that knows the clean data.
    struct ReturnsData(Tensor);

    impl TapeNet for ReturnsData {
        fn forward(&self, tape: &mut Tape, _x: Var, _t: &[f64], _c: Var) -> Result<Var> {
            Ok(tape.constant(self.0.clone()))
        }
    }

    fn batch(rng: &mut Rng, b: usize, d: usize, times: Vec<f64>) -> Batch {
        Batch {
            y: normal_tensor(rng, &[b, d]).scale(2.0),
            cond: Tensor::zeros(&[b, 1]),
            eps: normal_tensor(rng, &[b, d]),
            times,
        }
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn ddpm_loss_oracles() {
        let mut rng = seeded(1);
        let s = make_ddpm_schedule(1000).unwrap();
        let d = 4;
        let steps = sample_ddpm_steps(&mut rng, 2000, 1000);
        let b = batch(&mut rng, 2000, d, steps);
        let perfect = eval(|t| ddpm_loss(t, &Fixed(b.eps.clone()), &s, &b));
        assert_eq!(perfect, 0.0);
        let zero = eval(|t| ddpm_loss(t, &Fixed(Tensor::zeros(&[2000, d])), &s, &b));
        let expected: f64 = b.eps.row_sq_norms().iter().sum::<f64>() / 2000.0;
        assert!((zero - expected).abs() < 1e-12);
        // E||eps||^2 = d
        assert!((zero - d as f64).abs() < 0.3, "{zero}");
    }

    #[test]
    fn edm_loss_oracles() {
        let mut rng = seeded(2);
        let sd = 1.3;
        let sigmas: Vec<f64> = (0..64).map(|i| 0.01 * 1.15f64.powi(i)).collect();
        let b = batch(&mut rng, 64, 3, sigmas.clone());
        assert_eq!(eval(|t| edm_loss(t, &Fixed(b.y.clone()), sd, &b)), 0.0);

        // With F == 0 the denoiser is c_skip * (y + sigma eps); expand by hand.
        let mut m = ConditionalModel::new(
            "edm",
            TrunkConfig { data_dim: 3, cond_dim: 1, hidden_dim: 8, depth: 1, time_embed_dim: 4 },
            Parameterization::Edm { edm: Default::default(), sigma_data: sd },
            &mut rng,
        )
        .unwrap();
        let zeroed = m
            .params
            .iter()
            .map(|(k, t)| (k.to_string(), if k.starts_with("out") { Tensor::zeros(t.shape()) } else { t.clone() }))
            .collect();
        m.params = crate::params::ParamSet::from_tensors(zeroed).unwrap();
        let got = eval(|t| {
            let bound = m.bind(t, false);
            edm_loss(t, &bound, sd, &b)
        });
        let mut expected = 0.0;
        for i in 0..64 {
            let s = sigmas[i];
            let c_skip = sd * sd / (s * s + sd * sd);
            let lambda = (s * s + sd * sd) / (s * sd).powi(2);
            let mut sq = 0.0;
            for j in 0..3 {
                let y = b.y.row(i)[j];
                let x = y + s * b.eps.row(i)[j];
                sq += (c_skip * x - y).powi(2);
            }
            expected += lambda * sq;
        }
        expected /= 64.0;
        assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn fm_loss_oracles() {
        let mut rng = seeded(3);
        let times = sample_flow_times(&mut rng, 100);
        let b = batch(&mut rng, 100, 2, times);
        let target = b.y.sub(&b.eps).unwrap();
        assert_eq!(eval(|t| fm_loss(t, &Fixed(target.clone()), &b)), 0.0);
        let zero = eval(|t| fm_loss(t, &Fixed(Tensor::zeros(&[100, 2])), &b));
        let expected = target.row_sq_norms().iter().sum::<f64>() / 100.0;
        assert!((zero - expected).abs() < 1e-12);
        assert!(b.times.iter().all(|&t| (FLOW_T_CLAMP..=1.0 - FLOW_T_CLAMP).contains(&t)));
    }

    #[test]
    fn multisample_identity_and_single_row_match_fm() {
        let mut rng = seeded(4);
        let m = ConditionalModel::new(
            "fm",
            TrunkConfig { data_dim: 2, cond_dim: 1, hidden_dim: 8, depth: 2, time_embed_dim: 4 },
            Parameterization::Flow,
            &mut rng,
        )
        .unwrap();
        for n in [1, 7] {
            let times = sample_flow_times(&mut rng, n);
            let b = batch(&mut rng, n, 2, times);
            let identity = Coupling::identity(&b.y, &b.eps).unwrap();
            let fm = eval(|t| {
                let net = m.bind(t, false);
                fm_loss(t, &net, &b)
            });
            let ms = eval(|t| {
                let net = m.bind(t, false);
                multisample_fm_loss(t, &net, &b, &identity)
            });
            assert_eq!(fm.to_bits(), ms.to_bits());
            if n == 1 {
                let c = optimal_coupling(&b.y, &b.eps).unwrap();
                let ot = eval(|t| {
                    let net = m.bind(t, false);
                    multisample_fm_loss(t, &net, &b, &c)
                });
                assert_eq!(fm.to_bits(), ot.to_bits());
            }
        }
        let b = batch(&mut rng, 3, 2, vec![0.5; 3]);
        let wrong = Coupling::identity(&b.y.gather_rows(&[0, 1]), &b.eps.gather_rows(&[0, 1])).unwrap();
        let mut tape = Tape::new();
        assert!(multisample_fm_loss(&mut tape, &Fixed(Tensor::zeros(&[3, 2])), &b, &wrong).is_err());
    }

    #[test]
    fn teacher_step_matches_score_form() {
        // Independent route: dx/dsigma = -sigma * score, score = (D - x) / sigma^2.
        let mut rng = seeded(5);
        let x = normal_tensor(&mut rng, &[10, 3]).scale(5.0);
        let den = normal_tensor(&mut rng, &[10, 3]);
        let hi: Vec<f64> = (0..10).map(|i| 0.5 + i as f64).collect();
        let lo: Vec<f64> = hi.iter().map(|h| h * 0.6).collect();
        let step = teacher_euler_step(&x, &den, &hi, &lo).unwrap();
        for i in 0..10 {
            for j in 0..3 {
                let score = (den.row(i)[j] - x.row(i)[j]) / (hi[i] * hi[i]);
                let drift = -hi[i] * score;
                let reference = x.row(i)[j] + (lo[i] - hi[i]) * drift;
                assert!((step.row(i)[j] - reference).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cd_loss_zero_for_perfect_consistency_function() {
        let mut rng = seeded(6);
        let grid = karras_sigma_grid(18, 0.002, 80.0, 7.0).unwrap();
        let levels: Vec<usize> = (0..32).map(|_| index(&mut rng, 17)).collect();
        let b = batch(&mut rng, 32, 2, vec![0.0; 32]);
        let f = ReturnsData(b.y.clone());
        let loss = eval(|t| cd_loss(t, &f, &f, &f, &b, &grid, &levels, TeacherSolver::Euler));
        assert_eq!(loss, 0.0);
        let short = karras_sigma_grid(1, 0.002, 80.0, 7.0).unwrap();
        let mut tape = Tape::new();
        assert!(cd_loss(&mut tape, &f, &f, &f, &b, &short, &levels, TeacherSolver::Euler).is_err());
    }

    #[test]
    fn cd_loss_stops_gradient_into_ema_and_teacher() {
        let mut rng = seeded(7);
        let cfg = TrunkConfig { data_dim: 2, cond_dim: 1, hidden_dim: 8, depth: 2, time_embed_dim: 4 };
        let param = Parameterization::Consistency { edm: Default::default(), sigma_data: 0.5 };
        let student = ConditionalModel::new("cd", cfg, param, &mut rng).unwrap();
        let ema = ConditionalModel::new("cd", cfg, param, &mut rng).unwrap();
        let teacher = ConditionalModel::new(
            "edm",
            cfg,
            Parameterization::Edm { edm: Default::default(), sigma_data: 0.5 },
            &mut rng,
        )
        .unwrap();
        let grid = karras_sigma_grid(18, 0.002, 80.0, 7.0).unwrap();
        let levels: Vec<usize> = (0..16).map(|_| index(&mut rng, 17)).collect();
        let b = batch(&mut rng, 16, 2, vec![0.0; 16]);
        for solver in [TeacherSolver::Euler, TeacherSolver::Heun] {
            let mut tape = Tape::new();
            let s = student.bind(&mut tape, true);
            let e = ema.bind(&mut tape, true);
            let t = teacher.bind(&mut tape, true);
            let loss = cd_loss(&mut tape, &s, &e, &t, &b, &grid, &levels, solver).unwrap();
            let g = tape.backward(loss).unwrap();
            let nonzero = |vars: &crate::autodiff::ParamVars| {
                g.collect(&tape, vars).values().flat_map(|t| t.data().to_vec()).any(|v| v != 0.0)
            };
            assert!(nonzero(&s.vars));
            assert!(!nonzero(&e.vars));
            assert!(!nonzero(&t.vars));
        }
    }

    #[test]
    fn reflow_pairs_with_constant_field_land_on_target() {
        let mut rng = seeded(8);
        let mut base = ConditionalModel::new(
            "fm",
            TrunkConfig { data_dim: 2, cond_dim: 1, hidden_dim: 8, depth: 1, time_embed_dim: 4 },
            Parameterization::Flow,
            &mut rng,
        )
        .unwrap();
        let pool = Tensor::zeros(&[4, 1]);
        let p1 = reflow_pairs(&base, &pool, 16, 10, &mut seeded(9)).unwrap();
        let p2 = reflow_pairs(&base, &pool, 16, 10, &mut seeded(9)).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.warning.is_none());
        base.meta.final_loss = Some(3.0);
        base.meta.convergence_threshold = Some(1.0);
        assert!(reflow_pairs(&base, &pool, 4, 2, &mut seeded(9)).unwrap().warning.is_some());
        let back = PairDataset::from_blob(Blob::from_bytes(&p1.to_blob().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, p1);
    }
}
