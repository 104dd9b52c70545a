//! Few-step samplers: DDIM, EDM Euler, flow Euler, consistency multistep and
//! the bespoke-transformed Euler solver.
//!
//! Every sampler draws its starting noise (and any re-noising draws) from
//! `seeded(request.seed)`, so equal requests give equal samples. Each model
//! evaluation counts as one function evaluation (NFE).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::bespoke::BespokeTransform;
use crate::error::{Error, Result};
use crate::models::ConditionalModel;
use crate::rng::{normal_tensor, seeded};
use crate::schedules::{DdpmSchedule, SigmaGrid};
use crate::tensor::Tensor;

pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn predict_noise(&self, x: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

pub trait Denoiser {
    fn data_dim(&self) -> usize;
    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor>;
    /// `Some(sigma_min)` for models that satisfy the consistency boundary
    /// condition `f(x, sigma_min) = x`.
    fn boundary_sigma(&self) -> Option<f64> {
        None
    }
}

pub trait VelocityField {
    fn data_dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for ConditionalModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn predict_noise(&self, x: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        ConditionalModel::predict_noise(self, x, t, cond)
    }
}

impl Denoiser for ConditionalModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        ConditionalModel::denoise(self, x, sigma, cond)
    }

    fn boundary_sigma(&self) -> Option<f64> {
        match self.edm_params() {
            Some((edm, _)) if self.is_consistency() => Some(edm.sigma_min),
            _ => None,
        }
    }
}

impl VelocityField for ConditionalModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        ConditionalModel::velocity(self, x, t, cond)
    }
}

/// Wraps a model and counts its evaluations.
pub struct Counted<'a, M: ?Sized> {
    pub inner: &'a M,
    calls: AtomicUsize,
}

impl<'a, M: ?Sized> Counted<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl<M: NoisePredictor + ?Sized> NoisePredictor for Counted<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn predict_noise(&self, x: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.tick();
        self.inner.predict_noise(x, t, cond)
    }
}

impl<M: Denoiser + ?Sized> Denoiser for Counted<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        self.tick();
        self.inner.denoise(x, sigma, cond)
    }

    fn boundary_sigma(&self) -> Option<f64> {
        self.inner.boundary_sigma()
    }
}

impl<M: VelocityField + ?Sized> VelocityField for Counted<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        self.tick();
        self.inner.velocity(x, t, cond)
    }
}

/// What to sample: `cond` has one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub nfe: usize,
    pub cond: Tensor,
    pub seed: u64,
}

impl SampleRequest {
    pub fn n_samples(&self) -> usize {
        self.cond.rows()
    }

    fn check(&self) -> Result<()> {
        if self.nfe < 1 {
            return Err(Error::invalid("nfe must be at least 1"));
        }
        self.cond.dims2("sample_request")?;
        if self.cond.rows() < 1 {
            return Err(Error::invalid("need at least one sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    /// The standard-normal draw the sampler started from.
    pub start: Tensor,
    pub samples: Tensor,
}

/// `nfe` DDPM indices, evenly spaced from `steps - 1` down to 0.
pub fn ddim_timesteps(steps: usize, nfe: usize) -> Result<Vec<usize>> {
    if nfe < 1 || nfe > steps {
        return Err(Error::invalid(format!("nfe {nfe} outside 1..={steps}")));
    }
    if nfe == 1 {
        return Ok(vec![steps - 1]);
    }
    let top = (steps - 1) as f64;
    Ok((0..nfe)
        .map(|i| (top * (1.0 - i as f64 / (nfe - 1) as f64)).round() as usize)
        .collect())
}

/// Deterministic DDIM update from level `ab_t` to level `ab_next` given the
/// predicted noise.
pub fn ddim_step(x: &Tensor, eps_hat: &Tensor, ab_t: f64, ab_next: f64) -> Result<Tensor> {
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    x.zip_map(eps_hat, "ddim_step", |xv, e| {
        let y0 = (xv - sb * e) / sa;
        na * y0 + nb * e
    })
}

pub fn ddim_sample<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DdpmSchedule,
    req: &SampleRequest,
) -> Result<Sampled> {
    req.check()?;
    let ts = ddim_timesteps(schedule.steps(), req.nfe)?;
    let mut rng = seeded(req.seed);
    let start = normal_tensor(&mut rng, &[req.n_samples(), model.data_dim()]);
    let mut x = start.clone();
    for (k, &t) in ts.iter().enumerate() {
        let eps = model.predict_noise(&x, t, &req.cond)?;
        // The final update lands on the clean level.
        let ab_next = ts.get(k + 1).map_or(1.0, |&n| schedule.alpha_bar[n]);
        x = ddim_step(&x, &eps, schedule.alpha_bar[t], ab_next)?;
    }
    Ok(Sampled { start, samples: x })
}

/// Euler on `dx/dsigma = (x - D(x, sigma)) / sigma` along `sigmas`, which
/// must hold `nfe` strictly decreasing positive levels followed by 0.
pub fn edm_euler_sample<M: Denoiser + ?Sized>(
    model: &M,
    req: &SampleRequest,
    sigmas: &[f64],
) -> Result<Sampled> {
    req.check()?;
    if sigmas.len() != req.nfe + 1 || *sigmas.last().unwrap_or(&1.0) != 0.0 {
        return Err(Error::invalid(format!(
            "EDM Euler needs {} positive levels plus a terminal zero, got {} values",
            req.nfe,
            sigmas.len()
        )));
    }
    if sigmas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("sigma levels must decrease strictly"));
    }
    let mut rng = seeded(req.seed);
    let start = normal_tensor(&mut rng, &[req.n_samples(), model.data_dim()]);
    let mut x = start.scale(sigmas[0]);
    for w in sigmas.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let den = model.denoise(&x, hi, &req.cond)?;
        x = x.zip_map(&den, "edm_euler", |xv, dv| xv + (lo - hi) * (xv - dv) / hi)?;
    }
    Ok(Sampled { start, samples: x })
}

/// Euler integration of `dx/dt = v(x, t)` from 0 to 1 with `steps` uniform
/// steps, starting at `x0`.
pub fn euler_integrate_flow<M: VelocityField + ?Sized>(
    model: &M,
    x0: &Tensor,
    cond: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    Ok(flow_path(model, x0, cond, steps, false)?.0)
}

/// Like [`euler_integrate_flow`] but also returns every intermediate state
/// (`steps + 1` tensors) and the velocity evaluated at each step.
pub fn flow_trajectory<M: VelocityField + ?Sized>(
    model: &M,
    x0: &Tensor,
    cond: &Tensor,
    steps: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (_, states, vels) = flow_path(model, x0, cond, steps, true)?;
    Ok((states, vels))
}

#[allow(clippy::type_complexity)]
fn flow_path<M: VelocityField + ?Sized>(
    model: &M,
    x0: &Tensor,
    cond: &Tensor,
    steps: usize,
    keep: bool,
) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
    if steps < 1 {
        return Err(Error::invalid("flow integration needs at least one step"));
    }
    let mut states = Vec::new();
    let mut vels = Vec::new();
    let mut x = x0.clone();
    if keep {
        states.push(x.clone());
    }
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let t_next = (i + 1) as f64 / steps as f64;
        let v = model.velocity(&x, t, cond)?;
        x.axpy(t_next - t, &v)?;
        if keep {
            states.push(x.clone());
            vels.push(v);
        }
    }
    Ok((x, states, vels))
}

pub fn fm_euler_sample<M: VelocityField + ?Sized>(model: &M, req: &SampleRequest) -> Result<Sampled> {
    req.check()?;
    let mut rng = seeded(req.seed);
    let start = normal_tensor(&mut rng, &[req.n_samples(), model.data_dim()]);
    let samples = euler_integrate_flow(model, &start, &req.cond, req.nfe)?;
    Ok(Sampled { start, samples })
}

/// Multistep consistency sampling over the first `nfe` levels of `grid`:
/// denoise from `grid[0]`, then alternately re-noise to `grid[k]` and
/// denoise again.
pub fn consistency_sample<M: Denoiser + ?Sized>(
    model: &M,
    req: &SampleRequest,
    grid: &SigmaGrid,
) -> Result<Sampled> {
    req.check()?;
    let sigma_min = model.boundary_sigma().ok_or_else(|| {
        Error::invalid("multistep consistency sampling needs a consistency-parameterized model")
    })?;
    if req.nfe > grid.len() {
        return Err(Error::invalid(format!(
            "nfe {} exceeds the {} available grid levels",
            req.nfe,
            grid.len()
        )));
    }
    let mut rng = seeded(req.seed);
    let shape = [req.n_samples(), model.data_dim()];
    let start = normal_tensor(&mut rng, &shape);
    let mut x = model.denoise(&start.scale(grid.sigmas[0]), grid.sigmas[0], &req.cond)?;
    for &sigma in &grid.sigmas[1..req.nfe] {
        let z = normal_tensor(&mut rng, &shape);
        let amp = (sigma * sigma - sigma_min * sigma_min).max(0.0).sqrt();
        x.axpy(amp, &z)?;
        x = model.denoise(&x, sigma, &req.cond)?;
    }
    Ok(Sampled { start, samples: x })
}

/// Euler in the transformed frame `xbar = s(r) x(t(r))`:
/// `xbar_{i+1} = xbar_i * s_{i+1}/s_i + s_i (t_{i+1} - t_i) u(xbar_i / s_i, t_i)`.
pub fn bespoke_euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    transform: &BespokeTransform,
    req: &SampleRequest,
) -> Result<Sampled> {
    req.check()?;
    transform.validate()?;
    if req.nfe != transform.n {
        return Err(Error::invalid(format!(
            "transform was fitted for {} steps, requested nfe {}",
            transform.n, req.nfe
        )));
    }
    let mut rng = seeded(req.seed);
    let start = normal_tensor(&mut rng, &[req.n_samples(), model.data_dim()]);
    let samples = bespoke_integrate(model, transform, &start, &req.cond)?;
    Ok(Sampled { start, samples })
}

/// Run the transformed solver from `x0` (the noise at `t = 0`).
pub fn bespoke_integrate<M: VelocityField + ?Sized>(
    model: &M,
    transform: &BespokeTransform,
    x0: &Tensor,
    cond: &Tensor,
) -> Result<Tensor> {
    let (t, s) = (&transform.t_of_r, &transform.s_of_r);
    let mut xbar = x0.scale(s[0]);
    for i in 0..transform.n {
        let x = xbar.scale(1.0 / s[i]);
        let u = model.velocity(&x, t[i], cond)?;
        xbar = xbar.scale(s[i + 1] / s[i]);
        xbar.axpy(s[i] * (t[i + 1] - t[i]), &u)?;
    }
    Ok(xbar.scale(1.0 / s[transform.n]))
}
