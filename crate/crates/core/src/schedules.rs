//! Noise schedules: the DDPM variance-preserving schedule, Karras sigma
//! grids, EDM preconditioning, and the log-normal training sigma sampler.
//!
//! Flow-matching code uses `t = 0` for noise and `t = 1` for data. DDPM
//! indices run the other way (`t = 0` is the least noisy level).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdpmParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DdpmParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DdpmSchedule {
    pub fn new(p: &DdpmParams) -> Result<Self> {
        if p.steps < 1 {
            return Err(Error::invalid("DDPM schedule needs at least one step"));
        }
        if !(0.0 < p.beta_start && p.beta_start <= p.beta_end && p.beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range [{}, {}] must lie in (0, 1)",
                p.beta_start, p.beta_end
            )));
        }
        let t = p.steps;
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    p.beta_start
                } else {
                    p.beta_start + (p.beta_end - p.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// Linear beta schedule from 1e-4 to 2e-2 over `t` steps.
pub fn make_ddpm_schedule(t: usize) -> Result<DdpmSchedule> {
    DdpmSchedule::new(&DdpmParams {
        steps: t,
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmParams {
    /// Estimated from the training data when absent.
    #[serde(default)]
    pub sigma_data: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        Self {
            sigma_data: None,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaGrid {
    pub sigmas: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl SigmaGrid {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// The grid followed by a terminal zero, as consumed by the EDM Euler
    /// sampler.
    pub fn with_terminal_zero(&self) -> Vec<f64> {
        let mut s = self.sigmas.clone();
        s.push(0.0);
        s
    }
}

/// `sigma_i = (smax^(1/rho) + i/(n-1) * (smin^(1/rho) - smax^(1/rho)))^rho`.
pub fn karras_sigma_grid(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<SigmaGrid> {
    if n < 1 {
        return Err(Error::invalid("sigma grid needs at least one level"));
    }
    if !(0.0 < sigma_min && sigma_min < sigma_max) || !sigma_max.is_finite() {
        return Err(Error::invalid(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    let sigmas = if n == 1 {
        vec![sigma_max]
    } else {
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let mut s: Vec<f64> = (0..n)
            .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(rho))
            .collect();
        // Pin the endpoints; the power round-trip is not exact.
        s[0] = sigma_max;
        s[n - 1] = sigma_min;
        s
    };
    Ok(SigmaGrid {
        sigmas,
        sigma_min,
        sigma_max,
        rho,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_in: f64,
    pub c_out: f64,
    pub c_noise: f64,
    pub lambda: f64,
    pub sigma_data: f64,
}

pub fn edm_precond(sigma: f64, sigma_data: f64) -> Result<PrecondCoeffs> {
    if !(sigma_data > 0.0) {
        return Err(Error::invalid(format!("sigma_data must be positive, got {sigma_data}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let norm = (s2 + d2).sqrt();
    Ok(PrecondCoeffs {
        c_skip: d2 / (s2 + d2),
        c_in: 1.0 / norm,
        c_out: sigma * sigma_data / norm,
        c_noise: sigma.ln() / 4.0,
        lambda: (s2 + d2) / (sigma * sigma_data).powi(2),
        sigma_data,
    })
}

/// Boundary-respecting coefficients for consistency models:
/// `c_skip(sigma_min) = 1` and `c_out(sigma_min) = 0` exactly.
pub fn consistency_precond(sigma: f64, sigma_data: f64, sigma_min: f64) -> Result<PrecondCoeffs> {
    let base = edm_precond(sigma, sigma_data)?;
    let d2 = sigma_data * sigma_data;
    let shifted = sigma - sigma_min;
    Ok(PrecondCoeffs {
        c_skip: d2 / (shifted * shifted + d2),
        c_out: sigma_data * shifted / (sigma * sigma + d2).sqrt(),
        ..base
    })
}

/// `exp(p_mean + p_std * z)` with `z` standard normal.
pub fn sample_sigma_lognormal(rng: &mut Rng, p_mean: f64, p_std: f64) -> f64 {
    (p_mean + p_std * normal(rng)).exp()
}
