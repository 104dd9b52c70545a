//! Conditional MLP networks and their three output heads.
//!
//! All heads share one trunk: `[x, embed(tau), cond] -> (Linear, SiLU) x depth
//! -> Linear`. What `tau` is, and how the trunk output is used, depends on
//! the head:
//!
//! | head           | tau           | output                                       |
//! |----------------|---------------|----------------------------------------------|
//! | noise_pred     | `t / T`       | predicted noise                              |
//! | edm_denoiser   | `ln(sigma)/4` | `c_skip x + c_out F(c_in x, ...)`            |
//! | vector_field   | `t`           | velocity                                     |
//!
//! Consistency-distilled students are `edm_denoiser` models whose skip and
//! output scalings vanish/saturate exactly at `sigma_min`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, Tape, Var};
use crate::blob::Blob;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{uniform, Rng};
use crate::schedules::{consistency_precond, edm_precond, DdpmParams, DdpmSchedule, EdmParams, PrecondCoeffs};
use crate::tensor::Tensor;

/// Highest sinusoid frequency of the time embedding.
const MAX_FREQ: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("data_dim", self.data_dim),
            ("cond_dim", self.cond_dim),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("time_embed_dim", self.time_embed_dim),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.cond_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    NoisePred,
    EdmDenoiser,
    VectorField,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::NoisePred => "noise_pred",
            Head::EdmDenoiser => "edm_denoiser",
            Head::VectorField => "vector_field",
        }
    }
}

/// Head together with the schedule constants it was trained under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Parameterization {
    Ddpm(DdpmParams),
    Edm { edm: EdmParams, sigma_data: f64 },
    Consistency { edm: EdmParams, sigma_data: f64 },
    Flow,
}

impl Parameterization {
    pub fn head(&self) -> Head {
        match self {
            Parameterization::Ddpm(_) => Head::NoisePred,
            Parameterization::Edm { .. } | Parameterization::Consistency { .. } => Head::EdmDenoiser,
            Parameterization::Flow => Head::VectorField,
        }
    }

    fn coeffs(&self, sigma: f64) -> Result<PrecondCoeffs> {
        match *self {
            Parameterization::Edm { sigma_data, .. } => edm_precond(sigma, sigma_data),
            Parameterization::Consistency { edm, sigma_data } => {
                consistency_precond(sigma, sigma_data, edm.sigma_min)
            }
            _ => Err(Error::WrongHead {
                expected: Head::EdmDenoiser.name(),
                actual: self.head().name(),
            }),
        }
    }
}

/// Bookkeeping carried from training into the checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default)]
    pub final_loss: Option<f64>,
    #[serde(default)]
    pub convergence_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModel {
    pub method: String,
    pub config: TrunkConfig,
    pub param: Parameterization,
    pub params: ParamSet,
    pub meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    trunk: TrunkConfig,
    parameterization: Parameterization,
    head: Head,
    meta: ModelMeta,
}

/// Sinusoidal embedding of a scalar time feature.
pub fn time_embedding(dim: usize, tau: f64) -> Vec<f64> {
    let freqs = embed_freqs(dim);
    let mut out: Vec<f64> = freqs.iter().map(|f| (tau * f).sin()).collect();
    out.extend(freqs.iter().take(dim / 2).map(|f| (tau * f).cos()));
    out
}

fn embed_freqs(dim: usize) -> Vec<f64> {
    let n_sin = dim - dim / 2;
    (0..n_sin)
        .map(|j| {
            if n_sin == 1 {
                1.0
            } else {
                MAX_FREQ.powf(j as f64 / (n_sin - 1) as f64)
            }
        })
        .collect()
}

impl ConditionalModel {
    pub fn new(
        method: impl Into<String>,
        config: TrunkConfig,
        param: Parameterization,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if let Parameterization::Edm { sigma_data, .. } | Parameterization::Consistency { sigma_data, .. } = param {
            if !(sigma_data > 0.0) {
                return Err(Error::invalid("sigma_data must be positive"));
            }
        }
        let mut params = ParamSet::new();
        let mut fan_in = config.input_dim();
        for l in 0..config.depth {
            init_linear(&mut params, &format!("layer{l}"), fan_in, config.hidden_dim, rng)?;
            fan_in = config.hidden_dim;
        }
        init_linear(&mut params, "out", fan_in, config.data_dim, rng)?;
        Ok(Self {
            method: method.into(),
            config,
            param,
            params,
            meta: ModelMeta::default(),
        })
    }

    pub fn head(&self) -> Head {
        self.param.head()
    }

    pub fn expect_head(&self, head: Head) -> Result<()> {
        if self.head() != head {
            return Err(Error::WrongHead {
                expected: head.name(),
                actual: self.head().name(),
            });
        }
        Ok(())
    }

    pub fn ddpm_schedule(&self) -> Result<DdpmSchedule> {
        match &self.param {
            Parameterization::Ddpm(p) => DdpmSchedule::new(p),
            _ => Err(Error::WrongHead {
                expected: Head::NoisePred.name(),
                actual: self.head().name(),
            }),
        }
    }

    pub fn edm_params(&self) -> Option<(EdmParams, f64)> {
        match self.param {
            Parameterization::Edm { edm, sigma_data }
            | Parameterization::Consistency { edm, sigma_data } => Some((edm, sigma_data)),
            _ => None,
        }
    }

    pub fn is_consistency(&self) -> bool {
        matches!(self.param, Parameterization::Consistency { .. })
    }

    /// Bind this model's weights on `tape` for use as a [`TapeNet`].
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        Bound {
            model: self,
            vars: tape.bind(&self.params, trainable),
        }
    }

    /// The shared MLP trunk. `tau` is `[B, 1]`.
    pub fn trunk_graph(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        tau: Var,
        cond: Var,
    ) -> Result<Var> {
        let e = self.config.time_embed_dim;
        let freqs = embed_freqs(e);
        let n_cos = e / 2;
        let f_sin = tape.constant(Tensor::new(vec![1, freqs.len()], freqs.clone())?);
        let arg = tape.matmul(tau, f_sin)?;
        let mut parts = vec![x, tape.sin(arg)];
        if n_cos > 0 {
            let f_cos = tape.constant(Tensor::new(vec![1, n_cos], freqs[..n_cos].to_vec())?);
            let arg = tape.matmul(tau, f_cos)?;
            parts.push(tape.cos(arg));
        }
        parts.push(cond);
        let mut h = tape.concat(&parts)?;
        for l in 0..self.config.depth {
            h = linear(tape, vars, &format!("layer{l}"), h)?;
            h = tape.silu(h);
        }
        linear(tape, vars, "out", h)
    }

    /// Head output for a batch with one time value per row: DDPM step
    /// indices, EDM sigmas, or flow times, according to the head.
    pub fn head_graph(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        times: &[f64],
        cond: Var,
    ) -> Result<Var> {
        let (b, d) = tape.value(x).dims2("model")?;
        if times.len() != b {
            return Err(Error::shape(
                "model",
                format!("{} time values for a batch of {b}", times.len()),
            ));
        }
        if d != self.config.data_dim {
            return Err(Error::shape(
                "model",
                format!("input has {d} columns, model expects {}", self.config.data_dim),
            ));
        }
        match &self.param {
            Parameterization::Ddpm(p) => {
                let steps = p.steps as f64;
                let tau = tape.constant(Tensor::new(vec![b, 1], times.iter().map(|t| t / steps).collect())?);
                self.trunk_graph(tape, vars, x, tau, cond)
            }
            Parameterization::Flow => {
                let tau = tape.constant(Tensor::new(vec![b, 1], times.to_vec())?);
                self.trunk_graph(tape, vars, x, tau, cond)
            }
            Parameterization::Edm { .. } | Parameterization::Consistency { .. } => {
                let coeffs = times
                    .iter()
                    .map(|&s| self.param.coeffs(s))
                    .collect::<Result<Vec<_>>>()?;
                let expand = |f: &dyn Fn(&PrecondCoeffs) -> f64| {
                    let mut v = Vec::with_capacity(b * d);
                    for c in &coeffs {
                        v.extend(std::iter::repeat_n(f(c), d));
                    }
                    Tensor::new(vec![b, d], v)
                };
                let c_in = tape.constant(expand(&|c| c.c_in)?);
                let c_skip = tape.constant(expand(&|c| c.c_skip)?);
                let c_out = tape.constant(expand(&|c| c.c_out)?);
                let tau = tape.constant(Tensor::new(vec![b, 1], coeffs.iter().map(|c| c.c_noise).collect())?);
                let x_in = tape.mul(x, c_in)?;
                let f = self.trunk_graph(tape, vars, x_in, tau, cond)?;
                let skip = tape.mul(x, c_skip)?;
                let out = tape.mul(f, c_out)?;
                tape.add(skip, out)
            }
        }
    }

    /// Velocity with a differentiable time input `t` of shape `[B, 1]`.
    pub fn velocity_graph(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        t: Var,
        cond: Var,
    ) -> Result<Var> {
        self.expect_head(Head::VectorField)?;
        self.trunk_graph(tape, vars, x, t, cond)
    }

    /// Evaluate the head without recording gradients.
    pub fn eval(&self, x: &Tensor, times: &[f64], cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond.clone());
        let out = self.head_graph(&mut tape, &vars, xv, times, cv)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_noise(&self, x: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let sched_steps = match &self.param {
            Parameterization::Ddpm(p) => p.steps,
            _ => {
                return Err(Error::WrongHead {
                    expected: Head::NoisePred.name(),
                    actual: self.head().name(),
                })
            }
        };
        if t >= sched_steps {
            return Err(Error::invalid(format!("step {t} outside 0..{sched_steps}")));
        }
        self.eval(x, &vec![t as f64; x.rows()], cond)
    }

    pub fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor> {
        self.expect_head(Head::EdmDenoiser)?;
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        self.eval(x, &vec![sigma; x.rows()], cond)
    }

    pub fn velocity(&self, x: &Tensor, t: f64, cond: &Tensor) -> Result<Tensor> {
        self.expect_head(Head::VectorField)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("flow time {t} outside [0, 1]")));
        }
        self.eval(x, &vec![t; x.rows()], cond)
    }

    pub fn to_blob(&self) -> Result<Blob> {
        let header = CheckpointHeader {
            trunk: self.config,
            parameterization: self.param,
            head: self.head(),
            meta: self.meta.clone(),
        };
        let mut blob = Blob::new("checkpoint")
            .with_method(self.method.clone())
            .with_hyperparameters(&header)?;
        for (name, t) in self.params.iter() {
            blob.insert(name, t.clone());
        }
        Ok(blob)
    }

    pub fn from_blob(blob: Blob) -> Result<Self> {
        blob.expect_kind("checkpoint")?;
        let header: CheckpointHeader = blob.hyper()?;
        if header.head != header.parameterization.head() {
            return Err(Error::Format {
                path: None,
                detail: "head tag disagrees with parameterization".into(),
            });
        }
        let method = blob.method.clone().unwrap_or_default();
        let params = ParamSet::from_tensors(blob.tensors)?;
        let fresh = ConditionalModel::new(
            method.clone(),
            header.trunk,
            header.parameterization,
            &mut crate::rng::seeded(0),
        )?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Format {
                        path: None,
                        detail: format!("checkpoint tensor {name} missing or misshapen"),
                    })
                }
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Format {
                path: None,
                detail: "checkpoint has unexpected tensors".into(),
            });
        }
        Ok(Self {
            method,
            config: header.trunk,
            param: header.parameterization,
            params,
            meta: header.meta,
        })
    }
}

fn init_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Tensor::from_fn(&[fan_in, fan_out], |_| (2.0 * uniform(rng) - 1.0) * bound);
    let b = Tensor::from_fn(&[fan_out], |_| (2.0 * uniform(rng) - 1.0) * bound);
    params.insert(format!("{name}.weight"), w)?;
    params.insert(format!("{name}.bias"), b)
}

fn linear(tape: &mut Tape, vars: &ParamVars, name: &str, h: Var) -> Result<Var> {
    let w = vars[&format!("{name}.weight")];
    let b = vars[&format!("{name}.bias")];
    let z = tape.matmul(h, w)?;
    tape.add_bias(z, b)
}

/// A network whose forward pass is recorded on a tape, with one time value
/// per batch row.
pub trait TapeNet {
    fn forward(&self, tape: &mut Tape, x: Var, times: &[f64], cond: Var) -> Result<Var>;
}

/// A model whose weights are bound on a particular tape.
pub struct Bound<'a> {
    pub model: &'a ConditionalModel,
    pub vars: ParamVars,
}

impl TapeNet for Bound<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, times: &[f64], cond: Var) -> Result<Var> {
        self.model.head_graph(tape, &self.vars, x, times, cond)
    }
}

/// Binds a model to variables that were created elsewhere (for example by
/// [`crate::autodiff::forward_backward`]).
pub struct BoundRef<'a> {
    pub model: &'a ConditionalModel,
    pub vars: &'a ParamVars,
}

impl TapeNet for BoundRef<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, times: &[f64], cond: Var) -> Result<Var> {
        self.model.head_graph(tape, self.vars, x, times, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    fn cfg() -> TrunkConfig {
        TrunkConfig {
            data_dim: 3,
            cond_dim: 2,
            hidden_dim: 16,
            depth: 2,
            time_embed_dim: 8,
        }
    }

    fn edm_param() -> Parameterization {
        Parameterization::Edm {
            edm: EdmParams::default(),
            sigma_data: 0.5,
        }
    }

    #[test]
    fn heads_preserve_shape_and_are_pure() {
        let mut rng = seeded(1);
        let x = normal_tensor(&mut rng, &[5, 3]);
        let c = normal_tensor(&mut rng, &[5, 2]);
        let ddpm = ConditionalModel::new("ddpm", cfg(), Parameterization::Ddpm(DdpmParams::default()), &mut rng).unwrap();
        let eps = ddpm.predict_noise(&x, 10, &c).unwrap();
        assert_eq!(eps.shape(), x.shape());
        assert_eq!(eps, ddpm.predict_noise(&x, 10, &c).unwrap());
        let flow = ConditionalModel::new("fm", cfg(), Parameterization::Flow, &mut rng).unwrap();
        let v = flow.velocity(&x, 0.3, &c).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert_eq!(v, flow.velocity(&x, 0.3, &c).unwrap());
    }

    #[test]
    fn wrong_head_and_bad_times_rejected() {
        let mut rng = seeded(2);
        let x = normal_tensor(&mut rng, &[2, 3]);
        let c = Tensor::zeros(&[2, 2]);
        let flow = ConditionalModel::new("fm", cfg(), Parameterization::Flow, &mut rng).unwrap();
        assert!(matches!(flow.predict_noise(&x, 0, &c), Err(Error::WrongHead { .. })));
        assert!(matches!(flow.denoise(&x, 1.0, &c), Err(Error::WrongHead { .. })));
        assert!(flow.velocity(&x, 1.5, &c).is_err());
        let edm = ConditionalModel::new("edm", cfg(), edm_param(), &mut rng).unwrap();
        assert!(edm.denoise(&x, 0.0, &c).is_err());
        let ddpm = ConditionalModel::new("ddpm", cfg(), Parameterization::Ddpm(DdpmParams::default()), &mut rng).unwrap();
        assert!(ddpm.predict_noise(&x, 1000, &c).is_err());
    }

    #[test]
    fn denoiser_with_zero_network_is_skip_scaled_input() {
        let mut rng = seeded(3);
        let mut edm = ConditionalModel::new("edm", cfg(), edm_param(), &mut rng).unwrap();
        let zeroed: std::collections::BTreeMap<_, _> = edm
            .params
            .iter()
            .map(|(k, t)| {
                let t = if k.starts_with("out") { Tensor::zeros(t.shape()) } else { t.clone() };
                (k.to_string(), t)
            })
            .collect();
        edm.params = ParamSet::from_tensors(zeroed).unwrap();
        let x = normal_tensor(&mut rng, &[4, 3]);
        let c = Tensor::zeros(&[4, 2]);
        for sigma in [0.01, 0.5, 3.0, 80.0] {
            let d = edm.denoise(&x, sigma, &c).unwrap();
            // Coefficients recomputed independently of `edm_precond`.
            let sd: f64 = 0.5;
            let c_skip = sd * sd / (sigma * sigma + sd * sd);
            for (a, b) in d.data().iter().zip(x.data()) {
                assert_eq!(*a, b * c_skip);
            }
        }
    }

    #[test]
    fn denoiser_approaches_identity_at_small_sigma() {
        let mut rng = seeded(4);
        let edm = ConditionalModel::new("edm", cfg(), edm_param(), &mut rng).unwrap();
        let x = normal_tensor(&mut rng, &[4, 3]);
        let c = Tensor::zeros(&[4, 2]);
        let d = edm.denoise(&x, 1e-9, &c).unwrap();
        for (a, b) in d.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn consistency_boundary_identity() {
        let mut rng = seeded(5);
        let edm = EdmParams::default();
        let m = ConditionalModel::new(
            "cd",
            cfg(),
            Parameterization::Consistency { edm, sigma_data: 0.5 },
            &mut rng,
        )
        .unwrap();
        let x = normal_tensor(&mut rng, &[6, 3]).scale(10.0);
        let c = normal_tensor(&mut rng, &[6, 2]);
        assert_eq!(m.denoise(&x, edm.sigma_min, &c).unwrap(), x);
    }

    #[test]
    fn time_embedding_injective_on_grids() {
        let dim = 16;
        let mut grids: Vec<Vec<f64>> = vec![
            (0..1000).map(|t| t as f64 / 1000.0).collect(),
            (0..=512).map(|i| i as f64 / 512.0).collect(),
        ];
        let sig = crate::schedules::karras_sigma_grid(18, 0.002, 80.0, 7.0).unwrap();
        grids.push(sig.sigmas.iter().map(|s| s.ln() / 4.0).collect());
        for g in grids {
            let embs: Vec<Vec<f64>> = g.iter().map(|&t| time_embedding(dim, t)).collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(d > 1e-12, "collision at {} vs {}", g[i], g[j]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(6);
        let mut m = ConditionalModel::new("cd", cfg(), Parameterization::Consistency { edm: EdmParams::default(), sigma_data: 0.7 }, &mut rng).unwrap();
        m.meta.final_loss = Some(0.25);
        let bytes = m.to_blob().unwrap().to_bytes().unwrap();
        let back = ConditionalModel::from_blob(Blob::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.param, m.param);
        assert_eq!(back.head(), Head::EdmDenoiser);
        assert_eq!(back.method, "cd");
        assert_eq!(back.meta, m.meta);
        for (name, t) in m.params.iter() {
            assert_eq!(back.params.get(name).unwrap(), t);
        }
    }
}
