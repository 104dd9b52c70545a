//! Sample-quality and trajectory metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::{index, normal_tensor, Rng};
use crate::samplers::{flow_trajectory, VelocityField};
use crate::tensor::Tensor;

/// Diagonal jitter added when a covariance is not positive definite.
pub const COV_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianFit {
    /// Sample mean and unbiased (N - 1) covariance of the rows.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2("gaussian_fit")?;
        if n < 2 {
            return Err(Error::invalid("a covariance needs at least two samples"));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "gaussian_fit" });
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub distance: f64,
    /// True when a covariance needed diagonal jitter.
    pub regularized: bool,
}

/// Symmetric PSD square root. Negative eigenvalues from rounding are
/// clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Fréchet distance between Gaussians fitted to two sample sets:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`.
pub fn frechet_detailed(a: &Tensor, b: &Tensor) -> Result<FrechetResult> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "frechet",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    let d = a.cols();
    if a.rows() <= d || b.rows() <= d {
        return Err(Error::invalid(format!(
            "Fréchet distance in {d} dimensions needs more than {d} samples per set, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let fa = GaussianFit::fit(a)?;
    let fb = GaussianFit::fit(b)?;
    let mut regularized = false;
    let mut fix = |c: DMatrix<f64>| {
        if min_eigenvalue(&c) <= 0.0 {
            regularized = true;
            c + DMatrix::identity(d, d) * COV_JITTER
        } else {
            c
        }
    };
    let ca = fix(fa.cov);
    let cb = fix(fb.cov);
    let ra = psd_sqrt(&ca);
    let cross = psd_sqrt(&(&ra * &cb * &ra));
    let mean_term = (&fa.mean - &fb.mean).norm_squared();
    let trace = ca.trace() + cb.trace() - 2.0 * cross.trace();
    let distance = (mean_term + trace).max(0.0);
    if !distance.is_finite() {
        return Err(Error::NonFinite { op: "frechet" });
    }
    Ok(FrechetResult { distance, regularized })
}

pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(frechet_detailed(a, b)?.distance)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityResult {
    pub mean: f64,
    /// Rows where either vector had zero norm.
    pub skipped: usize,
}

/// Mean cosine similarity between paired rows. Zero-norm rows are skipped
/// and counted.
pub fn similarity_score(generated: &Tensor, reference: &Tensor) -> Result<SimilarityResult> {
    generated.expect_same_shape(reference, "similarity")?;
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..generated.rows() {
        let (g, r) = (generated.row(i), reference.row(i));
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ng == 0.0 || nr == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = g.iter().zip(r).map(|(a, b)| a * b).sum();
        total += dot / (ng * nr);
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("every row pair has a zero-norm vector"));
    }
    Ok(SimilarityResult {
        mean: total / used as f64,
        skipped,
    })
}

/// Mean squared Euclidean distance between each start point and the
/// sample it produced.
pub fn transport_cost(start: &Tensor, end: &Tensor) -> Result<f64> {
    start.expect_same_shape(end, "transport_cost")?;
    if start.rows() == 0 {
        return Err(Error::invalid("transport cost of an empty batch"));
    }
    let diff = end.sub(start)?;
    Ok(diff.row_sq_norms().iter().sum::<f64>() / start.rows() as f64)
}

/// Mean over trajectories and `dense_steps` uniform times of
/// `||v(x_t, t) - (x_1 - x_0)||^2`, along Euler trajectories of the field.
/// Zero exactly when every trajectory is a straight line at constant speed.
pub fn straightness<M: VelocityField + ?Sized>(
    model: &M,
    cond_pool: &Tensor,
    n_traj: usize,
    dense_steps: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_traj < 1 || cond_pool.rows() < 1 {
        return Err(Error::invalid("straightness needs trajectories and conditions"));
    }
    let x0 = normal_tensor(rng, &[n_traj, model.data_dim()]);
    let idx: Vec<usize> = (0..n_traj).map(|_| index(rng, cond_pool.rows())).collect();
    let cond = cond_pool.gather_rows(&idx);
    let (states, vels) = flow_trajectory(model, &x0, &cond, dense_steps)?;
    let chord = states[dense_steps].sub(&states[0])?;
    let mut total = 0.0;
    for v in &vels {
        total += v.sub(&chord)?.row_sq_norms().iter().sum::<f64>();
    }
    Ok(total / (n_traj * dense_steps) as f64)
}
