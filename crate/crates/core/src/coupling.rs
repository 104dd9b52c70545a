//! Exact minibatch couplings between data and noise rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Data row `i` is paired with noise row `permutation[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub batch_size: usize,
    pub permutation: Vec<usize>,
    /// Mean squared Euclidean distance over matched pairs.
    pub cost: f64,
}

impl Coupling {
    pub fn identity(y: &Tensor, eps: &Tensor) -> Result<Self> {
        let c = cost_matrix(y, eps)?;
        let n = y.rows();
        let permutation: Vec<usize> = (0..n).collect();
        Ok(Self {
            batch_size: n,
            cost: (0..n).map(|i| c[i * n + i]).sum::<f64>() / n as f64,
            permutation,
        })
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.batch_size];
        self.permutation.len() == self.batch_size
            && self
                .permutation
                .iter()
                .all(|&j| j < self.batch_size && !std::mem::replace(&mut seen[j], true))
    }
}

/// Row-major `n x n` matrix of squared distances `||y_i - eps_j||^2`.
pub fn cost_matrix(y: &Tensor, eps: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = y.dims2("cost_matrix")?;
    if eps.shape() != y.shape() {
        return Err(Error::shape(
            "cost_matrix",
            format!("data {:?} vs noise {:?}", y.shape(), eps.shape()),
        ));
    }
    if n == 0 || d == 0 {
        return Err(Error::invalid("coupling needs a non-empty batch"));
    }
    let mut c = Vec::with_capacity(n * n);
    for i in 0..n {
        let yi = y.row(i);
        for j in 0..n {
            c.push(yi.iter().zip(eps.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    if c.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite { op: "cost_matrix" });
    }
    Ok(c)
}

/// Minimum-cost assignment for a square cost matrix (shortest augmenting
/// paths with potentials, O(n^3)). Returns `assignment[row] = column`.
/// Ties are broken towards the lowest column index, so the result is
/// deterministic.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape("assignment", format!("{} entries for n = {n}", cost.len())));
    }
    // 1-based arrays; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == 0 {
                return Err(Error::NonFinite { op: "assignment" });
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact optimal-transport coupling of a minibatch under squared Euclidean
/// cost.
pub fn optimal_coupling(y: &Tensor, eps: &Tensor) -> Result<Coupling> {
    let n = y.rows();
    let c = cost_matrix(y, eps)?;
    let permutation = solve_assignment(&c, n)?;
    let cost = permutation.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>() / n as f64;
    Ok(Coupling {
        batch_size: n,
        permutation,
        cost,
    })
}

/// Mean squared distance between `y[i]` and `eps[perm[i]]`.
pub fn coupling_cost(y: &Tensor, eps: &Tensor, perm: &[usize]) -> Result<f64> {
    let n = y.rows();
    let c = Coupling {
        batch_size: n,
        permutation: perm.to_vec(),
        cost: 0.0,
    };
    if !c.is_permutation() {
        return Err(Error::invalid(format!("not a permutation of 0..{n}: {perm:?}")));
    }
    let m = cost_matrix(y, eps)?;
    Ok(perm.iter().enumerate().map(|(i, &j)| m[i * n + j]).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    fn brute_force(c: &[f64], n: usize) -> f64 {
        fn rec(c: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(c, n, row + 1, used, acc + c[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn single_row_and_identical_sets() {
        let y = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let e = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let c = optimal_coupling(&y, &e).unwrap();
        assert_eq!(c.permutation, vec![0]);
        assert_eq!(c.cost, 5.0);

        let y = Tensor::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let e = Tensor::from_rows(&[vec![9.0], vec![1.0]]).unwrap();
        let c = optimal_coupling(&y, &e).unwrap();
        assert_eq!(c.permutation, vec![1, 0]);
        assert_eq!(c.cost, 1.0);

        let mut rng = seeded(3);
        let pts = normal_tensor(&mut rng, &[12, 3]);
        let shuffled: Vec<usize> = vec![4, 7, 0, 11, 2, 9, 1, 5, 3, 10, 8, 6];
        let e = pts.gather_rows(&shuffled);
        let c = optimal_coupling(&pts, &e).unwrap();
        assert_eq!(c.cost, 0.0);
        for (i, &j) in c.permutation.iter().enumerate() {
            assert_eq!(shuffled[j], i);
        }
    }

    #[test]
    fn identical_rows_tie_break_is_deterministic() {
        let y = Tensor::zeros(&[5, 2]);
        let e = Tensor::zeros(&[5, 2]);
        let a = optimal_coupling(&y, &e).unwrap();
        let b = optimal_coupling(&y, &e).unwrap();
        assert_eq!(a, b);
        assert!(a.is_permutation());
    }

    #[test]
    fn errors() {
        assert!(optimal_coupling(&Tensor::zeros(&[3, 2]), &Tensor::zeros(&[4, 2])).is_err());
        assert!(optimal_coupling(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])).is_err());
        let mut y = Tensor::zeros(&[2, 1]);
        y.data_mut()[0] = f64::NAN;
        assert!(optimal_coupling(&y, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn coupling_cost_matches_direct_accumulation() {
        let mut rng = seeded(8);
        let y = normal_tensor(&mut rng, &[7, 3]);
        let e = normal_tensor(&mut rng, &[7, 3]);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let mut direct = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            for k in 0..3 {
                direct += (y.row(i)[k] - e.row(j)[k]).powi(2);
            }
        }
        direct /= 7.0;
        assert!((coupling_cost(&y, &e, &perm).unwrap() - direct).abs() < 1e-12);
        assert_eq!(coupling_cost(&y, &y, &[0, 1, 2, 3, 4, 5, 6]).unwrap(), 0.0);
        assert!(coupling_cost(&y, &e, &[0, 0, 1, 2, 3, 4, 5]).is_err());
        assert!(coupling_cost(&y, &e, &[0, 1]).is_err());
        let c = optimal_coupling(&y, &e).unwrap();
        assert_eq!(coupling_cost(&y, &e, &c.permutation).unwrap(), c.cost);
    }

    proptest! {
        #[test]
        fn matches_brute_force(n in 1usize..=6, d in 1usize..4, seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let y = normal_tensor(&mut rng, &[n, d]);
            let e = normal_tensor(&mut rng, &[n, d]);
            let c = optimal_coupling(&y, &e).unwrap();
            prop_assert!(c.is_permutation());
            let best = brute_force(&cost_matrix(&y, &e).unwrap(), n);
            prop_assert!((c.cost * n as f64 - best).abs() <= 1e-9 * best.max(1.0));
            let id = Coupling::identity(&y, &e).unwrap();
            prop_assert!(c.cost <= id.cost + 1e-12);
        }
    }
}
