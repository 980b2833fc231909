//! Small dense linear algebra: one-sided Jacobi SVD and helpers.
//!
//! Matrices are row-major `Vec<f64>` with explicit dimensions. The SVD is
//! meant for tall-thin inputs (gradient matrices with three columns,
//! state Jacobians of a few agents).

/// Thin SVD `A = U Σ Vᵀ` of an `rows × cols` matrix with `rows ≥ cols`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// Left singular vectors, one `rows`-vector per column of `U`.
    pub u: Vec<Vec<f64>>,
    /// Singular values in descending order.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `cols × cols` row-major; column `j` pairs with `sigma[j]`.
    pub v: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns are rotated pairwise until every pair is orthogonal to working
/// precision, so the returned `U` is orthonormal independently of the
/// conditioning of `A`. Columns of `U` belonging to zero singular values are
/// left as zero vectors.
pub fn svd_thin(rows: usize, cols: usize, a: &[f64]) -> Svd {
    assert!(rows >= cols, "svd_thin needs rows >= cols ({rows} < {cols})");
    assert_eq!(a.len(), rows * cols);
    let u: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
        .collect();
    svd_columns(u)
}

/// [`svd_thin`] of a matrix given as its columns, all of equal length.
pub fn svd_columns(mut u: Vec<Vec<f64>>) -> Svd {
    let cols = u.len();
    assert!(u.iter().all(|c| c.len() == u[0].len()), "columns differ in length");
    let mut v = vec![0.0; cols * cols];
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }
    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = u.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                for r in 0..cols {
                    let (vp, vq) = (v[r * cols + p], v[r * cols + q]);
                    v[r * cols + p] = c * vp - s * vq;
                    v[r * cols + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    for (col, s) in u.iter_mut().zip(&sigma) {
        if *s > 0.0 {
            for x in col.iter_mut() {
                *x /= s;
            }
        }
    }
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let u_sorted = order.iter().map(|&j| u[j].clone()).collect();
    let mut v_sorted = vec![0.0; cols * cols];
    for (new, &old) in order.iter().enumerate() {
        for r in 0..cols {
            v_sorted[r * cols + new] = v[r * cols + old];
        }
    }
    let sigma_sorted = order.iter().map(|&j| sigma[j]).collect();
    sigma = sigma_sorted;
    Svd {
        u: u_sorted,
        sigma,
        v: v_sorted,
    }
}

/// Largest singular value (spectral norm) of a `rows × cols` matrix.
pub fn spectral_norm(rows: usize, cols: usize, a: &[f64]) -> f64 {
    if rows >= cols {
        svd_thin(rows, cols, a).sigma[0]
    } else {
        let t = transpose(rows, cols, a);
        svd_thin(cols, rows, &t).sigma[0]
    }
}

pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `C = A B` for row-major `A: m×k`, `B: k×n`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += x * b[p * n + j];
            }
        }
    }
    c
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(rows: usize, cols: usize, svd: &Svd) -> Vec<f64> {
        let mut a = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                a[i * cols + j] = (0..cols)
                    .map(|k| svd.u[k][i] * svd.sigma[k] * svd.v[j * cols + k])
                    .sum();
            }
        }
        a
    }

    #[test]
    fn reconstructs_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(rows, cols) in &[(3, 3), (7, 3), (50, 3), (8, 8), (5, 2)] {
            let a: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let svd = svd_thin(rows, cols, &a);
            let back = reconstruct(rows, cols, &svd);
            for (x, y) in a.iter().zip(&back) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            for w in svd.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for p in 0..cols {
                for q in 0..cols {
                    let d = dot(&svd.u[p], &svd.u[q]);
                    let e = if p == q { 1.0 } else { 0.0 };
                    assert!((d - e).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn diagonal_matrix() {
        let a = vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0];
        let svd = svd_thin(3, 3, &a);
        assert_eq!(svd.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn spectral_norm_of_wide_matrix() {
        // [[3, 4]] has norm 5
        assert!((spectral_norm(1, 2, &[3.0, 4.0]) - 5.0).abs() < 1e-14);
        assert!((spectral_norm(2, 2, &identity(2)) - 1.0).abs() < 1e-15);
    }
}
