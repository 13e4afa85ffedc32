//! Small dense symmetric linear algebra used by the metrics and DSP modules.

use ndarray::{Array1, Array2};

/// Eigendecomposition of a real symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors stored as columns,
/// so `a ≈ v · diag(λ) · vᵀ`. Eigenvalues are sorted ascending. Input is
/// symmetrized first; intended for the small (≤ 64×64) matrices that show up
/// in Fréchet-distance square roots and filterbank pseudo-inverses.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    let mut v = Array2::eye(n);
    if n <= 1 {
        return (m.diag().to_owned(), v);
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                // Stable rotation: t = sgn(tau) / (|tau| + sqrt(1 + tau²))
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut eig: Vec<(f64, usize)> = m.diag().iter().cloned().zip(0..n).collect();
    eig.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let vals = Array1::from_iter(eig.iter().map(|(l, _)| *l));
    let mut vecs = Array2::zeros((n, n));
    for (col, (_, src)) in eig.iter().enumerate() {
        for row in 0..n {
            vecs[(row, col)] = v[(row, *src)];
        }
    }
    (vals, vecs)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `f(A)` for symmetric `A` via eigendecomposition, applying `f` to the
/// spectrum. Used for matrix square roots and pseudo-inverses.
pub fn symmetric_matfn(a: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let (vals, vecs) = symmetric_eigen(a);
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let fj = f(vals[j]);
        for i in 0..n {
            scaled[(i, j)] *= fj;
        }
    }
    scaled.dot(&vecs.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{randn_mat, seeded_rng};

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = seeded_rng(11);
        for _ in 0..5 {
            let g = randn_mat::<f64>(&mut rng, 8, 8);
            let a = g.dot(&g.t()); // symmetric PSD
            let (vals, vecs) = symmetric_eigen(&a);
            let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
            for (x, y) in a.iter().zip(recon.iter()) {
                assert!((x - y).abs() < 1e-9, "reconstruction off: {x} vs {y}");
            }
            // Orthonormal columns
            let gram = vecs.t().dot(&vecs);
            for i in 0..8 {
                for j in 0..8 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigen_diagonal_is_exact() {
        let a = Array2::from_diag(&Array1::from(vec![3.0, -1.0, 2.0]));
        let (vals, _) = symmetric_eigen(&a);
        assert_eq!(vals.to_vec(), vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn matfn_sqrt_squares_back() {
        let mut rng = seeded_rng(5);
        let g = randn_mat::<f64>(&mut rng, 6, 6);
        let a = g.dot(&g.t());
        let r = symmetric_matfn(&a, |l| l.max(0.0).sqrt());
        let back = r.dot(&r);
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}
