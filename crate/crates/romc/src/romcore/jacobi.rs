//! Cyclic Jacobi eigensolver for symmetric matrices, in f64.

/// Diagonalize a symmetric `n x n` matrix stored row-major in `a`.
///
/// Returns `(eigenvalues, vectors)` where `vectors[i*n + j]` is component
/// `i` of eigenvector `j` (column-eigenvector layout), both unsorted.
/// Convergence: max off-diagonal magnitude <= `rel_tol` times the largest
/// diagonal magnitude. Fails with the sweep count if `max_sweeps` is hit.
pub(crate) fn jacobi_eig(
    a: &mut [f64],
    n: usize,
    max_sweeps: usize,
    rel_tol: f64,
) -> Result<(Vec<f64>, Vec<f64>), usize> {
    debug_assert_eq!(a.len(), n * n);
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return Ok(((0..n).map(|i| a[i * n + i]).collect(), v));
    }

    for _sweep in 0..max_sweeps {
        let mut off_max = 0.0f64;
        let mut diag_max = 0.0f64;
        for p in 0..n {
            diag_max = diag_max.max(a[p * n + p].abs());
            for q in (p + 1)..n {
                off_max = off_max.max(a[p * n + q].abs());
            }
        }
        if off_max <= rel_tol * diag_max {
            let eigvals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((eigvals, v));
        }

        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e10 {
                    // rotation angle ~ 1/(2 theta); avoids theta^2 overflow
                    1.0 / (2.0 * theta)
                } else {
                    let s = theta.signum();
                    s / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    let new_p = aip - s * (aiq + aip * tau);
                    let new_q = aiq + s * (aip - aiq * tau);
                    a[i * n + p] = new_p;
                    a[p * n + i] = new_p;
                    a[i * n + q] = new_q;
                    a[q * n + i] = new_q;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip - s * (viq + vip * tau);
                    v[i * n + q] = viq + s * (vip - viq * tau);
                }
            }
        }
    }
    Err(max_sweeps)
}
