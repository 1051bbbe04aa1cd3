//! The reduced-order-model core: activation second moments, symmetric
//! eigendecomposition in descending order, and re-parameterization of a
//! dense layer `W` into the factor pair `W1 = Vrᵀ`, `W2 = Vr·W` built from
//! the top principal components of the layer's output activations.
//!
//! The second moment is the uncentered Gram matrix `YᵀY/N`: the factor
//! form has no bias term, so a mean-centered variant could not be
//! re-absorbed into the two matrices.

mod jacobi;

use crate::error::{Error, Result};
use crate::tensorstore::Matrix;

/// Relative off-diagonal threshold for Jacobi convergence.
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Input asymmetry tolerated by `eig_sym_desc` (max-abs).
const SYMMETRY_TOL: f64 = 1e-6;

/// Negative eigenvalues no larger than this fraction of lambda_max are
/// round-off from the f32-stored input and get clamped to zero. Storing a
/// rank-deficient Gram matrix in f32 perturbs its zero eigenvalues by up
/// to `d * eps_f32 / 2 * lambda_max`.
fn clamp_tolerance(d: usize) -> f64 {
    (d as f64 * f32::EPSILON as f64).max(1e-8)
}

/// Eigendecomposition of a positive semi-definite second moment.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Row `j` is the unit eigenvector for `eigenvalues[j]`.
    pub components: Matrix,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Top-r component rows.
    pub fn top_components(&self, r: usize) -> Matrix {
        let d = self.components.cols();
        Matrix::from_vec_unchecked(r, d, self.components.data()[..r * d].to_vec())
    }

    pub fn total_energy(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// One layer re-parameterized as `W ≈ W1 · W2`.
#[derive(Clone, Debug)]
pub struct DecompositionResult {
    /// `d_out x r`, orthonormal columns (`= Vrᵀ`).
    pub w1: Matrix,
    /// `r x d_in` (`= Vr · W`).
    pub w2: Matrix,
    pub rank: usize,
    /// Sum of the kept eigenvalues.
    pub retained_energy: f64,
    /// Sum of the truncated eigenvalues.
    pub discarded_energy: f64,
    /// Number of activation rows the spectrum was estimated from.
    pub sample_count: usize,
}

/// Uncentered second moment `S = YᵀY / N` of `N x d` activations.
///
/// Accumulates in f64 and mirrors the upper triangle, so the result is
/// exactly symmetric.
pub fn second_moment(activations: &Matrix) -> Result<Matrix> {
    let n = activations.rows();
    let d = activations.cols();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let mut acc = vec![0.0f64; d * d];
    for i in 0..n {
        let row = activations.row(i);
        for j in 0..d {
            let yj = row[j] as f64;
            for l in j..d {
                acc[j * d + l] += yj * row[l] as f64;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut data = vec![0.0f32; d * d];
    for j in 0..d {
        for l in j..d {
            let v = (acc[j * d + l] * inv_n) as f32;
            data[j * d + l] = v;
            data[l * d + j] = v;
        }
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("second moment overflowed f32".into()));
    }
    Ok(Matrix::from_vec_unchecked(d, d, data))
}

/// Eigendecomposition of a symmetric PSD matrix, eigenvalues descending.
///
/// Ties keep their pre-sort order; each eigenvector is sign-normalized so
/// its largest-magnitude component is non-negative. Eigenvalues within
/// round-off below zero are clamped; anything more negative is an error
/// since second moments are PSD by construction.
pub fn eig_sym_desc(s: &Matrix) -> Result<Spectrum> {
    let d = s.rows();
    if d != s.cols() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let mut asym = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            asym = asym.max((s.get(i, j) as f64 - s.get(j, i) as f64).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(Error::Precondition(format!(
            "matrix asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e}"
        )));
    }

    let mut a = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            // symmetrize residual asymmetry within tolerance
            a[i * d + j] = (s.get(i, j) as f64 + s.get(j, i) as f64) * 0.5;
        }
    }
    let (vals, vecs) = jacobi::jacobi_eig(&mut a, d, JACOBI_MAX_SWEEPS, JACOBI_TOL)
        .map_err(|sweeps| {
            Error::Numerical(format!(
                "jacobi eigensolver did not converge after {sweeps} sweeps"
            ))
        })?;

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .partial_cmp(&vals[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });

    let lambda_max = order.first().map(|&i| vals[i]).unwrap_or(0.0).max(0.0);
    let clamp_floor = -clamp_tolerance(d) * lambda_max;
    let mut eigenvalues = Vec::with_capacity(d);
    for &i in &order {
        let v = vals[i];
        if v < clamp_floor {
            return Err(Error::Numerical(format!(
                "eigenvalue {v:.6e} below the PSD round-off floor {clamp_floor:.6e}"
            )));
        }
        eigenvalues.push(v.max(0.0));
    }

    let mut components = vec![0.0f32; d * d];
    for (row, &k) in order.iter().enumerate() {
        // column k of vecs is the eigenvector
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for i in 0..d {
            let mag = vecs[i * d + k].abs();
            if mag > best_mag {
                best_mag = mag;
                best = i;
            }
        }
        let flip = if vecs[best * d + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[row * d + i] = (vecs[i * d + k] * flip) as f32;
        }
    }

    Ok(Spectrum {
        eigenvalues,
        components: Matrix::from_vec_unchecked(d, d, components),
    })
}

/// Re-parameterize a dense layer from its calibration-time outputs.
///
/// Computes `Y = inputs · Wᵀ`, the spectrum of `YᵀY/N`, and returns the
/// factors built from the top-`rank` components.
pub fn decompose_layer(w: &Matrix, inputs: &Matrix, rank: usize) -> Result<DecompositionResult> {
    let d_out = w.rows();
    if rank < 1 || rank > d_out {
        return Err(Error::Rank(format!(
            "rank {rank} not in 1..={d_out} for a {}x{} layer",
            w.rows(),
            w.cols()
        )));
    }
    if inputs.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "inputs are {}x{} but the layer consumes width {}",
            inputs.rows(),
            inputs.cols(),
            w.cols()
        )));
    }
    if inputs.rows() == 0 {
        return Err(Error::EmptySample);
    }
    if !inputs.is_finite() {
        return Err(Error::Numerical("activations contain non-finite values".into()));
    }

    let outputs = inputs.matmul_nt(w)?;
    if !outputs.is_finite() {
        return Err(Error::Numerical("layer outputs overflowed f32".into()));
    }
    let moment = second_moment(&outputs)?;
    let spectrum = eig_sym_desc(&moment)?;

    let v_r = spectrum.top_components(rank);
    let w1 = v_r.transpose();
    let w2 = v_r.matmul(w)?;
    let retained_energy: f64 = spectrum.eigenvalues[..rank].iter().sum();
    let discarded_energy: f64 = spectrum.eigenvalues[rank..].iter().sum();

    Ok(DecompositionResult {
        w1,
        w2,
        rank,
        retained_energy,
        discarded_energy,
        sample_count: inputs.rows(),
    })
}

/// Squared Frobenius error `‖inputs·Wᵀ − inputs·W2ᵀ·W1ᵀ‖²`.
///
/// The factor products run in f64 so the value tracks the spectral
/// identity `N · discarded_energy` as closely as the f32 factors allow.
pub fn reconstruction_error(
    result: &DecompositionResult,
    w: &Matrix,
    inputs: &Matrix,
) -> Result<f64> {
    if inputs.cols() != w.cols() {
        return Err(Error::Dimension(format!(
            "inputs are {}x{} but the layer consumes width {}",
            inputs.rows(),
            inputs.cols(),
            w.cols()
        )));
    }
    if result.w1.rows() != w.rows()
        || result.w1.cols() != result.rank
        || result.w2.rows() != result.rank
        || result.w2.cols() != w.cols()
    {
        return Err(Error::Dimension(format!(
            "factors {}x{} and {}x{} do not fit a {}x{} layer",
            result.w1.rows(),
            result.w1.cols(),
            result.w2.rows(),
            result.w2.cols(),
            w.rows(),
            w.cols()
        )));
    }

    let outputs = inputs.matmul_nt(w)?;
    let n = inputs.rows();
    let r = result.rank;
    let d_out = w.rows();
    let d_in = w.cols();

    let mut err = 0.0f64;
    let mut projected = vec![0.0f64; r];
    for i in 0..n {
        let x = inputs.row(i);
        for (j, slot) in projected.iter_mut().enumerate() {
            let w2_row = result.w2.row(j);
            let mut acc = 0.0f64;
            for t in 0..d_in {
                acc += x[t] as f64 * w2_row[t] as f64;
            }
            *slot = acc;
        }
        let y = outputs.row(i);
        for l in 0..d_out {
            let mut yhat = 0.0f64;
            let w1_row = result.w1.row(l);
            for j in 0..r {
                yhat += projected[j] * w1_row[j] as f64;
            }
            let diff = y[l] as f64 - yhat;
            err += diff * diff;
        }
    }
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f32 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 33) as f32 / (1u64 << 31) as f32) - 1.0
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| lcg(&mut s))
    }

    #[test]
    fn second_moment_of_identity() {
        let s = second_moment(&Matrix::identity(2)).unwrap();
        assert_eq!(s.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn second_moment_of_ones() {
        let y = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let s = second_moment(&y).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_moment_matches_naive_accumulation() {
        let y = random_matrix(64, 8, 7);
        let s = second_moment(&y).unwrap();
        // independent route: plain double loop over all pairs
        for j in 0..8 {
            for l in 0..8 {
                let mut acc = 0.0f64;
                for i in 0..64 {
                    acc += y.get(i, j) as f64 * y.get(i, l) as f64;
                }
                let expect = acc / 64.0;
                let got = s.get(j, l) as f64;
                assert!(
                    (got - expect).abs() <= 1e-6 * expect.abs().max(1e-12),
                    "entry ({j},{l}): {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn second_moment_rejects_empty_input() {
        let y = Matrix::zeros(0, 4);
        assert!(matches!(second_moment(&y), Err(Error::EmptySample)));
    }

    #[test]
    fn eig_of_diagonal_matrix() {
        let s = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = eig_sym_desc(&s).unwrap();
        assert_eq!(spec.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(spec.components.row(0), &[1.0, 0.0]);
        assert_eq!(spec.components.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn eig_of_two_by_two_by_characteristic_polynomial() {
        // [[2,1],[1,2]]: roots of (2-l)^2 - 1 are 3 and 1,
        // eigenvectors (1,1)/sqrt(2) and (1,-1)/sqrt(2)
        let s = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let spec = eig_sym_desc(&s).unwrap();
        let isq = std::f32::consts::FRAC_1_SQRT_2;
        assert!((spec.eigenvalues[0] - 3.0).abs() < 1e-10);
        assert!((spec.eigenvalues[1] - 1.0).abs() < 1e-10);
        for (got, expect) in spec.components.row(0).iter().zip([isq, isq]) {
            assert!((got - expect).abs() < 1e-6);
        }
        for (got, expect) in spec.components.row(1).iter().zip([isq, -isq]) {
            assert!((got - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn eig_reconstructs_random_psd_matrix() {
        let b = random_matrix(24, 16, 3);
        let s = second_moment(&b).unwrap();
        let spec = eig_sym_desc(&s).unwrap();
        let d = 16;
        let mut max_diff = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0f64;
                for k in 0..d {
                    acc += spec.eigenvalues[k]
                        * spec.components.get(k, i) as f64
                        * spec.components.get(k, j) as f64;
                }
                max_diff = max_diff.max((acc - s.get(i, j) as f64).abs());
            }
        }
        assert!(max_diff < 1e-5, "reconstruction deviation {max_diff}");
    }

    #[test]
    fn eig_rows_are_orthonormal_and_diagonalizing() {
        let y = random_matrix(40, 12, 11);
        let s = second_moment(&y).unwrap();
        let spec = eig_sym_desc(&s).unwrap();
        let d = 12;
        let v = &spec.components;
        for p in 0..d {
            for q in 0..d {
                let mut dot = 0.0f64;
                for i in 0..d {
                    dot += v.get(p, i) as f64 * v.get(q, i) as f64;
                }
                let expect = if p == q { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-5);
            }
        }
        // V S Vᵀ diagonal within 1e-4 of lambda_max off the diagonal
        let lambda_max = spec.eigenvalues[0];
        for p in 0..d {
            for q in 0..d {
                if p == q {
                    continue;
                }
                let mut acc = 0.0f64;
                for i in 0..d {
                    for j in 0..d {
                        acc += v.get(p, i) as f64 * s.get(i, j) as f64 * v.get(q, j) as f64;
                    }
                }
                assert!(acc.abs() <= 1e-4 * lambda_max.max(1e-12));
            }
        }
    }

    #[test]
    fn eig_rejects_asymmetric_input() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(matches!(eig_sym_desc(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn eig_rejects_indefinite_input() {
        let s = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(eig_sym_desc(&s), Err(Error::Numerical(_))));
    }

    #[test]
    fn eig_sign_convention_fixes_orientation() {
        let y = random_matrix(30, 6, 5);
        let s = second_moment(&y).unwrap();
        let spec = eig_sym_desc(&s).unwrap();
        for r in 0..6 {
            let row = spec.components.row(r);
            let mut best = 0;
            for i in 1..6 {
                if row[i].abs() > row[best].abs() {
                    best = i;
                }
            }
            assert!(row[best] >= 0.0);
        }
    }

    #[test]
    fn full_rank_decomposition_reproduces_the_layer() {
        let w = random_matrix(8, 6, 21);
        let inputs = random_matrix(50, 6, 22);
        let res = decompose_layer(&w, &inputs, 8).unwrap();
        let product = res.w1.matmul(&res.w2).unwrap();
        assert!(product.max_abs_diff(&w) < 1e-4);
        assert!(res.discarded_energy.abs() < 1e-6 * res.retained_energy.max(1.0));
        let err = reconstruction_error(&res, &w, &inputs).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn rank_one_activations_are_reconstructed_exactly_at_r1() {
        // every input row is a multiple of one direction
        let base: Vec<f32> = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let mut seed = 4u64;
        let inputs = Matrix::from_fn(40, 6, |_, j| {
            let _ = j;
            0.0
        });
        let mut data = inputs.data().to_vec();
        for i in 0..40 {
            let scale = lcg(&mut seed) * 3.0;
            for j in 0..6 {
                data[i * 6 + j] = scale * base[j];
            }
        }
        let inputs = Matrix::from_vec(40, 6, data).unwrap();
        let w = random_matrix(5, 6, 23);
        let res = decompose_layer(&w, &inputs, 1).unwrap();
        let err = reconstruction_error(&res, &w, &inputs).unwrap();
        assert!(err < 1e-6, "rank-1 manifold error {err}");
    }

    #[test]
    fn reconstruction_error_matches_discarded_energy() {
        let w = random_matrix(8, 6, 31);
        let inputs = random_matrix(100, 6, 32);
        let res = decompose_layer(&w, &inputs, 3).unwrap();
        let err = reconstruction_error(&res, &w, &inputs).unwrap();
        let expect = res.sample_count as f64 * res.discarded_energy;
        assert!(
            (err - expect).abs() <= 1e-4 * expect.abs().max(1e-12),
            "{err} vs {expect}"
        );
    }

    #[test]
    fn reconstruction_error_is_monotone_in_rank() {
        let w = random_matrix(8, 8, 41);
        let inputs = random_matrix(60, 8, 42);
        let mut prev = f64::INFINITY;
        for r in 1..=8 {
            let res = decompose_layer(&w, &inputs, r).unwrap();
            let err = reconstruction_error(&res, &w, &inputs).unwrap();
            assert!(
                err <= prev * (1.0 + 1e-9) + 1e-9,
                "error grew from {prev} to {err} at rank {r}"
            );
            prev = err;
        }
    }

    #[test]
    fn projector_is_idempotent_and_trace_energy_balances() {
        let w = random_matrix(10, 7, 51);
        let inputs = random_matrix(80, 7, 52);
        let res = decompose_layer(&w, &inputs, 4).unwrap();

        // P = w1 w1ᵀ must satisfy P P = P
        let p = res.w1.matmul(&res.w1.transpose()).unwrap();
        let pp = p.matmul(&p).unwrap();
        assert!(pp.max_abs_diff(&p) < 1e-4);

        let y = inputs.matmul_nt(&w).unwrap();
        let s = second_moment(&y).unwrap();
        let trace: f64 = (0..10).map(|i| s.get(i, i) as f64).sum();
        let energy = res.retained_energy + res.discarded_energy;
        assert!((trace - energy).abs() <= 1e-5 * trace.abs().max(1e-12));
    }

    #[test]
    fn projection_identity_holds() {
        // w1 w2 = Vrᵀ Vr w within 1e-4 max-abs
        let w = random_matrix(9, 5, 61);
        let inputs = random_matrix(70, 5, 62);
        let res = decompose_layer(&w, &inputs, 3).unwrap();
        let y = inputs.matmul_nt(&w).unwrap();
        let spec = eig_sym_desc(&second_moment(&y).unwrap()).unwrap();
        let v_r = spec.top_components(3);
        let projected_w = v_r.transpose().matmul(&v_r.matmul(&w).unwrap()).unwrap();
        let factor_product = res.w1.matmul(&res.w2).unwrap();
        assert!(factor_product.max_abs_diff(&projected_w) < 1e-4);
    }

    #[test]
    fn rank_out_of_range_is_rejected() {
        let w = random_matrix(4, 4, 71);
        let inputs = random_matrix(10, 4, 72);
        assert!(matches!(decompose_layer(&w, &inputs, 0), Err(Error::Rank(_))));
        assert!(matches!(decompose_layer(&w, &inputs, 5), Err(Error::Rank(_))));
    }

    #[test]
    fn orthogonal_input_rotation_leaves_the_spectrum_unchanged() {
        // Householder reflection Q = I - 2uuᵀ is orthogonal and symmetric
        let d_in = 6;
        let mut seed = 81u64;
        let mut u: Vec<f64> = (0..d_in).map(|_| lcg(&mut seed) as f64).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let q = Matrix::from_fn(d_in, d_in, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            (delta - 2.0 * u[i] * u[j]) as f32
        });

        let w = random_matrix(7, d_in, 82);
        let inputs = random_matrix(90, d_in, 83);
        let rotated_inputs = inputs.matmul(&q).unwrap();
        let rotated_w = w.matmul(&q.transpose()).unwrap();

        let spec_a =
            eig_sym_desc(&second_moment(&inputs.matmul_nt(&w).unwrap()).unwrap()).unwrap();
        let spec_b = eig_sym_desc(
            &second_moment(&rotated_inputs.matmul_nt(&rotated_w).unwrap()).unwrap(),
        )
        .unwrap();
        // the floor absorbs f32 round-off on the rank-deficient zeros
        let floor = 1e-6 * spec_a.eigenvalues[0];
        for (a, b) in spec_a.eigenvalues.iter().zip(&spec_b.eigenvalues) {
            assert!(
                (a - b).abs() <= 1e-5 * a.abs().max(*b) + floor,
                "eigenvalue drift {a} vs {b}"
            );
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let w = random_matrix(8, 6, 91);
        let inputs = random_matrix(64, 6, 92);
        let a = decompose_layer(&w, &inputs, 3).unwrap();
        let b = decompose_layer(&w, &inputs, 3).unwrap();
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);
        assert_eq!(a.retained_energy.to_bits(), b.retained_energy.to_bits());
        assert_eq!(a.discarded_energy.to_bits(), b.discarded_energy.to_bits());
    }
}
