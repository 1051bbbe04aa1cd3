//! Forward-pass primitives: RMSNorm, rotary embedding, causal attention,
//! SwiGLU. All reductions accumulate in f64.

use crate::tensorstore::Matrix;

pub(crate) fn rms_norm(x: &Matrix, gain: &[f32], eps: f32) -> Matrix {
    debug_assert_eq!(x.cols(), gain.len());
    let d = x.cols();
    let mut out = vec![0.0f32; x.rows() * d];
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean_sq = row.iter().map(|v| *v as f64 * *v as f64).sum::<f64>() / d as f64;
        let inv = 1.0 / (mean_sq + eps as f64).sqrt();
        let out_row = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            out_row[j] = (row[j] as f64 * inv) as f32 * gain[j];
        }
    }
    Matrix::from_vec_unchecked(x.rows(), d, out)
}

/// Rotate adjacent pairs within each head by a position-dependent angle.
/// Rows are flattened `(batch, position)`; the position restarts every
/// `seq` rows.
pub(crate) fn apply_rope(x: &mut Matrix, seq: usize, heads: usize, theta: f32) {
    let d = x.cols();
    let head_dim = d / heads;
    debug_assert_eq!(head_dim % 2, 0);
    let rows = x.rows();
    let data = x.data_mut();
    for row in 0..rows {
        let pos = (row % seq) as f64;
        let base = row * d;
        for h in 0..heads {
            let head_base = base + h * head_dim;
            for pair in 0..head_dim / 2 {
                let freq = (theta as f64).powf(-2.0 * pair as f64 / head_dim as f64);
                let angle = pos * freq;
                let (sin, cos) = angle.sin_cos();
                let i = head_base + 2 * pair;
                let x0 = data[i] as f64;
                let x1 = data[i + 1] as f64;
                data[i] = (x0 * cos - x1 * sin) as f32;
                data[i + 1] = (x0 * sin + x1 * cos) as f32;
            }
        }
    }
}

/// Numerically stable softmax over the causal prefix of one score row.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Multi-head causal attention over flattened `(batch, position)` rows.
/// Returns the concatenated per-head context, same shape as the inputs.
pub(crate) fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Matrix {
    let d = q.cols();
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0f32; q.rows() * d];
    let mut scores = vec![0.0f64; seq];
    let mut ctx = vec![0.0f64; head_dim];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * head_dim;
            for i in 0..seq {
                let qi = &q.row(b * seq + i)[col..col + head_dim];
                for (j, slot) in scores[..=i].iter_mut().enumerate() {
                    let kj = &k.row(b * seq + j)[col..col + head_dim];
                    let mut dot = 0.0f64;
                    for t in 0..head_dim {
                        dot += qi[t] as f64 * kj[t] as f64;
                    }
                    *slot = dot * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                ctx.iter_mut().for_each(|c| *c = 0.0);
                for j in 0..=i {
                    let w = scores[j];
                    let vj = &v.row(b * seq + j)[col..col + head_dim];
                    for t in 0..head_dim {
                        ctx[t] += w * vj[t] as f64;
                    }
                }
                let out_row = &mut out[(b * seq + i) * d + col..(b * seq + i) * d + col + head_dim];
                for t in 0..head_dim {
                    out_row[t] = ctx[t] as f32;
                }
            }
        }
    }
    Matrix::from_vec_unchecked(q.rows(), d, out)
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x * (1.0 / (1.0 + (-x).exp()))
}

/// `silu(gate) ⊙ up`, elementwise.
pub(crate) fn swiglu(gate: &Matrix, up: &Matrix) -> Matrix {
    debug_assert_eq!(gate.rows(), up.rows());
    debug_assert_eq!(gate.cols(), up.cols());
    let data = gate
        .data()
        .iter()
        .zip(up.data())
        .map(|(g, u)| silu(*g) * u)
        .collect();
    Matrix::from_vec_unchecked(gate.rows(), gate.cols(), data)
}
