//! Row-wise layer primitives with hand-written backward passes.
//!
//! Activations are row-major `rows × cols` matrices with one row per pixel
//! or token.

use crate::linalg::{gemm, View, ViewMut};

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics of a layer-norm forward.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], cols: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for c in 0..cols {
            let h = (row[c] - mean) * s;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx`; accumulates gain/bias gradients.
pub fn layer_norm_backward(
    dy: &[f64],
    cols: usize,
    gain: &[f64],
    cache: &LayerNormCache,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / cols;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let g = &dy[r * cols..(r + 1) * cols];
        let h = &cache.xhat[r * cols..(r + 1) * cols];
        let mut mean_d = 0.0;
        let mut mean_dh = 0.0;
        for c in 0..cols {
            dgain[c] += g[c] * h[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            mean_d += dxhat[c];
            mean_dh += dxhat[c] * h[c];
        }
        mean_d /= cols as f64;
        mean_dh /= cols as f64;
        let s = cache.rstd[r];
        for c in 0..cols {
            dx[r * cols + c] = s * (dxhat[c] - mean_d - h[c] * mean_dh);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

// tanh through a single exp, several times faster than libm's tanh
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_K * (x + GELU_C * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_K * (x + GELU_C * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place numerically stable row softmax.
pub fn softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Gather matrix for a `k × k` same-padded convolution over a pixel-major
/// `h × w × c_in` input, with columns ordered `(ky, kx, c_in)`. Only output
/// rows `[row0, row0 + rows)` are produced. Weights stored `[c_out, c_in, k, k]`
/// go through [`conv_weight_tap_major`] first.
pub fn im2col(x: &[f64], h: usize, w: usize, c_in: usize, k: usize, row0: usize, rows: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let width = c_in * k * k;
    let mut out = vec![0.0; rows * width];
    for (o, p) in (row0..row0 + rows).enumerate() {
        let (y, xx) = ((p / w) as isize, (p % w) as isize);
        let dst = &mut out[o * width..(o + 1) * width];
        for ky in 0..k {
            let sy = y + ky as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..k {
                let sx = xx + kx as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let src = &x[(sy as usize * w + sx as usize) * c_in..][..c_in];
                dst[(ky * k + kx) * c_in..][..c_in].copy_from_slice(src);
            }
        }
    }
    out
}

/// Reorders a `[c_out, c_in, k, k]` weight to `[c_out, k, k, c_in]`, the
/// column order of [`im2col`].
pub fn conv_weight_tap_major(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..c_out {
        for ci in 0..c_in {
            for t in 0..k * k {
                out[(o * k * k + t) * c_in + ci] = w[(o * c_in + ci) * k * k + t];
            }
        }
    }
    out
}

/// Inverse of [`conv_weight_tap_major`].
pub fn conv_weight_channel_major(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for o in 0..c_out {
        for ci in 0..c_in {
            for t in 0..k * k {
                out[(o * c_in + ci) * k * k + t] = w[(o * k * k + t) * c_in + ci];
            }
        }
    }
    out
}

/// Adjoint of [`im2col`] over the full grid.
pub fn col2im(cols: &[f64], h: usize, w: usize, c_in: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let width = c_in * k * k;
    let mut dx = vec![0.0; h * w * c_in];
    for p in 0..h * w {
        let (y, xx) = ((p / w) as isize, (p % w) as isize);
        let src = &cols[p * width..(p + 1) * width];
        for ky in 0..k {
            let sy = y + ky as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..k {
                let sx = xx + kx as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst = &mut dx[(sy as usize * w + sx as usize) * c_in..][..c_in];
                let tap = &src[(ky * k + kx) * c_in..][..c_in];
                dst.iter_mut().zip(tap).for_each(|(d, v)| *d += v);
            }
        }
    }
    dx
}

/// Saved tensors of one multi-head attention call over a block of query rows.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// Per-head probability matrices, `heads × (rows × tokens)`.
    pub probs: Vec<Vec<f64>>,
}

/// Scaled dot-product attention of `q` (`rows × c`) against `k`, `v` (`n × c`),
/// split into `heads` column groups. Returns the concatenated head outputs.
pub fn multi_head_attention(q: &[f64], k: &[f64], v: &[f64], rows: usize, n: usize, c: usize, heads: usize, keep: bool) -> (Vec<f64>, Option<AttentionCache>) {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; rows * c];
    let mut probs = Vec::new();
    for h in 0..heads {
        let mut s = vec![0.0; rows * n];
        gemm(
            scale,
            View::rm(q, rows, c).cols(h * d, d),
            View::rm(k, n, c).cols(h * d, d).t(),
            0.0,
            ViewMut::rm(&mut s, rows, n),
        );
        softmax_rows(&mut s, n);
        gemm(
            1.0,
            View::rm(&s, rows, n),
            View::rm(v, n, c).cols(h * d, d),
            0.0,
            ViewMut::rm(&mut out, rows, c).cols(h * d, d),
        );
        if keep {
            probs.push(s);
        }
    }
    (out, keep.then_some(AttentionCache { probs }))
}

/// Backward of [`multi_head_attention`]. Returns `dq` and accumulates into `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttentionCache,
    rows: usize,
    n: usize,
    c: usize,
    heads: usize,
    dk: &mut [f64],
    dv: &mut [f64],
) -> Vec<f64> {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; rows * c];
    let mut dp = vec![0.0; rows * n];
    for h in 0..heads {
        let p = &cache.probs[h];
        // dP = dO_h V_hᵀ
        gemm(
            1.0,
            View::rm(dout, rows, c).cols(h * d, d),
            View::rm(v, n, c).cols(h * d, d).t(),
            0.0,
            ViewMut::rm(&mut dp, rows, n),
        );
        // dV_h += Pᵀ dO_h
        gemm(
            1.0,
            View::rm(p, rows, n).t(),
            View::rm(dout, rows, c).cols(h * d, d),
            1.0,
            ViewMut::rm(dv, n, c).cols(h * d, d),
        );
        // softmax backward, in place: dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (drow, prow) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (x, pv) in drow.iter_mut().zip(prow) {
                *x = pv * (*x - dot);
            }
        }
        gemm(
            scale,
            View::rm(&dp, rows, n),
            View::rm(k, n, c).cols(h * d, d),
            0.0,
            ViewMut::rm(&mut dq, rows, c).cols(h * d, d),
        );
        gemm(
            scale,
            View::rm(&dp, rows, n).t(),
            View::rm(q, rows, c).cols(h * d, d),
            1.0,
            ViewMut::rm(dk, n, c).cols(h * d, d),
        );
    }
    dq
}
