//! Separable interpolation under pixel-center alignment.
//!
//! Output pixel `i` of `n_out` samples the source at continuous index
//! `(i + 0.5) · n_in / n_out - 0.5`, the same convention as
//! [`make_coord_grid`](crate::types::make_coord_grid).

use crate::error::{Error, Result};
use crate::types::{FeatureMap, ImageTensor};

/// Continuous source index sampled by output cell `i`.
pub fn source_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Per-axis interpolation taps: for each output index, `(source index, weight)` pairs.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    taps: Vec<Vec<(usize, f64)>>,
    n_in: usize,
}

impl AxisTaps {
    /// Two-tap linear weights, clamped to the edge.
    pub fn linear(n_in: usize, n_out: usize) -> Self {
        let taps = (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_out, n_in).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let f = s - i0 as f64;
                if i1 == i0 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            })
            .collect();
        AxisTaps { taps, n_in }
    }

    /// Four-tap cubic convolution (Catmull-Rom, `a = -0.5`) with reflect padding.
    pub fn cubic(n_in: usize, n_out: usize) -> Self {
        let taps = (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_out, n_in);
                let base = s.floor();
                let f = s - base;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for k in -1..=2i64 {
                    let w = cubic_kernel(f - k as f64);
                    let idx = reflect(base as i64 + k, n_in);
                    match row.iter_mut().find(|(j, _)| *j == idx) {
                        Some(t) => t.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                row
            })
            .collect();
        AxisTaps { taps, n_in }
    }

    /// Box averaging over `n_in / n_out` consecutive cells.
    pub fn average(n_in: usize, n_out: usize) -> Result<Self> {
        if n_out == 0 || n_in % n_out != 0 {
            return Err(Error::invalid(format!(
                "average pooling needs an integer ratio, got {n_in} → {n_out}"
            )));
        }
        let r = n_in / n_out;
        let taps = (0..n_out)
            .map(|i| (i * r..(i + 1) * r).map(|j| (j, 1.0 / r as f64)).collect())
            .collect();
        Ok(AxisTaps { taps, n_in })
    }

    pub fn n_out(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self, i: usize) -> &[(usize, f64)] {
        &self.taps[i]
    }
}

/// Catmull-Rom cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Mirror index about the edge samples (`-1 → 1`, `n → n - 2`).
pub fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Applies separable taps to `planes` stacked `h × w` planes.
pub fn apply_separable(src: &[f64], planes: usize, h: usize, w: usize, ys: &AxisTaps, xs: &AxisTaps) -> Vec<f64> {
    debug_assert_eq!(ys.n_in, h);
    debug_assert_eq!(xs.n_in, w);
    let (oh, ow) = (ys.n_out(), xs.n_out());
    let mut out = vec![0.0; planes * oh * ow];
    let mut rows = vec![0.0; oh * w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            let dst = &mut rows[oy * w..(oy + 1) * w];
            for &(sy, wy) in ys.taps(oy) {
                for (d, s) in dst.iter_mut().zip(&plane[sy * w..(sy + 1) * w]) {
                    *d += wy * s;
                }
            }
        }
        let o = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &rows[oy * w..(oy + 1) * w];
            for ox in 0..ow {
                o[oy * ow + ox] = xs.taps(ox).iter().map(|&(sx, wx)| wx * row[sx]).sum();
            }
        }
    }
    out
}

/// Adjoint of [`apply_separable`]: scatters output gradients back to the source grid.
pub fn apply_separable_transpose(dout: &[f64], planes: usize, h: usize, w: usize, ys: &AxisTaps, xs: &AxisTaps) -> Vec<f64> {
    let (oh, ow) = (ys.n_out(), xs.n_out());
    let mut din = vec![0.0; planes * h * w];
    let mut rows = vec![0.0; oh * w];
    for p in 0..planes {
        let g = &dout[p * oh * ow..(p + 1) * oh * ow];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for oy in 0..oh {
            let r = &mut rows[oy * w..(oy + 1) * w];
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                for &(sx, wx) in xs.taps(ox) {
                    r[sx] += wx * v;
                }
            }
        }
        let d = &mut din[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for &(sy, wy) in ys.taps(oy) {
                for (dst, s) in d[sy * w..(sy + 1) * w].iter_mut().zip(&rows[oy * w..(oy + 1) * w]) {
                    *dst += wy * s;
                }
            }
        }
    }
    din
}

fn check_out(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("output size must be positive, got {out_h}×{out_w}")));
    }
    Ok(())
}

fn resample_map(f: &FeatureMap, ys: &AxisTaps, xs: &AxisTaps) -> Result<FeatureMap> {
    let data = apply_separable(f.data(), f.batch() * f.channels(), f.height(), f.width(), ys, xs);
    FeatureMap::new(f.batch(), f.channels(), ys.n_out(), xs.n_out(), data)
}

/// Bilinear resampling (up or down) with edge clamping.
pub fn bilinear_upsample(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    check_out(out_h, out_w)?;
    resample_map(f, &AxisTaps::linear(f.height(), out_h), &AxisTaps::linear(f.width(), out_w))
}

/// Catmull-Rom bicubic resampling with reflect padding.
pub fn bicubic_upsample(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    check_out(out_h, out_w)?;
    resample_map(f, &AxisTaps::cubic(f.height(), out_h), &AxisTaps::cubic(f.width(), out_w))
}

/// Integer-ratio average pooling.
pub fn average_pool(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    check_out(out_h, out_w)?;
    resample_map(f, &AxisTaps::average(f.height(), out_h)?, &AxisTaps::average(f.width(), out_w)?)
}

/// Bilinear image resize; the result stays inside `[0, 1]` since weights are convex.
pub fn resize_image(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    check_out(out_h, out_w)?;
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let ys = AxisTaps::linear(img.height(), out_h);
    let xs = AxisTaps::linear(img.width(), out_w);
    let mut data = apply_separable(img.data(), img.batch() * 3, img.height(), img.width(), &ys, &xs);
    // Round-off can leave values a hair outside the unit interval.
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImageTensor::new(img.batch(), out_h, out_w, data)
}
