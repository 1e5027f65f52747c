//! Row-major layer kernels with their backward passes.
//!
//! Activations are `rows x dim` slices. Backward functions accumulate into
//! the gradient buffers they receive.

use super::float::{gemm, Float, View};

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `din x dout`.
pub fn linear<T: Float>(x: &[T], rows: usize, w: &[T], b: &[T], din: usize, dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, din, dout, x, View::rm(din), w, View::rm(dout), &mut y, View::rm(dout), true);
    y
}

/// Gradients of [`linear`]. `dx` is accumulated when given.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Float>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    din: usize,
    dout: usize,
    dx: Option<&mut [T]>,
    dw_db: Option<(&mut [T], &mut [T])>,
) {
    if let Some((dw, db)) = dw_db {
        gemm(din, rows, dout, x, View::tr(din), dy, View::rm(dout), dw, View::rm(dout), true);
        for r in 0..rows {
            for (g, &v) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                *g += v;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(rows, dout, din, dy, View::rm(dout), w, View::tr(dout), dx, View::rm(din), true);
    }
}

/// Saved statistics of a layer norm.
#[derive(Debug, Clone, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm<T: Float>(x: &[T], rows: usize, dim: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let mut y = vec![T::zero(); rows * dim];
    let mut xhat = vec![T::zero(); rows * dim];
    let mut rstd = vec![T::zero(); rows];
    let n = T::from_usize(dim).unwrap();
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * g[i] + b[i];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates `dx`; parameter gradients only when `dg_db` is given.
pub fn layernorm_backward<T: Float>(
    dy: &[T],
    cache: &LnCache<T>,
    rows: usize,
    dim: usize,
    g: &[T],
    dx: &mut [T],
    mut dg_db: Option<(&mut [T], &mut [T])>,
) {
    let n = T::from_usize(dim).unwrap();
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        if let Some((dg, db)) = dg_db.as_mut() {
            for i in 0..dim {
                dg[i] += dyr[i] * xh[i];
                db[i] += dyr[i];
            }
        }
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..dim {
            let dh = dyr[i] * g[i];
            s1 += dh;
            s2 += dh * xh[i];
        }
        let rs = cache.rstd[r];
        for i in 0..dim {
            let dh = dyr[i] * g[i];
            dx[r * dim + i] += rs * (dh - s1 / n - xh[i] * s2 / n);
        }
    }
}

fn gelu_consts<T: Float>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: &[T]) -> Vec<T> {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    x.iter().map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh())).collect()
}

/// `dx += gelu'(x) * dy`.
pub fn gelu_backward<T: Float>(x: &[T], dy: &[T], dx: &mut [T]) {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        *g += d * (half * (T::one() + t) + half * v * dt);
    }
}

/// Attention mask: query `i` sees keys `0..visible(i)`.
///
/// Rows below `prefix` attend to the whole prefix bidirectionally; later rows
/// are causal. `prefix == rows` gives full bidirectional attention.
#[inline]
pub fn visible(i: usize, prefix: usize, rows: usize) -> usize {
    (i + 1).max(prefix).min(rows)
}

/// Multi-head attention on a fused `rows x 3d` QKV buffer. Returns the
/// concatenated head outputs and the per-head probability matrices.
pub fn attention<T: Float>(qkv: &[T], rows: usize, d: usize, heads: usize, prefix: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); rows * d];
    let mut probs = vec![T::zero(); heads * rows * rows];
    for h in 0..heads {
        let p = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        gemm(
            rows,
            dh,
            rows,
            qkv,
            View::at(h * dh, 3 * d, 1),
            qkv,
            View::at(d + h * dh, 1, 3 * d),
            p,
            View::rm(rows),
            false,
        );
        for i in 0..rows {
            let row = &mut p[i * rows..(i + 1) * rows];
            let lim = visible(i, prefix, rows);
            let mut mx = T::neg_infinity();
            for v in row[..lim].iter_mut() {
                *v *= scale;
                mx = mx.max(*v);
            }
            let mut sum = T::zero();
            for v in row[..lim].iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row[..lim].iter_mut() {
                *v /= sum;
            }
            row[lim..].iter_mut().for_each(|v| *v = T::zero());
        }
        gemm(rows, rows, dh, p, View::rm(rows), qkv, View::at(2 * d + h * dh, 3 * d, 1), &mut out, View::at(h * dh, d, 1), false);
    }
    (out, probs)
}

/// Gradient of [`attention`] with respect to the QKV buffer (overwritten).
pub fn attention_backward<T: Float>(
    dout: &[T],
    qkv: &[T],
    probs: &[T],
    rows: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    let mut ds = vec![T::zero(); rows * rows];
    for h in 0..heads {
        let p = &probs[h * rows * rows..(h + 1) * rows * rows];
        // dP = dO V^T
        gemm(rows, dh, rows, dout, View::at(h * dh, d, 1), qkv, View::at(2 * d + h * dh, 1, 3 * d), &mut ds, View::rm(rows), false);
        // dV = P^T dO
        gemm(rows, rows, dh, p, View::tr(rows), dout, View::at(h * dh, d, 1), &mut dqkv, View::at(2 * d + h * dh, 3 * d, 1), false);
        for i in 0..rows {
            let pr = &p[i * rows..(i + 1) * rows];
            let dr = &mut ds[i * rows..(i + 1) * rows];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        // dQ = dS K, dK = dS^T Q
        gemm(rows, rows, dh, &ds, View::rm(rows), qkv, View::at(d + h * dh, 3 * d, 1), &mut dqkv, View::at(h * dh, 3 * d, 1), false);
        gemm(rows, rows, dh, &ds, View::tr(rows), qkv, View::at(h * dh, 3 * d, 1), &mut dqkv, View::at(d + h * dh, 3 * d, 1), false);
    }
    dqkv
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row.iter().map(|&v| v - lse).collect()
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}
