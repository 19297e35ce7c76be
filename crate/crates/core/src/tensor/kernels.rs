//! Dense row-major kernels over flat `f64` slices.
//!
//! These are the forward computations behind every tape primitive. They are
//! exposed so that callers (and tests) can evaluate a primitive without
//! recording anything.

/// `c = a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalised values and reciprocal standard deviations from a column-wise
/// layer norm (each column normalised over the row axis).
pub(crate) struct ColumnStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn normalize_columns(x: &[f64], rows: usize, cols: usize, eps: f64) -> ColumnStats {
    let mut xhat = vec![0.0; rows * cols];
    let mut rstd = vec![0.0; cols];
    let n = rows as f64;
    for c in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += x[r * cols + c];
        }
        mean /= n;
        let mut var = 0.0;
        for r in 0..rows {
            let dv = x[r * cols + c] - mean;
            var += dv * dv;
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[c] = inv;
        for r in 0..rows {
            xhat[r * cols + c] = (x[r * cols + c] - mean) * inv;
        }
    }
    ColumnStats { xhat, rstd }
}

/// Layer normalisation of a single channel vector with per-channel gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let stats = normalize_columns(x, x.len(), 1, eps);
    stats
        .xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(h, (g, b))| g * h + b)
        .collect()
}

/// Same-padded dilated 1-D convolution. `x: c_in×t`, `w: c_out×c_in×kernel`.
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    t: usize,
    kernel: usize,
    dilation: usize,
) -> Vec<f64> {
    let pad = (dilation * (kernel - 1) / 2) as isize;
    let mut y = vec![0.0; c_out * t];
    for o in 0..c_out {
        let yrow = &mut y[o * t..(o + 1) * t];
        for i in 0..c_in {
            let xrow = &x[i * t..(i + 1) * t];
            for k in 0..kernel {
                let wv = w[(o * c_in + i) * kernel + k];
                if wv == 0.0 {
                    continue;
                }
                let shift = (k * dilation) as isize - pad;
                let (lo, hi) = valid_range(shift, t);
                for tt in lo..hi {
                    yrow[tt] += wv * xrow[(tt as isize + shift) as usize];
                }
            }
        }
    }
    y
}

/// Output frames `tt` for which `tt + shift` lies inside `[0, t)`.
pub(crate) fn valid_range(shift: isize, t: usize) -> (usize, usize) {
    let t = t as isize;
    let lo = (-shift).clamp(0, t);
    let hi = (t - shift).clamp(0, t);
    (lo as usize, hi.max(lo) as usize)
}
