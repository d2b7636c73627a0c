use super::{LinearParams, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-6;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        other => Err(Error::dimension(op, other, &[2])),
    }
}

/// `c[i,j] = sum_p a[i,p] * b[p,j]`, summed with `p` ascending.
///
/// The loop nest is i-p-j so the innermost loop is contiguous in `b` and `c`,
/// while each `c[i,j]` still sees its products in ascending `p`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let mut c = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut c, m, k, n);
    Tensor::new(vec![m, n], c)
}

/// `c += a·b` for row-major `a [m,k]`, `b [k,n]`, `c [m,n]`.
///
/// Tiles of `MR×NR` outputs are accumulated in registers; every output still
/// adds its products in ascending `p` onto its initial value, so the result
/// is bit-identical to the plain loop.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { matmul_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    matmul_tiled(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tiled(a, b, c, m, k, n);
}

/// `c += aᵀ·b` for row-major `a [k,m]`, `b [k,n]`, `c [m,n]`, in the same
/// ascending-`p` order as [`matmul_into`].
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { matmul_tn_avx2(a, b, c, m, k, n) };
            return;
        }
    }
    matmul_tn_tiled(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_tn_tiled(a, b, c, m, k, n);
}

#[inline(always)]
fn matmul_tn_tiled(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
                let acol: &[f64; MR] = a[p * m + i0..p * m + i0 + MR].try_into().expect("tile height");
                for (row, &av) in acc.iter_mut().zip(acol) {
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            matmul_tn_plain(a, b, c, i0..i0 + MR, n_main..n, m, k, n);
        }
    }
    if m_main < m {
        matmul_tn_plain(a, b, c, m_main..m, 0..n, m, k, n);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn matmul_tn_plain(a: &[f64], b: &[f64], c: &mut [f64], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, m: usize, k: usize, n: usize) {
    for i in rows {
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let api = a[p * m + i];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn matmul_tiled(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (cv, &bv) in row.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_main < n {
            matmul_plain(a, b, c, i0..i0 + MR, n_main..n, k, n);
        }
    }
    if m_main < m {
        matmul_plain(a, b, c, m_main..m, 0..n, k, n);
    }
}

#[inline(always)]
fn matmul_plain(a: &[f64], b: &[f64], c: &mut [f64], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, n: usize) {
    for i in rows {
        let crow = &mut c[i * n + cols.start..i * n + cols.end];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Returns `(da, db)` for `c = a·b` given `dc`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = require_rank2("matmul_backward", a)?;
    let (_, n) = require_rank2("matmul_backward", b)?;
    if dc.shape() != [m, n] {
        return Err(Error::dimension("matmul_backward", &[m, n], dc.shape()));
    }
    let da = matmul(dc, &b.transpose()?)?;
    let db = matmul(&a.transpose()?, dc)?;
    Ok((da, db))
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::dimension("softmax_row", &[0], &[1]));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// VJP of softmax, expressed through its output `y`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
    if y.len() != dy.len() {
        return Err(Error::dimension("softmax_backward", &[y.len()], &[dy.len()]));
    }
    let mut dx = vec![0.0; y.len()];
    softmax_backward_into(y, dy, &mut dx);
    Ok(dx)
}

pub(crate) fn softmax_backward_into(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - dot);
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

/// `dx = dy * gelu'(x)`, with `x` the forward input.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_with(dy, "gelu_backward", |xv, g| g * gelu_grad(xv))
}

pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::dimension("layernorm", &[0], &[1]));
    }
    if gamma.len() != n || beta.len() != n {
        return Err(Error::dimension("layernorm", &[n], &[gamma.len(), beta.len()]));
    }
    let mut out = vec![0.0; n];
    layernorm_into(x, gamma, beta, eps, &mut out);
    Ok(out)
}

fn row_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn layernorm_into(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) {
    let (mean, inv_std) = row_stats(x, eps);
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (v - mean) * inv_std * g + b;
    }
}

/// Returns `(dx, dgamma, dbeta)` for a single row.
pub fn layernorm_backward(x: &[f64], gamma: &[f64], eps: f64, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if gamma.len() != n || dy.len() != n || n == 0 {
        return Err(Error::dimension("layernorm_backward", &[n], &[gamma.len(), dy.len()]));
    }
    let mut dx = vec![0.0; n];
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    layernorm_backward_into(x, gamma, eps, dy, &mut dx, &mut dgamma, &mut dbeta);
    Ok((dx, dgamma, dbeta))
}

/// Accumulates into `dgamma`/`dbeta`; overwrites `dx`.
fn layernorm_backward_into(
    x: &[f64],
    gamma: &[f64],
    eps: f64,
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = x.len() as f64;
    let (mean, inv_std) = row_stats(x, eps);
    let mut sum_g = 0.0;
    let mut sum_gx = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * inv_std;
        let g = dy[i] * gamma[i];
        sum_g += g;
        sum_gx += g * xhat;
        dgamma[i] += dy[i] * xhat;
        dbeta[i] += dy[i];
    }
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * inv_std;
        let g = dy[i] * gamma[i];
        dx[i] = inv_std * (g - sum_g / n - xhat * sum_gx / n);
    }
}

/// Layer norm over the last axis of `x`.
pub fn layernorm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::dimension("layernorm_rows", x.shape(), gamma.shape()));
    }
    let mut out = Tensor::zeros(x.shape());
    for (row, o) in x.data().chunks_exact(n).zip(out.data_mut().chunks_exact_mut(n)) {
        layernorm_into(row, gamma.data(), beta.data(), LAYERNORM_EPS, o);
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)` for [`layernorm_rows`].
pub fn layernorm_rows_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.last_dim();
    if dy.shape() != x.shape() || gamma.shape() != [n] {
        return Err(Error::dimension("layernorm_rows_backward", x.shape(), dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[n]);
    let mut dbeta = Tensor::zeros(&[n]);
    for ((row, g), d) in x
        .data()
        .chunks_exact(n)
        .zip(dy.data().chunks_exact(n))
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        layernorm_backward_into(row, gamma.data(), LAYERNORM_EPS, g, d, dgamma.data_mut(), dbeta.data_mut());
    }
    Ok((dx, dgamma, dbeta))
}

pub type LinearGrad = LinearParams;

/// `y = x·Wᵀ + b` applied to every row of `x` (last axis is `in`).
pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    if x.last_dim() != in_dim {
        return Err(Error::dimension("linear_forward", x.shape(), p.weight.shape()));
    }
    let rows = x.rows();
    let wt = p.weight.transpose()?;
    let mut out = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        out.extend_from_slice(p.bias.data());
    }
    matmul_into(x.data(), wt.data(), &mut out, rows, in_dim, out_dim);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = out_dim;
    Tensor::new(shape, out)
}

/// Returns `(dx, grads)` for [`linear_forward`].
pub fn linear_backward(x: &Tensor, p: &LinearParams, dy: &Tensor) -> Result<(Tensor, LinearGrad)> {
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    if x.last_dim() != in_dim || dy.last_dim() != out_dim || x.rows() != dy.rows() {
        return Err(Error::dimension("linear_backward", x.shape(), dy.shape()));
    }
    let rows = x.rows();
    let mut dx = Tensor::zeros(x.shape());
    let mut grad = LinearParams::zeros(in_dim, out_dim);
    matmul_into(dy.data(), p.weight.data(), dx.data_mut(), rows, out_dim, in_dim);
    matmul_tn_into(dy.data(), x.data(), grad.weight.data_mut(), out_dim, rows, in_dim);
    for grow in dy.data().chunks_exact(out_dim) {
        for (b, &g) in grad.bias.data_mut().iter_mut().zip(grow) {
            *b += g;
        }
    }
    Ok((dx, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_selection() {
        let i2 = Tensor::identity(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[0., 1.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_shift() {
        assert_eq!(softmax_row(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let a = softmax_row(&[0.3, -1.2, 2.5]).unwrap();
        let b = softmax_row(&[100.3, 98.8, 102.5]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn softmax_matches_high_precision() {
        // mpmath at 50 digits: exp(i) / (e + e^2 + e^3) for i = 1, 2, 3.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        let y = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated with mpmath.
        assert!((gelu(1.0) - 0.841_191_990_608_276_7).abs() < 1e-15);
    }

    #[test]
    fn layernorm_cases() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let out = layernorm(&[4.0; 3], &ones, &zeros, LAYERNORM_EPS).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let beta = [0.5, -1.0, 2.0];
        let out = layernorm(&[1.0, 5.0, -3.0], &zeros, &beta, LAYERNORM_EPS).unwrap();
        assert_eq!(out, beta.to_vec());
        let out = layernorm(&[1.0, 2.0, 3.0], &ones, &zeros, LAYERNORM_EPS).unwrap();
        let denom = (2.0_f64 / 3.0 + LAYERNORM_EPS).sqrt();
        for (o, x) in out.iter().zip([1.0, 2.0, 3.0]) {
            assert!((o - (x - 2.0) / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_identity_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LinearParams::identity(4);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let dy = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(linear_forward(&x, &p).unwrap(), x);
        let (dx, _) = linear_backward(&x, &p, &dy).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LinearParams::init(5, 3, &mut rng);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let (dx, g) = linear_backward(&x, &p, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().chain(g.bias.data()).all(|&v| v == 0.0));
        let (da, db) = matmul_backward(&x, &p.weight.transpose().unwrap(), &Tensor::zeros(&[2, 3])).unwrap();
        assert!(da.data().iter().chain(db.data()).all(|&v| v == 0.0));
    }
}
