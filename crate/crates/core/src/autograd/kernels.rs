//! Raw numeric kernels over row-major slices.
//!
//! Shared by the taped forward pass and the tape-free inference path so both
//! produce bit-identical values for the same inputs.

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` where `a` is m×k and `b` is m×n; result k×n.
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` where `a` is m×k and `b` is n×k; result m×n.
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-wise softmax. With a mask, entries whose mask is zero get probability
/// zero and the row maximum is taken over unmasked entries only.
pub fn softmax_rows(s: &[f64], rows: usize, cols: usize, mask: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let srow = &s[i * cols..(i + 1) * cols];
        let orow = &mut out[i * cols..(i + 1) * cols];
        match mask {
            None => {
                let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in orow.iter_mut().zip(srow) {
                    *o = (v - max).exp();
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
            Some(mask) => {
                let mrow = &mask[i * cols..(i + 1) * cols];
                let max = srow
                    .iter()
                    .zip(mrow)
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ((o, &v), &m) in orow.iter_mut().zip(srow).zip(mrow) {
                    *o = if m != 0.0 { (v - max).exp() * m } else { 0.0 };
                    z += *o;
                }
                for o in orow.iter_mut() {
                    *o /= z;
                }
            }
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(s: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let srow = &s[i * cols..(i + 1) * cols];
        let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + srow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(srow) {
            *o = v - lse;
        }
    }
    out
}

/// Layer normalization over each row. Returns output, per-row mean and
/// per-row reciprocal standard deviation.
pub fn layer_norm_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_c = 1.0 / cols as f64;
    for i in 0..rows {
        let xr = &x[i * cols..(i + 1) * cols];
        let mean = xr.iter().sum::<f64>() * inv_c;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_c;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, o) in out[i * cols..(i + 1) * cols].iter_mut().enumerate() {
            *o = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Overflow-safe `ln(cosh(x))`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + ((1.0 + (-2.0 * a).exp()) * 0.5).ln()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Adds `bias` to each row of `x` in place.
pub fn add_bias_rows(x: &mut [f64], cols: usize, bias: &[f64]) {
    for row in x.chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let ab = matmul(&a, 2, 3, &b, 2);
        assert_eq!(ab, vec![58.0, 64.0, 139.0, 154.0]);
        // aᵀ with a viewed as 3x2 data of aᵀ
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, 3, 2, &b, 2), ab);
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, 2, 3, &bt, 2), ab);
    }

    #[test]
    fn masked_softmax_ignores_masked_entries() {
        let s = [0.0, 0.0, 1000.0];
        let m = [1.0, 1.0, 0.0];
        let p = softmax_rows(&s, 1, 3, Some(&m));
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn log_cosh_is_stable() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert!((log_cosh(1.0) - 1.0f64.cosh().ln()).abs() < 1e-15);
        let big = log_cosh(1e6);
        assert!((big - (1e6 - std::f64::consts::LN_2)).abs() < 1e-6);
    }
}
