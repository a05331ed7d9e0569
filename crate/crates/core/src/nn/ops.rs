//! Primitive forward/backward pairs.
//!
//! Backward functions take the upstream gradient `d*` of a scalar loss with
//! respect to the primitive's output and return gradients with respect to its
//! inputs.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::{check_shape, Matrix, NnError, Result, SparsePattern};

pub const LEAKY_SLOPE: f64 = 0.2;

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(NnError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut c = Matrix::zeros(n, m);
    let bs = b.as_slice();
    for i in 0..n {
        let arow = a.row(i);
        let crow = c.row_mut(i);
        for (p, &aip) in arow.iter().enumerate().take(k) {
            if aip == 0.0 {
                continue;
            }
            let brow = &bs[p * m..(p + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(NnError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (p, q) = (a.cols(), b.cols());
    let mut c = Matrix::zeros(p, q);
    for r in 0..a.rows() {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ai) in arow.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let crow = c.row_mut(i);
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += ai * bj;
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(NnError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            let v = dot(arow, b.row(j));
            c.set(i, j, v);
        }
    }
    Ok(c)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Returns `(da, db)` for `c = a · b`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, dc: &Matrix) -> Result<(Matrix, Matrix)> {
    check_shape("matmul_backward", (a.rows(), b.cols()), dc.shape())?;
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = a.clone();
    c.add_assign(b)?;
    Ok(c)
}

/// Gradient of `c = a + b` flows unchanged to both inputs.
pub fn add_backward(dc: &Matrix) -> (Matrix, Matrix) {
    (dc.clone(), dc.clone())
}

/// Adds a `1 × n` bias to every row.
pub fn add_row_bias(x: &Matrix, bias: &Matrix) -> Result<Matrix> {
    check_shape("add_row_bias", (1, x.cols()), bias.shape())?;
    let mut y = x.clone();
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
    Ok(y)
}

/// Returns `(dx, dbias)`.
pub fn add_row_bias_backward(dy: &Matrix) -> (Matrix, Matrix) {
    let mut db = Matrix::zeros(1, dy.cols());
    for r in 0..dy.rows() {
        for (b, d) in db.as_mut_slice().iter_mut().zip(dy.row(r)) {
            *b += d;
        }
    }
    (dy.clone(), db)
}

fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let data = x.as_slice().iter().map(|&v| f(v)).collect();
    Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape")
}

fn zip_map(a: &Matrix, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    check_shape(op, a.shape(), b.shape())?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn tanh(x: &Matrix) -> Matrix {
    map(x, libm::tanh)
}

/// Takes the forward output `y = tanh(x)`.
pub fn tanh_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    zip_map(y, dy, "tanh_backward", |y, d| d * (1.0 - y * y))
}

pub fn relu(x: &Matrix) -> Matrix {
    map(x, |v| if v > 0.0 { v } else { 0.0 })
}

/// Takes the forward input; the subgradient at 0 is 0.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    zip_map(x, dy, "relu_backward", |x, d| if x > 0.0 { d } else { 0.0 })
}

#[inline]
pub fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

#[inline]
pub fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn leaky_relu(x: &Matrix) -> Matrix {
    map(x, leaky)
}

pub fn leaky_relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    zip_map(x, dy, "leaky_relu_backward", |x, d| d * leaky_grad(x))
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + libm::log1p(libm::exp(-v))
    } else {
        libm::log1p(libm::exp(v))
    }
}

/// `ln σ(v)`, stable for large |v|.
#[inline]
pub fn log_sigmoid(v: f64) -> f64 {
    -softplus(-v)
}

pub fn logistic(x: &Matrix) -> Matrix {
    map(x, sigmoid)
}

/// Takes the forward output `y = σ(x)`.
pub fn logistic_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    zip_map(y, dy, "logistic_backward", |y, d| d * y * (1.0 - y))
}

/// In-place softmax of a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Gradient of a softmax given its output `y` and upstream `dy`.
pub fn softmax_backward_slice(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner = dot(y, dy);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (gi - inner);
    }
}

pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    y
}

/// Takes the forward output.
pub fn row_softmax_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    check_shape("row_softmax_backward", y.shape(), dy.shape())?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        softmax_backward_slice(y.row(r), dy.row(r), dx.row_mut(r));
    }
    Ok(dx)
}

/// Per-element multipliers of an inverted-dropout draw (0 or `1/(1-rate)`).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scale: Option<Vec<f64>>,
}

impl DropoutMask {
    pub fn identity() -> Self {
        Self { scale: None }
    }
}

/// Inverted dropout. In eval mode (`train == false`) or at `rate == 0` the
/// map is the identity and no randomness is consumed.
pub fn dropout<R: Rng + ?Sized>(
    x: &Matrix,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> (Matrix, DropoutMask) {
    if !train || rate <= 0.0 {
        return (x.clone(), DropoutMask::identity());
    }
    let keep = 1.0 - rate;
    let scale: Vec<f64> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let data = x.as_slice().iter().zip(&scale).map(|(v, s)| v * s).collect();
    (
        Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape"),
        DropoutMask { scale: Some(scale) },
    )
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Matrix) -> Matrix {
    match &mask.scale {
        None => dy.clone(),
        Some(scale) => {
            let data = dy.as_slice().iter().zip(scale).map(|(d, s)| d * s).collect();
            Matrix::from_vec(dy.rows(), dy.cols(), data).expect("same shape")
        }
    }
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |p| p.rows());
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols",
                left: (rows, 0),
                right: p.shape(),
            });
        }
        for r in 0..rows {
            out.row_mut(r)[offset..offset + p.cols()].copy_from_slice(p.row(r));
        }
        offset += p.cols();
    }
    Ok(out)
}

/// Splits the upstream gradient of a concatenation back into its parts.
pub fn concat_cols_backward(dy: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = widths.iter().sum();
    check_shape("concat_cols_backward", (dy.rows(), total), dy.shape())?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut m = Matrix::zeros(dy.rows(), w);
        for r in 0..dy.rows() {
            m.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + w]);
        }
        out.push(m);
        offset += w;
    }
    Ok(out)
}

/// `out_i = Σ_{j ∈ N(i)} w_ij · values_j` with edge weights parallel to the
/// pattern's index array.
pub fn neighbor_weighted_sum(
    pattern: &SparsePattern,
    weights: &[f64],
    values: &Matrix,
) -> Result<Matrix> {
    if weights.len() != pattern.nnz() || values.rows() != pattern.n_cols() {
        return Err(NnError::ShapeMismatch {
            op: "neighbor_weighted_sum",
            left: (pattern.n_rows(), pattern.n_cols()),
            right: values.shape(),
        });
    }
    let mut out = Matrix::zeros(pattern.n_rows(), values.cols());
    for i in 0..pattern.n_rows() {
        let range = pattern.row_range(i);
        let cols = pattern.row(i);
        let orow = out.row_mut(i);
        for (e, &j) in range.zip(cols) {
            let w = weights[e];
            if w == 0.0 {
                continue;
            }
            for (o, v) in orow.iter_mut().zip(values.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Returns `(dweights, dvalues)`.
pub fn neighbor_weighted_sum_backward(
    pattern: &SparsePattern,
    weights: &[f64],
    values: &Matrix,
    dout: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    check_shape(
        "neighbor_weighted_sum_backward",
        (pattern.n_rows(), values.cols()),
        dout.shape(),
    )?;
    let mut dw = vec![0.0; pattern.nnz()];
    let mut dv = Matrix::zeros(values.rows(), values.cols());
    for i in 0..pattern.n_rows() {
        let g = dout.row(i);
        for (e, &j) in pattern.row_range(i).zip(pattern.row(i)) {
            dw[e] = dot(g, values.row(j));
            let w = weights[e];
            if w != 0.0 {
                for (d, gi) in dv.row_mut(j).iter_mut().zip(g) {
                    *d += w * gi;
                }
            }
        }
    }
    Ok((dw, dv))
}

/// Softmax over the edges of each row of a sparse pattern.
pub fn sparse_row_softmax(pattern: &SparsePattern, scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    for i in 0..pattern.n_rows() {
        let r = pattern.row_range(i);
        if !r.is_empty() {
            softmax_in_place(&mut out[r]);
        }
    }
    out
}

pub fn sparse_row_softmax_backward(pattern: &SparsePattern, y: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for i in 0..pattern.n_rows() {
        let r = pattern.row_range(i);
        softmax_backward_slice(&y[r.clone()], &dy[r.clone()], &mut dx[r]);
    }
    dx
}

/// Mean binary cross-entropy over all entries, computed from logits.
pub fn bce_with_logits(logits: &Matrix, targets: &Matrix) -> Result<f64> {
    check_shape("bce_with_logits", logits.shape(), targets.shape())?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = logits
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(&z, &y)| softplus(z) - z * y)
        .sum();
    Ok(total / logits.len() as f64)
}

/// Gradient of [`bce_with_logits`] with respect to the logits.
pub fn bce_with_logits_backward(logits: &Matrix, targets: &Matrix) -> Result<Matrix> {
    let n = logits.len().max(1) as f64;
    zip_map(logits, targets, "bce_with_logits_backward", |z, y| {
        (sigmoid(z) - y) / n
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let y = row_softmax(&Matrix::from_rows(&[&[0.0, 0.0]]).unwrap());
        assert_eq!(y.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn bce_at_half_probability_is_ln2() {
        let z = Matrix::from_rows(&[&[0.0]]).unwrap();
        let y = Matrix::from_rows(&[&[1.0]]).unwrap();
        let l = bce_with_logits(&z, &y).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_is_finite_at_large_logits() {
        let z = Matrix::from_rows(&[&[50.0, -50.0, 50.0, -50.0]]).unwrap();
        let y = Matrix::from_rows(&[&[0.0, 1.0, 1.0, 0.0]]).unwrap();
        let l = bce_with_logits(&z, &y).unwrap();
        assert!(l.is_finite());
        assert!((l - 25.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let mut rng = seeded(1);
        let (y, mask) = dropout(&x, 0.5, false, &mut rng);
        assert_eq!(y, x);
        assert_eq!(dropout_backward(&mask, &x), x);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(NnError::ShapeMismatch { .. })));
        let c = matmul_nt(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 2));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_fn(3, 5, |r, c| (r as f64) - 0.5 * c as f64);
        let b = Matrix::from_fn(5, 2, |r, c| 0.25 * (r * c) as f64 + 1.0);
        let ab = matmul(&a, &b).unwrap();
        let ab2 = matmul_tn(&a.transpose(), &b).unwrap();
        let ab3 = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(ab.max_abs_diff(&ab2) < 1e-12);
        assert!(ab.max_abs_diff(&ab3) < 1e-12);
    }
}
