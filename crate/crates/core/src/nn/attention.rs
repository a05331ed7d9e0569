//! Global attention pooling over a set of rows.
//!
//! `z_i = tanh(x_i W)`, `s_i = z_i · u`, `α = softmax(s)`, `pooled = Σ α_i x_i`.
//! The context vector `u` turns each `z_i` into a scalar score.

use alloc::vec::Vec;

use super::ops::{dot, matmul, matmul_backward, matmul_tn, softmax_backward_slice, softmax_in_place, tanh, tanh_backward};
use super::{check_shape, Matrix, NnError, Result};

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub z: Matrix,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dx: Matrix,
    pub dweight: Matrix,
    pub dcontext: Matrix,
}

/// Returns `(pooled 1×d, cache)`; the attention weights are in the cache.
pub fn global_attention(
    x: &Matrix,
    weight: &Matrix,
    context: &Matrix,
) -> Result<(Matrix, AttentionCache)> {
    if x.rows() == 0 {
        return Err(NnError::ShapeMismatch {
            op: "global_attention",
            left: (1, weight.rows()),
            right: x.shape(),
        });
    }
    let z = tanh(&matmul(x, weight)?);
    check_shape("global_attention_context", (z.cols(), 1), context.shape())?;
    let mut weights: Vec<f64> = (0..z.rows()).map(|i| dot(z.row(i), context.as_slice())).collect();
    softmax_in_place(&mut weights);
    let w = Matrix::from_vec(1, x.rows(), weights.clone())?;
    let pooled = matmul(&w, x)?;
    Ok((pooled, AttentionCache { z, weights }))
}

pub fn global_attention_backward(
    x: &Matrix,
    weight: &Matrix,
    context: &Matrix,
    cache: &AttentionCache,
    dpooled: &Matrix,
) -> Result<AttentionGrads> {
    check_shape("global_attention_backward", (1, x.cols()), dpooled.shape())?;
    let m = x.rows();
    // pooled = αᵀX: dX_i = α_i·dp, dα_i = x_i·dp
    let mut dx = Matrix::zeros(m, x.cols());
    let mut dalpha = Vec::with_capacity(m);
    for i in 0..m {
        let a = cache.weights[i];
        for (d, g) in dx.row_mut(i).iter_mut().zip(dpooled.as_slice()) {
            *d = a * g;
        }
        dalpha.push(dot(x.row(i), dpooled.as_slice()));
    }
    let mut ds = alloc::vec![0.0; m];
    softmax_backward_slice(&cache.weights, &dalpha, &mut ds);
    let ds = Matrix::from_vec(m, 1, ds)?;
    // s = Z u
    let dcontext = matmul_tn(&cache.z, &ds)?;
    let dz = Matrix::from_fn(m, cache.z.cols(), |i, j| ds.get(i, 0) * context.get(j, 0));
    let dpre = tanh_backward(&cache.z, &dz)?;
    let (dx2, dweight) = matmul_backward(x, weight, &dpre)?;
    dx.add_assign(&dx2)?;
    Ok(AttentionGrads {
        dx,
        dweight,
        dcontext,
    })
}
