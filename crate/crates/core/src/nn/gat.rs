//! Graph layers over a fixed sparsity pattern.
//!
//! The attention layer is single-head additive attention:
//! `s_ij = leaky_relu(a_srcᵀ z_i + a_dstᵀ z_j) [+ b_ij]`, `α_i = softmax_j s_ij`,
//! `h'_i = relu(Σ_j α_ij z_j)` with `Z = H W`. The optional per-edge bias `b_ij`
//! carries `ln A_ij` for the edge-weighted variant. The propagation layer is
//! `relu(Â H W)` with fixed edge weights.

use alloc::vec;
use alloc::vec::Vec;

use super::ops::{
    leaky, leaky_grad, matmul, matmul_backward, matmul_nt, matmul_tn, neighbor_weighted_sum,
    neighbor_weighted_sum_backward, relu, relu_backward, sparse_row_softmax,
    sparse_row_softmax_backward,
};
use super::{check_shape, Matrix, NnError, Result, SparsePattern};

/// Intermediate values of an attention layer forward pass.
#[derive(Clone, Debug)]
pub struct GatCache {
    pub z: Matrix,
    /// Pre-activation attention logits `a_srcᵀ z_i + a_dstᵀ z_j`, per edge.
    pub raw: Vec<f64>,
    /// Attention weights per edge.
    pub alpha: Vec<f64>,
    pub pre: Matrix,
}

#[derive(Clone, Debug)]
pub struct GatGrads {
    pub dh: Matrix,
    pub dweight: Matrix,
    pub datt_src: Matrix,
    pub datt_dst: Matrix,
}

fn check_pattern(pattern: &SparsePattern, h: &Matrix) -> Result<()> {
    if pattern.n_rows() != pattern.n_cols() || pattern.n_rows() != h.rows() {
        return Err(NnError::ShapeMismatch {
            op: "graph_layer",
            left: (pattern.n_rows(), pattern.n_cols()),
            right: h.shape(),
        });
    }
    Ok(())
}

/// Forward pass. `pattern` must already contain every self loop; `edge_bias`
/// (if any) is parallel to the pattern's edges.
pub fn gat_forward(
    h: &Matrix,
    pattern: &SparsePattern,
    edge_bias: Option<&[f64]>,
    weight: &Matrix,
    att_src: &Matrix,
    att_dst: &Matrix,
) -> Result<(Matrix, GatCache)> {
    check_pattern(pattern, h)?;
    let z = matmul(h, weight)?;
    check_shape("gat_att_src", (z.cols(), 1), att_src.shape())?;
    check_shape("gat_att_dst", (z.cols(), 1), att_dst.shape())?;
    if let Some(b) = edge_bias {
        check_shape("gat_edge_bias", (pattern.nnz(), 1), (b.len(), 1))?;
    }
    let e_src = matmul(&z, att_src)?;
    let e_dst = matmul(&z, att_dst)?;
    let mut raw = vec![0.0; pattern.nnz()];
    let mut scores = vec![0.0; pattern.nnz()];
    for i in 0..pattern.n_rows() {
        for (e, &j) in pattern.row_range(i).zip(pattern.row(i)) {
            raw[e] = e_src.as_slice()[i] + e_dst.as_slice()[j];
            scores[e] = leaky(raw[e]) + edge_bias.map_or(0.0, |b| b[e]);
        }
    }
    let alpha = sparse_row_softmax(pattern, &scores);
    let pre = neighbor_weighted_sum(pattern, &alpha, &z)?;
    let out = relu(&pre);
    Ok((out, GatCache { z, raw, alpha, pre }))
}

pub fn gat_backward(
    h: &Matrix,
    pattern: &SparsePattern,
    cache: &GatCache,
    weight: &Matrix,
    att_src: &Matrix,
    att_dst: &Matrix,
    dout: &Matrix,
) -> Result<GatGrads> {
    let dpre = relu_backward(&cache.pre, dout)?;
    let (dalpha, mut dz) = neighbor_weighted_sum_backward(pattern, &cache.alpha, &cache.z, &dpre)?;
    let dscore = sparse_row_softmax_backward(pattern, &cache.alpha, &dalpha);
    let n = pattern.n_rows();
    let mut de_src = vec![0.0; n];
    let mut de_dst = vec![0.0; n];
    for i in 0..n {
        for (e, &j) in pattern.row_range(i).zip(pattern.row(i)) {
            let d = dscore[e] * leaky_grad(cache.raw[e]);
            de_src[i] += d;
            de_dst[j] += d;
        }
    }
    let de_src = Matrix::from_vec(n, 1, de_src)?;
    let de_dst = Matrix::from_vec(n, 1, de_dst)?;
    dz.add_assign(&matmul_nt(&de_src, att_src)?)?;
    dz.add_assign(&matmul_nt(&de_dst, att_dst)?)?;
    let datt_src = matmul_tn(&cache.z, &de_src)?;
    let datt_dst = matmul_tn(&cache.z, &de_dst)?;
    let (dh, dweight) = matmul_backward(h, weight, &dz)?;
    Ok(GatGrads {
        dh,
        dweight,
        datt_src,
        datt_dst,
    })
}

#[derive(Clone, Debug)]
pub struct PropCache {
    pub z: Matrix,
    pub pre: Matrix,
}

/// `relu(Â H W)` with `edge_weights` parallel to the pattern's edges.
pub fn propagation_forward(
    h: &Matrix,
    pattern: &SparsePattern,
    edge_weights: &[f64],
    weight: &Matrix,
) -> Result<(Matrix, PropCache)> {
    check_pattern(pattern, h)?;
    let z = matmul(h, weight)?;
    let pre = neighbor_weighted_sum(pattern, edge_weights, &z)?;
    Ok((relu(&pre), PropCache { z, pre }))
}

/// Returns `(dh, dweight)`.
pub fn propagation_backward(
    h: &Matrix,
    pattern: &SparsePattern,
    edge_weights: &[f64],
    cache: &PropCache,
    weight: &Matrix,
    dout: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let dpre = relu_backward(&cache.pre, dout)?;
    let (_, dz) = neighbor_weighted_sum_backward(pattern, edge_weights, &cache.z, &dpre)?;
    matmul_backward(h, weight, &dz)
}
