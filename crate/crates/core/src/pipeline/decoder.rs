//! Lab-category decoders (three-layer MLPs) and the linear task head.

use alloc::vec::Vec;
use rand::Rng;

use super::{decoder_prefix, Model, PipelineError, Result};
use crate::nn::ops::{
    add_row_bias, add_row_bias_backward, dropout, dropout_backward, matmul, matmul_backward, relu,
    relu_backward, DropoutMask,
};
use crate::nn::Matrix;

#[derive(Debug, Clone)]
pub struct DecoderCache {
    index: usize,
    input: Matrix,
    pre1: Matrix,
    mask1: DropoutMask,
    h1: Matrix,
    pre2: Matrix,
    /// Lab embedding: second hidden activation, before its dropout.
    pub hidden: Matrix,
    mask2: DropoutMask,
    h2: Matrix,
    /// Output logits; absent when the forward pass stopped at the hidden layer.
    pub logits: Option<Matrix>,
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(add_row_bias(&matmul(x, w)?, b)?)
}

/// Runs decoder `index` (0-based) on patient embeddings. With
/// `with_output == false` the last layer is skipped.
pub fn decoder_forward<R: Rng + ?Sized>(
    model: &Model,
    index: usize,
    p: &Matrix,
    train: bool,
    with_output: bool,
    rng: &mut R,
) -> Result<DecoderCache> {
    let s = &model.store;
    let pre = decoder_prefix(index);
    let g = |leaf: &str| s.get(&alloc::format!("{pre}/{leaf}"));
    let rate = model.cfg.decoder_dropout;
    let pre1 = affine(p, g("w1")?, g("b1")?)?;
    let (h1, mask1) = dropout(&relu(&pre1), rate, train, rng);
    let pre2 = affine(&h1, g("w2")?, g("b2")?)?;
    let hidden = relu(&pre2);
    let (h2, mask2, logits) = if with_output {
        let (h2, mask2) = dropout(&hidden, rate, train, rng);
        let logits = affine(&h2, g("w3")?, g("b3")?)?;
        (h2, mask2, Some(logits))
    } else {
        (Matrix::zeros(0, 0), DropoutMask::identity(), None)
    };
    Ok(DecoderCache {
        index,
        input: p.clone(),
        pre1,
        mask1,
        h1,
        pre2,
        hidden,
        mask2,
        h2,
        logits,
    })
}

/// Accumulates decoder gradients from `dlogits` and/or a gradient on the
/// hidden (lab embedding) output; returns the gradient on the input.
pub fn decoder_backward(
    model: &mut Model,
    cache: &DecoderCache,
    dlogits: Option<&Matrix>,
    dhidden: Option<&Matrix>,
) -> Result<Matrix> {
    let pre = decoder_prefix(cache.index);
    let n = |leaf: &str| alloc::format!("{pre}/{leaf}");
    let mut grads: Vec<(alloc::string::String, Matrix)> = Vec::new();
    let mut dh = Matrix::zeros(cache.hidden.rows(), cache.hidden.cols());
    if let Some(dl) = dlogits {
        let (dz, db3) = add_row_bias_backward(dl);
        let (dh2, dw3) = matmul_backward(&cache.h2, model.store.get(&n("w3"))?, &dz)?;
        grads.push((n("w3"), dw3));
        grads.push((n("b3"), db3));
        dh.add_assign(&dropout_backward(&cache.mask2, &dh2))?;
    }
    if let Some(d) = dhidden {
        dh.add_assign(d)?;
    }
    let dpre2 = relu_backward(&cache.pre2, &dh)?;
    let (dz, db2) = add_row_bias_backward(&dpre2);
    let (dh1, dw2) = matmul_backward(&cache.h1, model.store.get(&n("w2"))?, &dz)?;
    grads.push((n("w2"), dw2));
    grads.push((n("b2"), db2));
    let dpre1 = relu_backward(&cache.pre1, &dropout_backward(&cache.mask1, &dh1))?;
    let (dz, db1) = add_row_bias_backward(&dpre1);
    let (dp, dw1) = matmul_backward(&cache.input, model.store.get(&n("w1"))?, &dz)?;
    grads.push((n("w1"), dw1));
    grads.push((n("b1"), db1));
    for (name, g) in grads {
        model.store.accumulate(&name, &g)?;
    }
    Ok(dp)
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    dropped: Matrix,
    mask: DropoutMask,
    pub logits: Matrix,
}

/// `logits = dropout(z) W + bias`.
pub fn head_forward<R: Rng + ?Sized>(model: &Model, z: &Matrix, train: bool, rng: &mut R) -> Result<HeadCache> {
    if model.head.is_none() {
        return Err(PipelineError::HeadMissing);
    }
    let (dropped, mask) = dropout(z, model.cfg.head_dropout, train, rng);
    let logits = affine(&dropped, model.store.get("head/weight")?, model.store.get("head/bias")?)?;
    Ok(HeadCache { dropped, mask, logits })
}

pub(crate) fn head_backward(model: &mut Model, cache: &HeadCache, dlogits: &Matrix) -> Result<Matrix> {
    let (dz, db) = add_row_bias_backward(dlogits);
    let (dd, dw) = matmul_backward(&cache.dropped, model.store.get("head/weight")?, &dz)?;
    model.store.accumulate("head/weight", &dw)?;
    model.store.accumulate("head/bias", &db)?;
    Ok(dropout_backward(&cache.mask, &dd))
}
