//! Patient encoder: graph layers over all concepts, code-level attention
//! within each admission, a relu projection, then admission-level attention.

use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use super::{gnn_prefix, GnnKind, Model, PipelineError, Result};
use crate::ehr::Visits;
use crate::graph::Adjacency;
use crate::nn::attention::{global_attention, global_attention_backward, AttentionCache};
use crate::nn::gat::{gat_backward, gat_forward, propagation_backward, propagation_forward, GatCache, PropCache};
use crate::nn::ops::{dropout, dropout_backward, matmul, matmul_backward, relu, relu_backward, DropoutMask};
use crate::nn::{Matrix, SparsePattern};

/// Fixed graph the encoder runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub kind: GnnKind,
    /// Nonzero pattern of `A` with every self loop.
    pub pattern: SparsePattern,
    /// Attention edge bias (weighted attention only).
    pub bias: Option<Vec<f64>>,
    /// `Â` values (propagation only).
    pub weights: Vec<f64>,
}

impl GraphInput {
    pub fn new(adj: &Adjacency, kind: GnnKind) -> Self {
        Self {
            kind,
            pattern: adj.pattern.clone(),
            bias: (kind == GnnKind::AttentionWeighted).then(|| adj.log_bias()),
            weights: adj.a_hat.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Gat(GatCache),
    Prop(PropCache),
}

#[derive(Debug, Clone)]
struct VisitCache {
    codes: Vec<usize>,
    rows: Matrix,
    att: AttentionCache,
    mask: DropoutMask,
    dropped: Matrix,
    pre: Matrix,
}

#[derive(Debug, Clone)]
struct SampleCache {
    visits: Vec<VisitCache>,
    stacked: Matrix,
    att: AttentionCache,
    mask: DropoutMask,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<Matrix>,
    layers: Vec<LayerCache>,
    x: Matrix,
    samples: Vec<SampleCache>,
}

impl EncoderCache {
    /// Attention weights per sample: code level per admission, then
    /// admission level.
    pub fn attention_weights(&self) -> Vec<(Vec<Vec<f64>>, Vec<f64>)> {
        self.samples
            .iter()
            .map(|s| (s.visits.iter().map(|v| v.att.weights.clone()).collect(), s.att.weights.clone()))
            .collect()
    }

    /// Concept representations after the graph layers.
    pub fn node_states(&self) -> &Matrix {
        &self.x
    }
}

fn name(prefix: &str, leaf: &str) -> String {
    alloc::format!("{prefix}/{leaf}")
}

/// Encodes a batch of samples into patient embeddings (`batch × p`).
pub fn encoder_forward<R: Rng + ?Sized>(
    model: &Model,
    graph: &GraphInput,
    batch: &[&Visits],
    train: bool,
    rng: &mut R,
) -> Result<(Matrix, EncoderCache)> {
    let s = &model.store;
    let cfg = &model.cfg;
    if graph.kind != cfg.gnn {
        return Err(PipelineError::ConfigInvalid("graph input was built for a different GNN kind"));
    }
    let mut h = s.get("encoder/embedding")?.clone();
    let mut inputs = Vec::with_capacity(cfg.gnn_layers);
    let mut layers = Vec::with_capacity(cfg.gnn_layers);
    for l in 0..cfg.gnn_layers {
        let p = gnn_prefix(l);
        let w = s.get(&name(&p, "weight"))?;
        let (out, cache) = match graph.kind {
            GnnKind::Propagation => {
                let (o, c) = propagation_forward(&h, &graph.pattern, &graph.weights, w)?;
                (o, LayerCache::Prop(c))
            }
            _ => {
                let (o, c) = gat_forward(
                    &h,
                    &graph.pattern,
                    graph.bias.as_deref(),
                    w,
                    s.get(&name(&p, "att_src"))?,
                    s.get(&name(&p, "att_dst"))?,
                )?;
                (o, LayerCache::Gat(c))
            }
        };
        inputs.push(h);
        layers.push(cache);
        h = out;
    }
    let x = h;
    let (wc, uc) = (s.get("encoder/code_att/weight")?, s.get("encoder/code_att/context")?);
    let wu = s.get("encoder/proj/weight")?;
    let (wv, uv) = (s.get("encoder/visit_att/weight")?, s.get("encoder/visit_att/context")?);
    let mut out = Matrix::zeros(batch.len(), cfg.patient_dim);
    let mut samples = Vec::with_capacity(batch.len());
    for (b, visits) in batch.iter().enumerate() {
        if visits.is_empty() {
            return Err(PipelineError::EmptySample);
        }
        let mut vcaches = Vec::with_capacity(visits.len());
        let mut stacked = Matrix::zeros(visits.len(), cfg.patient_dim);
        for (t, codes) in visits.iter().enumerate() {
            if let Some(&bad) = codes.iter().find(|&&c| c >= x.rows()) {
                return Err(PipelineError::MissingFeatureRow(bad));
            }
            let rows = x.gather_rows(codes);
            let (v, att) = global_attention(&rows, wc, uc)?;
            let (dropped, mask) = dropout(&v, cfg.attention_dropout, train, rng);
            let pre = matmul(&dropped, wu)?;
            stacked.row_mut(t).copy_from_slice(relu(&pre).as_slice());
            vcaches.push(VisitCache {
                codes: codes.clone(),
                rows,
                att,
                mask,
                dropped,
                pre,
            });
        }
        let (p, att) = global_attention(&stacked, wv, uv)?;
        let (pd, mask) = dropout(&p, cfg.attention_dropout, train, rng);
        out.row_mut(b).copy_from_slice(pd.as_slice());
        samples.push(SampleCache {
            visits: vcaches,
            stacked,
            att,
            mask,
        });
    }
    Ok((out, EncoderCache { inputs, layers, x, samples }))
}

/// Eval-mode embeddings of many samples.
pub fn encode(model: &Model, graph: &GraphInput, batch: &[&Visits]) -> Result<Matrix> {
    let mut unused = crate::rng::seeded(0);
    Ok(encoder_forward(model, graph, batch, false, &mut unused)?.0)
}

/// Accumulates encoder gradients for the upstream gradient `dp`
/// (`batch × p`).
pub fn encoder_backward(model: &mut Model, graph: &GraphInput, cache: &EncoderCache, dp: &Matrix) -> Result<()> {
    let cfg = model.cfg.clone();
    let s = &model.store;
    let (wc, uc) = (s.get("encoder/code_att/weight")?, s.get("encoder/code_att/context")?);
    let wu = s.get("encoder/proj/weight")?;
    let (wv, uv) = (s.get("encoder/visit_att/weight")?, s.get("encoder/visit_att/context")?);
    let mut dx = Matrix::zeros(cache.x.rows(), cache.x.cols());
    let mut dwc = Matrix::zeros(wc.rows(), wc.cols());
    let mut duc = Matrix::zeros(uc.rows(), 1);
    let mut dwu = Matrix::zeros(wu.rows(), wu.cols());
    let mut dwv = Matrix::zeros(wv.rows(), wv.cols());
    let mut duv = Matrix::zeros(uv.rows(), 1);
    for (b, sc) in cache.samples.iter().enumerate() {
        let dpd = Matrix::row_vector(dp.row(b).to_vec());
        let dpool = dropout_backward(&sc.mask, &dpd);
        let g = global_attention_backward(&sc.stacked, wv, uv, &sc.att, &dpool)?;
        dwv.add_assign(&g.dweight)?;
        duv.add_assign(&g.dcontext)?;
        for (t, vc) in sc.visits.iter().enumerate() {
            let dv = Matrix::row_vector(g.dx.row(t).to_vec());
            let dpre = relu_backward(&vc.pre, &dv)?;
            let (ddropped, dw) = matmul_backward(&vc.dropped, wu, &dpre)?;
            dwu.add_assign(&dw)?;
            let dpool = dropout_backward(&vc.mask, &ddropped);
            let ga = global_attention_backward(&vc.rows, wc, uc, &vc.att, &dpool)?;
            dwc.add_assign(&ga.dweight)?;
            duc.add_assign(&ga.dcontext)?;
            dx.scatter_add_rows(&vc.codes, &ga.dx)?;
        }
    }
    let mut grads: Vec<(String, Matrix)> = alloc::vec![
        ("encoder/code_att/weight".into(), dwc),
        ("encoder/code_att/context".into(), duc),
        ("encoder/proj/weight".into(), dwu),
        ("encoder/visit_att/weight".into(), dwv),
        ("encoder/visit_att/context".into(), duv),
    ];
    let mut dh = dx;
    for l in (0..cfg.gnn_layers).rev() {
        let p = gnn_prefix(l);
        let w = s.get(&name(&p, "weight"))?;
        let input = &cache.inputs[l];
        match &cache.layers[l] {
            LayerCache::Prop(c) => {
                let (d, dw) = propagation_backward(input, &graph.pattern, &graph.weights, c, w, &dh)?;
                grads.push((name(&p, "weight"), dw));
                dh = d;
            }
            LayerCache::Gat(c) => {
                let g = gat_backward(
                    input,
                    &graph.pattern,
                    c,
                    w,
                    s.get(&name(&p, "att_src"))?,
                    s.get(&name(&p, "att_dst"))?,
                    &dh,
                )?;
                grads.push((name(&p, "weight"), g.dweight));
                grads.push((name(&p, "att_src"), g.datt_src));
                grads.push((name(&p, "att_dst"), g.datt_dst));
                dh = g.dh;
            }
        }
    }
    grads.push(("encoder/embedding".into(), dh));
    for (n, g) in grads {
        model.store.accumulate(&n, &g)?;
    }
    Ok(())
}
