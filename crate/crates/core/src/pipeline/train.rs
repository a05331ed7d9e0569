//! Training loops: joint proxy pretraining, per-decoder refinement with a
//! frozen encoder, and task training on the direct or finetune path.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use super::decoder::{decoder_backward, head_backward};
use super::{
    decoder_forward, decoder_prefix, encode, encoder_backward, encoder_forward, head_forward, GraphInput, HeadSpec,
    Model, PipelineError, Result, TrainConfig,
};
use crate::ehr::{DownstreamSample, ProxySample, Task, Visits};
use crate::metrics::{diagnosis_metrics, hf_metrics, MetricSet};
use crate::nn::ops::{bce_with_logits, bce_with_logits_backward, concat_cols, concat_cols_backward, logistic};
use crate::nn::{adam_step, decayed_lr, Matrix};
use crate::rng::{derive_seed, seeded, SeededRng};

/// How a task head reads the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// Head on the patient embedding alone.
    Direct,
    /// Head on the three lab embeddings concatenated with the patient embedding.
    Finetune,
}

impl core::str::FromStr for Path {
    type Err = String;
    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s {
            "direct" => Ok(Path::Direct),
            "finetune" => Ok(Path::Finetune),
            _ => Err(alloc::format!("unknown path {s}")),
        }
    }
}

fn batches(n: usize, size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

fn proxy_targets(samples: &[ProxySample], idx: &[usize], cat: usize) -> Result<Matrix> {
    let width = samples.first().map_or(0, |s| s.targets[cat].len());
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&samples[i].targets[cat]);
    }
    Ok(Matrix::from_vec(idx.len(), width, data)?)
}

fn task_targets(samples: &[DownstreamSample], idx: &[usize]) -> Result<Matrix> {
    let width = samples.first().map_or(0, |s| s.target.len());
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&samples[i].target);
    }
    Ok(Matrix::from_vec(idx.len(), width, data)?)
}

/// Multi-hot targets of all samples, one matrix per lab category.
pub fn proxy_target_matrices(samples: &[ProxySample]) -> Result<[Matrix; 3]> {
    let all: Vec<usize> = (0..samples.len()).collect();
    Ok([proxy_targets(samples, &all, 0)?, proxy_targets(samples, &all, 1)?, proxy_targets(samples, &all, 2)?])
}

/// Mean of the three per-category BCE values.
pub fn proxy_loss(logits: &[Matrix; 3], targets: &[Matrix; 3]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..3 {
        total += bce_with_logits(&logits[i], &targets[i])?;
    }
    Ok(total / 3.0)
}

/// Eval-mode decoder logits for every sample.
pub fn proxy_logits(model: &Model, graph: &GraphInput, samples: &[ProxySample]) -> Result<[Matrix; 3]> {
    let visits: Vec<&Visits> = samples.iter().map(|s| &s.visits).collect();
    let p = encode(model, graph, &visits)?;
    let mut rng = seeded(0);
    let mut out: [Matrix; 3] = Default::default();
    for (i, o) in out.iter_mut().enumerate() {
        *o = decoder_forward(model, i, &p, false, true, &mut rng)?.logits.expect("output requested");
    }
    Ok(out)
}

/// Forward and backward pass of the averaged proxy loss on samples `idx`;
/// gradients are accumulated in the store and the loss is returned.
pub fn proxy_batch_gradients(
    model: &mut Model,
    graph: &GraphInput,
    samples: &[ProxySample],
    idx: &[usize],
    train: bool,
    rng: &mut SeededRng,
) -> Result<f64> {
    let visits: Vec<&Visits> = idx.iter().map(|&i| &samples[i].visits).collect();
    let (p, enc) = encoder_forward(model, graph, &visits, train, rng)?;
    let mut dp = Matrix::zeros(p.rows(), p.cols());
    let mut loss = 0.0;
    for cat in 0..3 {
        let y = proxy_targets(samples, idx, cat)?;
        let dc = decoder_forward(model, cat, &p, train, true, rng)?;
        let logits = dc.logits.as_ref().expect("output requested");
        loss += bce_with_logits(logits, &y)? / 3.0;
        let mut dl = bce_with_logits_backward(logits, &y)?;
        dl.scale(1.0 / 3.0);
        dp.add_assign(&decoder_backward(model, &dc, Some(&dl), None)?)?;
    }
    encoder_backward(model, graph, &enc, &dp)?;
    Ok(loss)
}

/// Forward and backward pass of the task loss through the attached head.
pub fn task_batch_gradients(
    model: &mut Model,
    graph: &GraphInput,
    samples: &[DownstreamSample],
    idx: &[usize],
    train: bool,
    rng: &mut SeededRng,
) -> Result<f64> {
    let path = head_spec(model)?.path;
    let lab = model.cfg.lab_dim();
    let widths = [lab, lab, lab, model.cfg.patient_dim];
    let visits: Vec<&Visits> = idx.iter().map(|&i| &samples[i].visits).collect();
    let (p, enc) = encoder_forward(model, graph, &visits, train, rng)?;
    let mut decs = Vec::new();
    let z = match path {
        Path::Direct => p.clone(),
        Path::Finetune => {
            for cat in 0..3 {
                decs.push(decoder_forward(model, cat, &p, train, false, rng)?);
            }
            concat_cols(&[&decs[0].hidden, &decs[1].hidden, &decs[2].hidden, &p])?
        }
    };
    let hc = head_forward(model, &z, train, rng)?;
    let y = task_targets(samples, idx)?;
    let loss = bce_with_logits(&hc.logits, &y)?;
    let dl = bce_with_logits_backward(&hc.logits, &y)?;
    let dz = head_backward(model, &hc, &dl)?;
    let dp = match path {
        Path::Direct => dz,
        Path::Finetune => {
            let parts = concat_cols_backward(&dz, &widths)?;
            let mut dp = parts[3].clone();
            for (cat, dc) in decs.iter().enumerate() {
                dp.add_assign(&decoder_backward(model, dc, None, Some(&parts[cat]))?)?;
            }
            dp
        }
    };
    encoder_backward(model, graph, &enc, &dp)?;
    Ok(loss)
}

/// Jointly trains encoder and decoders on the averaged proxy loss. Returns
/// the sample-weighted mean training loss of every epoch; `on_epoch`
/// receives `(epoch, loss)`.
pub fn proxy_joint_train(
    model: &mut Model,
    graph: &GraphInput,
    samples: &[ProxySample],
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if epochs > 0 && samples.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let mut order_rng = seeded(derive_seed(cfg.seed, 10));
    let mut drop_rng = seeded(derive_seed(cfg.seed, 11));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = decayed_lr(cfg.lr, epoch);
        let mut total = 0.0;
        for idx in batches(samples.len(), cfg.batch_size, &mut order_rng) {
            let loss = proxy_batch_gradients(model, graph, samples, &idx, true, &mut drop_rng)?;
            adam_step(&mut model.store, &cfg.adam, lr, |n| {
                n.starts_with("encoder/") || n.starts_with("decoder/")
            })?;
            total += loss * idx.len() as f64;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

/// Per-category training loss (eval mode) before and after refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualReport {
    pub before: [f64; 3],
    pub after: [f64; 3],
}

fn category_losses(model: &Model, p: &Matrix, targets: &[Matrix; 3]) -> Result<[f64; 3]> {
    let mut rng = seeded(0);
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let dc = decoder_forward(model, i, p, false, true, &mut rng)?;
        *o = bce_with_logits(dc.logits.as_ref().expect("output requested"), &targets[i])?;
    }
    Ok(out)
}

/// Refines each decoder on its own category loss with the encoder frozen.
/// Decoders are trained one after another, `epochs` each, on patient
/// embeddings computed once in eval mode.
pub fn proxy_individual_train(
    model: &mut Model,
    graph: &GraphInput,
    samples: &[ProxySample],
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(usize, usize, f64),
) -> Result<IndividualReport> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let visits: Vec<&Visits> = samples.iter().map(|s| &s.visits).collect();
    let p = encode(model, graph, &visits)?;
    let targets = proxy_target_matrices(samples)?;
    let before = category_losses(model, &p, &targets)?;
    model.store.freeze("encoder/");
    let result = (|| -> Result<()> {
        for (cat, y) in targets.iter().enumerate() {
            refine_decoder(model, &p, y, cat, cfg, epochs, &mut |e, l| on_epoch(cat, e, l))?;
        }
        Ok(())
    })();
    model.store.unfreeze_all();
    result?;
    let after = category_losses(model, &p, &targets)?;
    Ok(IndividualReport { before, after })
}

/// Trains decoder `cat` alone on fixed patient embeddings `p` against
/// targets `y`. Only `decoder/{cat+1}/…` receives updates.
pub fn refine_decoder(
    model: &mut Model,
    p: &Matrix,
    y: &Matrix,
    cat: usize,
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<()> {
    let n = p.rows();
    if n == 0 {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let mut order_rng = seeded(derive_seed(cfg.seed, 30 + cat as u64));
    let mut drop_rng = seeded(derive_seed(cfg.seed, 40 + cat as u64));
    let prefix = alloc::format!("{}/", decoder_prefix(cat));
    for epoch in 0..epochs {
        let lr = decayed_lr(cfg.lr, epoch);
        let mut total = 0.0;
        for idx in batches(n, cfg.batch_size, &mut order_rng) {
            let yb = y.gather_rows(&idx);
            let dc = decoder_forward(model, cat, &p.gather_rows(&idx), true, true, &mut drop_rng)?;
            let logits = dc.logits.as_ref().expect("output requested");
            total += bce_with_logits(logits, &yb)? * idx.len() as f64;
            let dl = bce_with_logits_backward(logits, &yb)?;
            decoder_backward(model, &dc, Some(&dl), None)?;
            adam_step(&mut model.store, &cfg.adam, lr, |n| n.starts_with(&prefix))?;
        }
        on_epoch(epoch, total / n as f64);
    }
    Ok(())
}

/// Eval-mode lab embeddings (second decoder hidden layer) for patient
/// embeddings `p`.
pub fn lab_embeddings(model: &Model, p: &Matrix) -> Result<[Matrix; 3]> {
    let mut rng = seeded(0);
    let mut out: [Matrix; 3] = Default::default();
    for (i, o) in out.iter_mut().enumerate() {
        *o = decoder_forward(model, i, p, false, false, &mut rng)?.hidden;
    }
    Ok(out)
}

fn head_spec(model: &Model) -> Result<HeadSpec> {
    model.head.ok_or(PipelineError::HeadMissing)
}

/// Trains a task head together with the encoder (and, on the finetune
/// path, the decoder layers feeding the lab embeddings). A head is attached
/// on first use. Returns per-epoch mean training loss.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut Model,
    graph: &GraphInput,
    samples: &[DownstreamSample],
    task: Task,
    path: Path,
    cfg: &TrainConfig,
    epochs: usize,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    let spec = HeadSpec {
        task,
        path,
        outputs: samples[0].target.len(),
    };
    match model.head {
        None => model.attach_head(spec, cfg.seed)?,
        Some(h) if h != spec => return Err(PipelineError::HeadMismatch),
        Some(_) => {}
    }
    let mut order_rng = seeded(derive_seed(cfg.seed, 20));
    let mut drop_rng = seeded(derive_seed(cfg.seed, 21));
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = decayed_lr(cfg.lr, epoch);
        let mut total = 0.0;
        for idx in batches(samples.len(), cfg.batch_size, &mut order_rng) {
            total += task_batch_gradients(model, graph, samples, &idx, true, &mut drop_rng)? * idx.len() as f64;
            adam_step(&mut model.store, &cfg.adam, lr, |n| match path {
                Path::Direct => n.starts_with("encoder/") || n.starts_with("head/"),
                Path::Finetune => {
                    n.starts_with("encoder/")
                        || n.starts_with("head/")
                        || (n.starts_with("decoder/") && !n.ends_with("/w3") && !n.ends_with("/b3"))
                }
            })?;
        }
        let mean = total / samples.len() as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok(losses)
}

/// Eval-mode probabilities (`samples × outputs`) from the attached head.
pub fn predict(model: &Model, graph: &GraphInput, visits: &[&Visits]) -> Result<Matrix> {
    let spec = head_spec(model)?;
    let p = encode(model, graph, visits)?;
    let z = match spec.path {
        Path::Direct => p,
        Path::Finetune => {
            let l = lab_embeddings(model, &p)?;
            concat_cols(&[&l[0], &l[1], &l[2], &p])?
        }
    };
    let hc = head_forward(model, &z, false, &mut seeded(0))?;
    Ok(logistic(&hc.logits))
}

/// Task metrics of the attached head on `samples`.
pub fn evaluate(model: &Model, graph: &GraphInput, samples: &[DownstreamSample]) -> Result<MetricSet> {
    let spec = head_spec(model)?;
    let visits: Vec<&Visits> = samples.iter().map(|s| &s.visits).collect();
    let probs = predict(model, graph, &visits)?;
    let preds: Vec<Vec<f64>> = (0..probs.rows()).map(|i| probs.row(i).to_vec()).collect();
    let truths: Vec<Vec<f64>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok(match spec.task {
        Task::Diagnosis => diagnosis_metrics(&preds, &truths)?,
        Task::Hf => {
            let scores: Vec<f64> = preds.iter().map(|r| r[0]).collect();
            let labels: Vec<f64> = truths.iter().map(|r| r[0]).collect();
            hf_metrics(&scores, &labels)?
        }
    })
}
