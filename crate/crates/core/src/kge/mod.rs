//! Polar (modulus + phase) knowledge-graph embedding.
//!
//! An entity is a modulus vector `e_r` and a phase vector `e_a`; a relation
//! scales moduli elementwise and shifts phases. For a triple `(h, r, t)`:
//! `d_r = ‖h_r ∘ r_r − t_r‖₂`, `d_a = Σ |sin((h_a + r_a − t_a)/2)|` and
//! `d = d_r + λ·d_a`. Training minimizes the negative-sampling loss
//! `−ln σ(γ − d) − Σ ln σ(d' − γ)` with Adam.

mod eval;
mod train;
mod toy;

pub use eval::{evaluate_link_prediction, random_guess_mrr, DirectionMetrics, RankingReport};
pub use train::{loss_and_gradients, loss_check_case, sample_batch, train_kge, Batch, KgeGrads, KgeTrainConfig};
pub use toy::{hierarchy_graph, split_triples, toy_hierarchy, IS_A, LINKED_TO, SIBLING_OF};

use alloc::vec::Vec;
use core::f64::consts::TAU;
use rand::Rng;

use crate::nn::Matrix;
use crate::nn::ops::softplus;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KgeError {
    #[error("{kind} index {index} out of range (size {size})")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid embedding config: {0}")]
    ConfigInvalid(&'static str),
}

pub type Result<T> = core::result::Result<T, KgeError>;

/// Id triple `(head, relation, tail)`.
pub type IdTriple = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct PolarTable {
    pub entity_modulus: Matrix,
    pub entity_phase: Matrix,
    pub relation_modulus: Matrix,
    pub relation_phase: Matrix,
}

impl PolarTable {
    /// Moduli uniform in `[−γ/2k, γ/2k]`, phases uniform in `[0, 2π)`.
    pub fn init<R: Rng + ?Sized>(n_entities: usize, n_relations: usize, k: usize, gamma: f64, rng: &mut R) -> Self {
        let bound = 0.5 * gamma / k as f64;
        let mut modulus = |n: usize| Matrix::from_fn(n, k, |_, _| rng.random_range(-bound..=bound));
        let entity_modulus = modulus(n_entities);
        let relation_modulus = modulus(n_relations);
        let mut phase = |n: usize| Matrix::from_fn(n, k, |_, _| rng.random_range(0.0..TAU));
        let entity_phase = phase(n_entities);
        let relation_phase = phase(n_relations);
        Self {
            entity_modulus,
            entity_phase,
            relation_modulus,
            relation_phase,
        }
    }

    pub fn k(&self) -> usize {
        self.entity_modulus.cols()
    }

    pub fn n_entities(&self) -> usize {
        self.entity_modulus.rows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_modulus.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.entity_modulus.is_finite()
            && self.entity_phase.is_finite()
            && self.relation_modulus.is_finite()
            && self.relation_phase.is_finite()
    }

    fn check(&self, (h, r, t): IdTriple) -> Result<()> {
        let ne = self.n_entities();
        for i in [h, t] {
            if i >= ne {
                return Err(KgeError::IndexOutOfRange {
                    kind: "entity",
                    index: i,
                    size: ne,
                });
            }
        }
        if r >= self.n_relations() {
            return Err(KgeError::IndexOutOfRange {
                kind: "relation",
                index: r,
                size: self.n_relations(),
            });
        }
        Ok(())
    }
}

/// Reduces an angle to `[0, 2π)`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = libm::fmod(x, TAU);
    if r < 0.0 {
        // r + 2π can round up to exactly 2π for tiny negative r
        let w = r + TAU;
        if w >= TAU {
            0.0
        } else {
            w
        }
    } else {
        r
    }
}

pub(crate) fn radial_unchecked(t: &PolarTable, (h, r, tl): IdTriple) -> f64 {
    let (hm, rm, tm) = (t.entity_modulus.row(h), t.relation_modulus.row(r), t.entity_modulus.row(tl));
    let mut s = 0.0;
    for i in 0..hm.len() {
        let e = hm[i] * rm[i] - tm[i];
        s += e * e;
    }
    libm::sqrt(s)
}

pub(crate) fn angular_unchecked(t: &PolarTable, (h, r, tl): IdTriple) -> f64 {
    let (ha, ra, ta) = (t.entity_phase.row(h), t.relation_phase.row(r), t.entity_phase.row(tl));
    let mut s = 0.0;
    for i in 0..ha.len() {
        let d = wrap_angle(ha[i] + ra[i] - ta[i]);
        s += libm::fabs(libm::sin(d / 2.0));
    }
    s
}

pub fn radial_distance(table: &PolarTable, triple: IdTriple) -> Result<f64> {
    table.check(triple)?;
    Ok(radial_unchecked(table, triple))
}

pub fn angular_distance(table: &PolarTable, triple: IdTriple) -> Result<f64> {
    table.check(triple)?;
    Ok(angular_unchecked(table, triple))
}

pub fn triple_distance(table: &PolarTable, triple: IdTriple, lambda: f64) -> Result<f64> {
    table.check(triple)?;
    Ok(radial_unchecked(table, triple) + lambda * angular_unchecked(table, triple))
}

/// `−ln σ(γ − d_pos) − Σ ln σ(d_neg − γ)`, evaluated through softplus.
pub fn nll_loss(d_pos: f64, d_neg: &[f64], gamma: f64) -> f64 {
    softplus(d_pos - gamma) + d_neg.iter().map(|&d| softplus(gamma - d)).sum::<f64>()
}

/// Encoder prior: row `i` is `[modulus ; phase mod 2π]` of entity `ids[i]`.
pub fn export_entity_embeddings(table: &PolarTable, ids: &[usize]) -> Result<Matrix> {
    let k = table.k();
    let mut out = Matrix::zeros(ids.len(), 2 * k);
    for (row, &id) in ids.iter().enumerate() {
        if id >= table.n_entities() {
            return Err(KgeError::IndexOutOfRange {
                kind: "entity",
                index: id,
                size: table.n_entities(),
            });
        }
        let dst = out.row_mut(row);
        dst[..k].copy_from_slice(table.entity_modulus.row(id));
        for (d, &p) in dst[k..].iter_mut().zip(table.entity_phase.row(id)) {
            *d = wrap_angle(p);
        }
    }
    Ok(out)
}

/// All entity rows, in id order.
pub fn export_all(table: &PolarTable) -> Matrix {
    let ids: Vec<usize> = (0..table.n_entities()).collect();
    export_entity_embeddings(table, &ids).expect("ids in range")
}
