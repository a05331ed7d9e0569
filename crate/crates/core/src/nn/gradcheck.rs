//! Central finite-difference checks for every backward rule.
//!
//! Each case builds random inputs and a closure returning a scalar loss plus
//! its analytic input gradients. Vector-valued primitives are reduced to a
//! scalar by a fixed random projection `L = Σ R ⊙ f(x)`, so the backward rule
//! is exercised with upstream gradient `R`. Instances whose inputs sit within
//! [`KINK_MARGIN`] of a non-differentiable point are redrawn.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::attention::{global_attention, global_attention_backward};
use super::gat::{gat_backward, gat_forward, propagation_backward, propagation_forward};
use super::ops;
use super::{Matrix, Result, SparsePattern};
use crate::rng::{derive_seed, seeded, SeededRng};

pub const EPS: f64 = 1e-5;
pub const KINK_MARGIN: f64 = 1e-3;

pub type LossFn = Box<dyn Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>>;

/// One randomized gradient-check problem.
pub struct Instance {
    pub inputs: Vec<Matrix>,
    pub loss: LossFn,
    /// Smallest distance of any kink argument from its kink at the base point;
    /// `f64::INFINITY` for smooth functions.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-6);
    libm::fabs(analytic - numeric) / scale
}

/// Max relative error between analytic and central-difference gradients
/// over every input entry.
pub fn check_instance(inst: &Instance, eps: f64) -> Result<f64> {
    let (_, analytic) = (inst.loss)(&inst.inputs)?;
    let mut inputs = inst.inputs.clone();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for e in 0..inputs[k].len() {
            let orig = inputs[k].as_slice()[e];
            inputs[k].as_mut_slice()[e] = orig + eps;
            let (lp, _) = (inst.loss)(&inputs)?;
            inputs[k].as_mut_slice()[e] = orig - eps;
            let (lm, _) = (inst.loss)(&inputs)?;
            inputs[k].as_mut_slice()[e] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[k].as_slice()[e], numeric));
        }
    }
    Ok(worst)
}

/// Draws instances from `make` until `count` of them clear the kink margin,
/// and reports the worst relative error.
pub fn run_case(
    name: &str,
    count: usize,
    rng: &mut SeededRng,
    make: &dyn Fn(&mut SeededRng) -> Result<Instance>,
) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut attempts = 0;
    while done < count && attempts < count * 50 {
        attempts += 1;
        let inst = make(rng)?;
        if inst.margin < KINK_MARGIN {
            continue;
        }
        worst = worst.max(check_instance(&inst, EPS)?);
        done += 1;
    }
    Ok(CheckReport {
        name: name.to_string(),
        instances: done,
        max_rel_err: worst,
    })
}

pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn dim(rng: &mut SeededRng) -> usize {
    rng.random_range(1..=5)
}

fn min_abs(xs: &[f64]) -> f64 {
    xs.iter().map(|x| libm::fabs(*x)).fold(f64::INFINITY, f64::min)
}

fn project(out: &Matrix, r: &Matrix) -> f64 {
    ops::dot(out.as_slice(), r.as_slice())
}

fn unary(
    rng: &mut SeededRng,
    fwd: fn(&Matrix) -> Matrix,
    bwd: fn(&Matrix, &Matrix, &Matrix) -> Result<Matrix>,
    kinked: bool,
) -> Instance {
    let (n, m) = (dim(rng), dim(rng));
    let x = random_matrix(rng, n, m, 2.0);
    let r = random_matrix(rng, n, m, 1.0);
    let margin = if kinked { min_abs(x.as_slice()) } else { f64::INFINITY };
    Instance {
        inputs: vec![x],
        margin,
        loss: Box::new(move |xs| {
            let y = fwd(&xs[0]);
            Ok((project(&y, &r), vec![bwd(&xs[0], &y, &r)?]))
        }),
    }
}

fn random_pattern(rng: &mut SeededRng, n: usize, density: f64) -> SparsePattern {
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..n).filter(|_| rng.random::<f64>() < density).collect())
        .collect();
    SparsePattern::from_rows(n, &rows)
}

fn case_matmul(rng: &mut SeededRng) -> Result<Instance> {
    let (n, k, m) = (dim(rng), dim(rng), dim(rng));
    let a = random_matrix(rng, n, k, 1.0);
    let b = random_matrix(rng, k, m, 1.0);
    let r = random_matrix(rng, n, m, 1.0);
    Ok(Instance {
        inputs: vec![a, b],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let c = ops::matmul(&xs[0], &xs[1])?;
            let (da, db) = ops::matmul_backward(&xs[0], &xs[1], &r)?;
            Ok((project(&c, &r), vec![da, db]))
        }),
    })
}

fn case_add(rng: &mut SeededRng) -> Result<Instance> {
    let (n, m) = (dim(rng), dim(rng));
    let a = random_matrix(rng, n, m, 1.0);
    let b = random_matrix(rng, n, m, 1.0);
    let r = random_matrix(rng, n, m, 1.0);
    Ok(Instance {
        inputs: vec![a, b],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let c = ops::add(&xs[0], &xs[1])?;
            let (da, db) = ops::add_backward(&r);
            Ok((project(&c, &r), vec![da, db]))
        }),
    })
}

fn case_row_bias(rng: &mut SeededRng) -> Result<Instance> {
    let (n, m) = (dim(rng), dim(rng));
    let x = random_matrix(rng, n, m, 1.0);
    let b = random_matrix(rng, 1, m, 1.0);
    let r = random_matrix(rng, n, m, 1.0);
    Ok(Instance {
        inputs: vec![x, b],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let y = ops::add_row_bias(&xs[0], &xs[1])?;
            let (dx, db) = ops::add_row_bias_backward(&r);
            Ok((project(&y, &r), vec![dx, db]))
        }),
    })
}

fn case_tanh(rng: &mut SeededRng) -> Result<Instance> {
    Ok(unary(rng, ops::tanh, |_, y, d| ops::tanh_backward(y, d), false))
}

fn case_relu(rng: &mut SeededRng) -> Result<Instance> {
    Ok(unary(rng, ops::relu, |x, _, d| ops::relu_backward(x, d), true))
}

fn case_leaky_relu(rng: &mut SeededRng) -> Result<Instance> {
    Ok(unary(rng, ops::leaky_relu, |x, _, d| ops::leaky_relu_backward(x, d), true))
}

fn case_logistic(rng: &mut SeededRng) -> Result<Instance> {
    Ok(unary(rng, ops::logistic, |_, y, d| ops::logistic_backward(y, d), false))
}

fn case_row_softmax(rng: &mut SeededRng) -> Result<Instance> {
    Ok(unary(rng, ops::row_softmax, |_, y, d| ops::row_softmax_backward(y, d), false))
}

fn case_dropout(rng: &mut SeededRng) -> Result<Instance> {
    let (n, m) = (dim(rng), dim(rng));
    let x = random_matrix(rng, n, m, 1.0);
    let r = random_matrix(rng, n, m, 1.0);
    let seed: u64 = rng.random();
    Ok(Instance {
        inputs: vec![x],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let (y, mask) = ops::dropout(&xs[0], 0.3, true, &mut seeded(seed));
            Ok((project(&y, &r), vec![ops::dropout_backward(&mask, &r)]))
        }),
    })
}

fn case_concat(rng: &mut SeededRng) -> Result<Instance> {
    let n = dim(rng);
    let widths = [dim(rng), dim(rng), dim(rng)];
    let inputs: Vec<Matrix> = widths.iter().map(|&w| random_matrix(rng, n, w, 1.0)).collect();
    let r = random_matrix(rng, n, widths.iter().sum(), 1.0);
    Ok(Instance {
        inputs,
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let refs: Vec<&Matrix> = xs.iter().collect();
            let y = ops::concat_cols(&refs)?;
            Ok((project(&y, &r), ops::concat_cols_backward(&r, &widths)?))
        }),
    })
}

fn case_neighbor_sum(rng: &mut SeededRng) -> Result<Instance> {
    let n = dim(rng) + 1;
    let d = dim(rng);
    let p = random_pattern(rng, n, 0.5).with_self_loops();
    let w = random_matrix(rng, p.nnz(), 1, 1.0);
    let v = random_matrix(rng, n, d, 1.0);
    let r = random_matrix(rng, n, d, 1.0);
    Ok(Instance {
        inputs: vec![w, v],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let y = ops::neighbor_weighted_sum(&p, xs[0].as_slice(), &xs[1])?;
            let (dw, dv) = ops::neighbor_weighted_sum_backward(&p, xs[0].as_slice(), &xs[1], &r)?;
            Ok((project(&y, &r), vec![Matrix::from_vec(dw.len(), 1, dw)?, dv]))
        }),
    })
}

fn case_sparse_softmax(rng: &mut SeededRng) -> Result<Instance> {
    let n = dim(rng) + 1;
    let p = random_pattern(rng, n, 0.5).with_self_loops();
    let s = random_matrix(rng, p.nnz(), 1, 2.0);
    let r = random_matrix(rng, p.nnz(), 1, 1.0);
    Ok(Instance {
        inputs: vec![s],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let y = ops::sparse_row_softmax(&p, xs[0].as_slice());
            let dx = ops::sparse_row_softmax_backward(&p, &y, r.as_slice());
            let loss = ops::dot(&y, r.as_slice());
            Ok((loss, vec![Matrix::from_vec(dx.len(), 1, dx)?]))
        }),
    })
}

fn case_bce(rng: &mut SeededRng) -> Result<Instance> {
    let (n, m) = (dim(rng), dim(rng));
    let z = random_matrix(rng, n, m, 4.0);
    let y = Matrix::from_fn(n, m, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
    Ok(Instance {
        inputs: vec![z],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let l = ops::bce_with_logits(&xs[0], &y)?;
            Ok((l, vec![ops::bce_with_logits_backward(&xs[0], &y)?]))
        }),
    })
}

fn gat_case(rng: &mut SeededRng, weighted: bool) -> Result<Instance> {
    let n = dim(rng) + 1;
    let (din, dout) = (dim(rng), dim(rng));
    let p = random_pattern(rng, n, 0.4).with_self_loops();
    let bias: Option<Vec<f64>> =
        weighted.then(|| (0..p.nnz()).map(|_| libm::log(rng.random_range(0.1..3.0))).collect());
    let h = random_matrix(rng, n, din, 1.0);
    let w = random_matrix(rng, din, dout, 1.0);
    let a_s = random_matrix(rng, dout, 1, 1.0);
    let a_d = random_matrix(rng, dout, 1, 1.0);
    let r = random_matrix(rng, n, dout, 1.0);
    let (_, cache) = gat_forward(&h, &p, bias.as_deref(), &w, &a_s, &a_d)?;
    let margin = min_abs(&cache.raw).min(min_abs(cache.pre.as_slice()));
    Ok(Instance {
        inputs: vec![h, w, a_s, a_d],
        margin,
        loss: Box::new(move |xs| {
            let (y, cache) = gat_forward(&xs[0], &p, bias.as_deref(), &xs[1], &xs[2], &xs[3])?;
            let g = gat_backward(&xs[0], &p, &cache, &xs[1], &xs[2], &xs[3], &r)?;
            Ok((project(&y, &r), vec![g.dh, g.dweight, g.datt_src, g.datt_dst]))
        }),
    })
}

fn case_gat(rng: &mut SeededRng) -> Result<Instance> {
    gat_case(rng, false)
}

fn case_gat_weighted(rng: &mut SeededRng) -> Result<Instance> {
    gat_case(rng, true)
}

fn case_propagation(rng: &mut SeededRng) -> Result<Instance> {
    let n = dim(rng) + 1;
    let (din, dout) = (dim(rng), dim(rng));
    let p = random_pattern(rng, n, 0.4).with_self_loops();
    let ew: Vec<f64> = (0..p.nnz()).map(|_| rng.random_range(0.0..1.0)).collect();
    let h = random_matrix(rng, n, din, 1.0);
    let w = random_matrix(rng, din, dout, 1.0);
    let r = random_matrix(rng, n, dout, 1.0);
    let (_, cache) = propagation_forward(&h, &p, &ew, &w)?;
    let margin = min_abs(cache.pre.as_slice());
    Ok(Instance {
        inputs: vec![h, w],
        margin,
        loss: Box::new(move |xs| {
            let (y, cache) = propagation_forward(&xs[0], &p, &ew, &xs[1])?;
            let (dh, dw) = propagation_backward(&xs[0], &p, &ew, &cache, &xs[1], &r)?;
            Ok((project(&y, &r), vec![dh, dw]))
        }),
    })
}

fn case_global_attention(rng: &mut SeededRng) -> Result<Instance> {
    let (m, d, a) = (dim(rng), dim(rng), dim(rng));
    let x = random_matrix(rng, m, d, 1.0);
    let w = random_matrix(rng, d, a, 1.0);
    let u = random_matrix(rng, a, 1, 1.0);
    let r = random_matrix(rng, 1, d, 1.0);
    Ok(Instance {
        inputs: vec![x, w, u],
        margin: f64::INFINITY,
        loss: Box::new(move |xs| {
            let (pooled, cache) = global_attention(&xs[0], &xs[1], &xs[2])?;
            let g = global_attention_backward(&xs[0], &xs[1], &xs[2], &cache, &r)?;
            Ok((project(&pooled, &r), vec![g.dx, g.dweight, g.dcontext]))
        }),
    })
}

type CaseFn = fn(&mut SeededRng) -> Result<Instance>;

/// Every dense primitive and layer, by report name.
pub const CASES: &[(&str, CaseFn)] = &[
    ("matmul", case_matmul),
    ("add", case_add),
    ("add_row_bias", case_row_bias),
    ("tanh", case_tanh),
    ("relu", case_relu),
    ("leaky_relu", case_leaky_relu),
    ("logistic", case_logistic),
    ("row_softmax", case_row_softmax),
    ("dropout", case_dropout),
    ("concat", case_concat),
    ("neighbor_weighted_sum", case_neighbor_sum),
    ("sparse_row_softmax", case_sparse_softmax),
    ("bce_with_logits", case_bce),
    ("graph_attention", case_gat),
    ("graph_attention_weighted", case_gat_weighted),
    ("propagation", case_propagation),
    ("global_attention", case_global_attention),
];

/// Runs every case in [`CASES`] with `count` instances each.
pub fn run_suite(count: usize, seed: u64) -> Result<Vec<CheckReport>> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, (name, make))| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            run_case(name, count, &mut rng, make)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitives_pass() {
        for r in run_suite(20, 7).unwrap() {
            assert_eq!(r.instances, 20, "{}", r.name);
            assert!(r.max_rel_err <= 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn a_wrong_rule_is_caught() {
        let mut rng = seeded(3);
        let bad = |rng: &mut SeededRng| -> Result<Instance> {
            let x = random_matrix(rng, 3, 3, 1.0);
            Ok(Instance {
                inputs: vec![x],
                margin: f64::INFINITY,
                loss: Box::new(|xs| {
                    let y = ops::tanh(&xs[0]);
                    // derivative of tanh written as 1 - y
                    let g = Matrix::from_fn(3, 3, |r, c| 1.0 - y.get(r, c));
                    Ok((y.sum(), vec![g]))
                }),
            })
        };
        let r = run_case("bad", 5, &mut rng, &bad).unwrap();
        assert!(r.max_rel_err > 1e-2);
    }
}
