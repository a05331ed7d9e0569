use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{check_shape, Matrix, NnError, Result};

/// One named parameter with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub m: Matrix,
    pub v: Matrix,
    /// Adam steps taken by this parameter (bias correction is per parameter,
    /// so parameters that sit out a phase resume with their own count).
    pub steps: u64,
    touched: bool,
    frozen: bool,
}

impl Param {
    fn new(name: String, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name,
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            steps: 0,
            touched: false,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn has_grad(&self) -> bool {
        self.touched
    }
}

/// Named parameters in insertion order. Names are slash-separated
/// (`encoder/…`, `decoder/…`, `head/…`) so prefixes select sub-models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param::new(name.to_string(), value));
        Ok(())
    }

    /// Inserts a parameter together with previously saved optimizer state.
    pub fn insert_with_state(&mut self, name: &str, value: Matrix, m: Matrix, v: Matrix, steps: u64) -> Result<()> {
        check_shape("insert_with_state", value.shape(), m.shape())?;
        check_shape("insert_with_state", value.shape(), v.shape())?;
        self.insert(name, value)?;
        let p = self.params.last_mut().expect("just inserted");
        p.m = m;
        p.v = v;
        p.steps = steps;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.slot(name)?])
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.params[self.slot(name)?].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        let i = self.slot(name)?;
        Ok(&mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.params[self.slot(name)?].grad)
    }

    /// Adds `g` into the gradient accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, g: &Matrix) -> Result<()> {
        let i = self.slot(name)?;
        let p = &mut self.params[i];
        p.grad.add_assign(g)?;
        p.touched = true;
        Ok(())
    }

    /// Adds `g[k]` into row `rows[k]` of the gradient of `name`.
    pub fn accumulate_rows(&mut self, name: &str, rows: &[usize], g: &Matrix) -> Result<()> {
        let i = self.slot(name)?;
        let p = &mut self.params[i];
        p.grad.scatter_add_rows(rows, g)?;
        p.touched = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched = false;
        }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    /// Copies the values of every parameter in `other` that starts with
    /// `prefix` into this store (optimizer state included). Shapes must match.
    pub fn load_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for src in other.iter().filter(|p| p.name.starts_with(prefix)) {
            let i = self.slot(&src.name)?;
            let dst = &mut self.params[i];
            check_shape("load_from", dst.value.shape(), src.value.shape())?;
            dst.value = src.value.clone();
            dst.m = src.m.clone();
            dst.v = src.v.clone();
            dst.steps = src.steps;
            n += 1;
        }
        Ok(n)
    }

    /// Sum of squared entries over all parameters; handy as a cheap
    /// fingerprint in tests and logs.
    pub fn sq_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.as_slice())
            .map(|x| x * x)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate after `epoch` completed epochs of 0.95 decay.
pub fn decayed_lr(base: f64, epoch: usize) -> f64 {
    base * libm::pow(0.95, epoch as f64)
}

/// One Adam step over the parameters picked by `select`.
///
/// Every selected, unfrozen parameter must carry a gradient for this step; a
/// frozen parameter that received a gradient is an error. All gradients are
/// zeroed afterwards, including those of unselected parameters.
pub fn adam_step(
    store: &mut ParamStore,
    cfg: &AdamConfig,
    lr: f64,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    for p in &store.params {
        if p.frozen && p.touched {
            return Err(NnError::FrozenViolation(p.name.clone()));
        }
        if select(&p.name) && !p.frozen && !p.touched {
            return Err(NnError::MissingGradient(p.name.clone()));
        }
    }
    for p in store.params.iter_mut() {
        if p.frozen || !select(&p.name) {
            continue;
        }
        p.steps += 1;
        let t = p.steps as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let g = p.grad.as_slice();
        let m = p.m.as_mut_slice();
        let v = p.v.as_mut_slice();
        let w = p.value.as_mut_slice();
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::filled(1, 1, v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = scalar_store(0.3);
        s.accumulate("w", &Matrix::zeros(1, 1)).unwrap();
        adam_step(&mut s, &AdamConfig::default(), 0.01, |_| true).unwrap();
        assert_eq!(s.get("w").unwrap().get(0, 0), 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        s.accumulate("w", &Matrix::filled(1, 1, 1.0)).unwrap();
        adam_step(&mut s, &AdamConfig::default(), 1e-3, |_| true).unwrap();
        let moved = 1.0 - s.get("w").unwrap().get(0, 0);
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn missing_and_frozen_gradients_are_errors() {
        let mut s = scalar_store(1.0);
        assert_eq!(
            adam_step(&mut s, &AdamConfig::default(), 1e-3, |_| true),
            Err(NnError::MissingGradient("w".into()))
        );
        s.freeze("w");
        s.accumulate("w", &Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(
            adam_step(&mut s, &AdamConfig::default(), 1e-3, |_| true),
            Err(NnError::FrozenViolation("w".into()))
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(matches!(
            s.insert("w", Matrix::zeros(1, 1)),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(decayed_lr(0.1, 0), 0.1);
        assert!((decayed_lr(0.1, 2) - 0.1 * 0.9025).abs() < 1e-15);
    }
}
