//! Named parameter tensors with optional binary pruning masks.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// The distribution a parameter is drawn from at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitDist {
    Uniform { bound: f32 },
    Normal { std: f32 },
    Constant { value: f32 },
}

impl InitDist {
    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        match *self {
            InitDist::Uniform { bound } => Uniform::new_inclusive(-bound, bound).expect("valid bound").sample(rng),
            InitDist::Normal { std } => Normal::new(0.0, std).expect("valid std").sample(rng),
            InitDist::Constant { value } => value,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitDist::Constant { value } => value as f64,
            _ => 0.0,
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            InitDist::Uniform { bound } => bound as f64 / 3f64.sqrt(),
            InitDist::Normal { std } => std as f64,
            InitDist::Constant { .. } => 0.0,
        }
    }
}

/// Element-wise keep mask: `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WeightMask(pub Vec<bool>);

impl WeightMask {
    pub fn ones(len: usize) -> Self {
        WeightMask(vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn alive(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `self <= other` element-wise.
    pub fn is_subset_of(&self, other: &WeightMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn hamming(&self, other: &WeightMask) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableParam {
    pub name: String,
    pub values: Matrix,
    /// Present exactly when the parameter is prunable.
    pub mask: Option<WeightMask>,
    pub init: InitDist,
}

impl PrunableParam {
    pub fn prunable(&self) -> bool {
        self.mask.is_some()
    }

    pub fn alive(&self) -> usize {
        match &self.mask {
            Some(m) => m.alive(),
            None => self.values.len(),
        }
    }

    /// Zeroes every masked-out value.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &keep) in self.values.as_mut_slice().iter_mut().zip(&mask.0) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Ordered collection of model parameters. Indices are stable for the
/// lifetime of a model and are what the autodiff tape refers to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<PrunableParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: InitDist, prunable: bool, rng: &mut impl Rng) -> usize {
        let values = Matrix::from_fn(rows, cols, |_, _| init.sample(rng));
        let mask = prunable.then(|| WeightMask::ones(rows * cols));
        self.params.push(PrunableParam { name: name.into(), values, mask, init });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &PrunableParam {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut PrunableParam {
        &mut self.params[idx]
    }

    pub fn values(&self, idx: usize) -> &Matrix {
        &self.params[idx].values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PrunableParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, PrunableParam> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn prunable_total(&self) -> usize {
        self.params.iter().filter(|p| p.prunable()).map(|p| p.values.len()).sum()
    }

    pub fn prunable_alive(&self) -> usize {
        self.params.iter().filter(|p| p.prunable()).map(|p| p.alive()).sum()
    }

    /// Fraction of prunable weights that are masked out.
    pub fn sparsity(&self) -> f64 {
        let total = self.prunable_total();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.prunable_alive() as f64 / total as f64
    }

    pub fn masks(&self) -> Vec<Option<WeightMask>> {
        self.params.iter().map(|p| p.mask.clone()).collect()
    }

    pub fn set_masks(&mut self, masks: &[Option<WeightMask>]) -> Result<()> {
        self.check_layout(masks.len())?;
        for (p, m) in self.params.iter_mut().zip(masks) {
            match (p.mask.is_some(), m) {
                (true, Some(m)) if m.len() == p.values.len() => p.mask = Some(m.clone()),
                (false, None) => {}
                _ => return Err(Error::Checkpoint(format!("mask layout mismatch for {}", p.name))),
            }
            p.apply_mask();
        }
        Ok(())
    }

    pub fn apply_masks(&mut self) {
        self.params.iter_mut().for_each(PrunableParam::apply_mask);
    }

    /// Verifies that another store has the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        self.check_layout(other.len())?;
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.values.shape() != b.values.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter drift: {} {:?} vs {} {:?}",
                    a.name,
                    a.values.shape(),
                    b.name,
                    b.values.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_layout(&self, n: usize) -> Result<()> {
        if n != self.params.len() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {n}", self.params.len())));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, p: PrunableParam) {
        self.params.push(p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masks_zero_values_and_count_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", 2, 2, InitDist::Constant { value: 1.0 }, true, &mut rng);
        store.add("b", 1, 2, InitDist::Constant { value: 0.5 }, false, &mut rng);
        store.get_mut(w).mask = Some(WeightMask(vec![true, false, false, true]));
        store.apply_masks();
        assert_eq!(store.values(w).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert!((store.sparsity() - 0.5).abs() < 1e-12);
        assert_eq!(store.prunable_total(), 4);
    }

    #[test]
    fn subset_and_hamming() {
        let a = WeightMask(vec![true, false, true]);
        let b = WeightMask(vec![true, true, true]);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
        assert_eq!(a.hamming(&b), 1);
    }
}
