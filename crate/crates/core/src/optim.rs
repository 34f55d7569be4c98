//! Adam, keyed by parameter so that the trainable set can change from one
//! step to the next without disturbing the moments of parameters that sit
//! out a step.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
    /// Updates applied to this parameter; drives bias correction.
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<K: Ord> {
    moments: BTreeMap<K, Moments>,
    steps: u64,
}

impl<K: Ord> Default for Adam<K> {
    fn default() -> Self {
        Self {
            moments: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl<K: Ord + Clone> Adam<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.moments.clear();
        self.steps = 0;
    }

    /// Optimizer steps taken (one per [`Adam::begin_step`]).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self, key: &K) -> Option<&Moments> {
        self.moments.get(key)
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, key: &K, param: &mut Tensor, grad: &Tensor, cfg: &AdamConfig) -> Result<()> {
        let entry = self.moments.entry(key.clone()).or_insert_with(|| Moments {
            first: Tensor::zeros(param.shape()),
            second: Tensor::zeros(param.shape()),
            count: 0,
        });
        entry.count += 1;
        let t = entry.count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let first = entry.first.data_mut();
        let second = entry.second.data_mut();
        if param.shape() != grad.shape() {
            return Err(crate::error::Error::shape("adam", param.shape(), grad.shape()));
        }
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(first.iter_mut())
            .zip(second.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr · g/(|g| + ε′).
        let mut opt: Adam<u8> = Adam::new();
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        opt.begin_step();
        opt.update(&0, &mut p, &Tensor::vector(vec![3.0, -0.5]), &cfg).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt: Adam<u8> = Adam::new();
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.begin_step();
            opt.update(&0, &mut p, &g, &cfg).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn reset_clears_state() {
        let mut opt: Adam<u8> = Adam::new();
        let mut p = Tensor::vector(vec![1.0]);
        opt.begin_step();
        opt.update(&1, &mut p, &Tensor::vector(vec![1.0]), &AdamConfig::default()).unwrap();
        assert!(opt.moments(&1).is_some());
        opt.reset();
        assert!(opt.is_empty());
        assert_eq!(opt.steps(), 0);
    }
}
