//! Momentum SGD with coupled weight decay, and a step learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const DEFAULT_MAX_GRAD_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale a parameter group's gradient when its norm exceeds this value.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_grad_norm: Some(DEFAULT_MAX_GRAD_NORM),
        }
    }
}

/// Learning rate `base * gamma^k` after the k-th passed milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base: f64, milestones: Vec<usize>) -> Self {
        Self {
            base,
            milestones,
            gamma: 0.1,
        }
    }

    /// Milestones at the same fractions of training as 100 and 150 of 200
    /// epochs.
    pub fn scaled(base: f64, epochs: usize) -> Self {
        let at = |num: usize| (epochs * num).div_ceil(200).max(1);
        Self::new(base, vec![at(100), at(150)])
    }

    /// Rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[1] < w[0]) || self.milestones.iter().any(|&m| m > epochs) {
            return Err(Error::Config(format!(
                "milestones {:?} must be sorted and at most {epochs}",
                self.milestones
            )));
        }
        Ok(())
    }
}

fn group_of(path: &str) -> &str {
    path.split('.').next().unwrap_or(path)
}

pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// L2 norm of the gradients of every parameter group, keyed by the
    /// first segment of the parameter path (`backbone`, `siriib`, ...).
    pub fn group_grad_norms(store: &ParamStore, grads: &GradStore) -> Result<BTreeMap<String, f64>> {
        let mut sq = BTreeMap::new();
        for (name, var) in store.params() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let v = g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                *sq.entry(group_of(name).to_string()).or_insert(0.0) += v;
            }
        }
        Ok(sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect())
    }

    /// `v ← μ v + (g + λ p)`, `p ← p − lr v`; the first step sets `v = g + λ p`.
    /// Each group's `g` is first rescaled to the configured maximum norm, if
    /// it exceeds it. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let scales: BTreeMap<String, f64> = match self.config.max_grad_norm {
            Some(max) => Self::group_grad_norms(store, grads)?
                .into_iter()
                .map(|(k, n)| (k, if n > max { max / n } else { 1.0 }))
                .collect(),
            None => BTreeMap::new(),
        };
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor();
            let scale = scales.get(group_of(name)).copied().unwrap_or(1.0);
            let mut d = if scale == 1.0 { g.clone() } else { (g * scale)? };
            if self.config.weight_decay != 0.0 {
                d = d.add(&(p * self.config.weight_decay)?)?;
            }
            if self.config.momentum != 0.0 {
                d = match self.velocity.get(name) {
                    Some(v) => (v * self.config.momentum)?.add(&d)?,
                    None => d,
                };
                self.velocity.insert(name.clone(), d.detach());
            }
            var.set(&p.sub(&(d * lr)?)?)?;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn load_state(&mut self, velocity: BTreeMap<String, Tensor>, steps: u64) {
        self.velocity = velocity;
        self.steps = steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn schedule_regimes() {
        let s = LrSchedule::new(0.1, vec![100, 150]);
        for (e, lr) in [(0, 0.1), (99, 0.1), (100, 0.01), (149, 0.01), (150, 0.001), (199, 0.001)] {
            assert!((s.lr_at(e) - lr).abs() < 1e-12, "epoch {e}");
        }
        assert_eq!(LrSchedule::scaled(0.1, 10).milestones, vec![5, 8]);
        assert_eq!(LrSchedule::scaled(0.1, 200).milestones, vec![100, 150]);
        assert!(LrSchedule::new(0.1, vec![5, 20]).validate(10).is_err());
    }

    #[test]
    fn momentum_matches_hand_recursion() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let w = store.param_const("w".into(), &[1], 1.0).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            max_grad_norm: None,
        });
        // loss = 0.5 w^2, gradient w
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for k in 0..5 {
            let loss = (w.as_tensor().sqr().unwrap() * 0.5).unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap(), 0.1).unwrap();
            let d = p + 0.01 * p;
            v = if k == 0 { d } else { 0.9 * v + d };
            p -= 0.1 * v;
            let got = w.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - p).abs() < 1e-14);
        }
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let w = store.param_const("a.w".into(), &[2], 0.0).unwrap();
        let u = store.param_const("b.w".into(), &[1], 0.0).unwrap();
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
        };
        let mut opt = Sgd::new(cfg);
        // group a has gradient (3, 4), norm 5; group b has 0.5
        let target = Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap();
        let loss = w.as_tensor().mul(&target).unwrap().sum_all().unwrap();
        let loss = loss.add(&(u.as_tensor() * 0.5).unwrap().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let norms = Sgd::group_grad_norms(&store, &grads).unwrap();
        assert!((norms["a"] - 5.0).abs() < 1e-12 && (norms["b"] - 0.5).abs() < 1e-12);
        opt.step(&store, &grads, 1.0).unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] + 0.6).abs() < 1e-15 && (got[1] + 0.8).abs() < 1e-15);
        assert_eq!(u.as_tensor().to_vec1::<f64>().unwrap(), vec![-0.5]);
    }
}
