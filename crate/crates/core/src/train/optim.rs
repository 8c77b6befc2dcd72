use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient.
    /// Parameters without a gradient entry, or frozen ones, are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let shape = store.value(id).shape();
            if shape != g.shape() {
                return Err(Error::shape("adamw", shape, g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let n = g.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let theta = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= c.lr * c.weight_decay * theta[i] + c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of one validation observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Wait,
    Stop,
}

/// Stops after `patience` consecutive epochs without strict improvement of
/// the best validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> StopSignal {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.bad = 0;
            StopSignal::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Wait
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss; 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Stopping epoch (1-based) and best epoch for a whole validation trace.
pub fn stopping_epoch(losses: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopper::new(patience);
    let mut last = 0;
    for (i, &l) in losses.iter().take(max_epochs).enumerate() {
        last = i + 1;
        if es.observe(l) == StopSignal::Stop {
            break;
        }
    }
    (last, es.best_epoch())
}

/// Copies the values of `ids` for later restoration.
pub fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
    ids.iter().map(|&id| (id, store.value(id).clone())).collect()
}

pub fn restore(store: &mut ParamStore, snap: &[(ParamId, Tensor)]) {
    for (id, t) in snap {
        *store.value_mut(*id) = t.clone();
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autograd::Graph;

    fn scalar_store(theta: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("theta", Tensor::vector(vec![theta]));
        (s, id)
    }

    fn grads_for(store: &ParamStore, id: ParamId, g: f64) -> Gradients {
        // d/dθ of g·θ is g
        let mut graph = Graph::new(store);
        let p = graph.param(id);
        let c = graph.constant(Tensor::vector(vec![g]));
        let y = graph.mul(p, c).unwrap();
        let y = graph.sum(y).unwrap();
        graph.backward(y).unwrap()
    }

    #[test]
    fn hand_traced_first_step() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = grads_for(&s, id, 0.5);
        opt.step(&mut s, &grads).unwrap();
        let theta = s.value(id).data()[0];
        // m̂ = 0.5, v̂ = 0.25, decay 1e-3·0.01·1, step 1e-3·0.5/(0.5+1e-8)
        let oracle = 1.0 - 1e-5 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((theta - oracle).abs() < 1e-15);
        assert!((theta - 0.998990).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let grads = grads_for(&s, id, 0.0);
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn matches_scalar_reference_over_two_steps() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let (mut s, id) = scalar_store(0.3);
        let mut opt = AdamW::new(cfg);
        let (mut th, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 0.8), (2, -0.4)] {
            let grads = grads_for(&s, id, g);
            opt.step(&mut s, &grads).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            th = th - 0.01 * 0.1 * th - 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.value(id).data()[0] - th).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let (mut s, id) = scalar_store(1.0);
        let grads = grads_for(&s, id, 0.5);
        s.set_trainable(id, false);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let mut g = Graph::new(&s);
            let p = g.param(id);
            let sq = g.square(p).unwrap();
            let loss = g.sum(sq).unwrap();
            let value = g.value(loss).item().unwrap();
            assert!(value < prev);
            prev = value;
            let grads = g.backward(loss).unwrap();
            opt.step(&mut s, &grads).unwrap();
        }
    }

    #[test]
    fn stopping_trace_example() {
        assert_eq!(stopping_epoch(&[1.0, 0.9, 0.95, 0.91], 2, 200), (4, 2));
        let decreasing: Vec<f64> = (0..10).map(|i| 1.0 / (i + 1) as f64).collect();
        assert_eq!(stopping_epoch(&decreasing, 2, 10), (10, 10));
        // ties do not count as improvement
        assert_eq!(stopping_epoch(&[1.0, 1.0, 1.0], 2, 10), (3, 1));
    }

    fn reference(losses: &[f64], patience: usize) -> usize {
        let mut best = f64::INFINITY;
        let mut since = 0;
        for (i, &l) in losses.iter().enumerate() {
            if l < best {
                best = l;
                since = 0;
            } else {
                since += 1;
                if since == patience {
                    return i + 1;
                }
            }
        }
        losses.len()
    }

    proptest! {
        #[test]
        fn never_trains_past_patience(
            losses in prop::collection::vec(0.0f64..2.0, 1..80),
            patience in 1usize..25,
        ) {
            let (stop, best) = stopping_epoch(&losses, patience, losses.len());
            prop_assert_eq!(stop, reference(&losses, patience));
            prop_assert!(stop - best <= patience);
        }
    }
}
