//! AdamW with decoupled weight decay and the half-period cosine schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::GradientRecord;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Half-period cosine decay from `peak` at step 0 toward 0 at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub peak: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        let progress = step as f64 / self.total_steps as f64;
        (self.peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// AdamW over the trainable subset of a [`ParamStore`]. Moment buffers are
/// created lazily per parameter name; frozen parameters are never touched.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step_count: usize,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// One update using the given gradients and learning rate. Parameters
    /// without a gradient entry (disconnected this step) are left alone
    /// except for nothing at all: decoupled decay is also skipped for them,
    /// matching the convention that a step only touches what the loss saw.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientRecord, lr: f32) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = grads.get(&p.name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            let lr = lr as f64;
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i] as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let mut x = data[i] as f64;
                x -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * x);
                data[i] = x as f32;
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: average a batch of per-sample gradient records.
pub fn mean_gradients(records: &[GradientRecord]) -> GradientRecord {
    let mut total = GradientRecord::default();
    for r in records {
        total.accumulate(r);
    }
    if !records.is_empty() {
        total.scale(1.0 / records.len() as f32);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Mode};
    use crate::rng::Rng;

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let s = CosineSchedule {
            peak: 4e-4,
            total_steps: 1000,
        };
        assert_eq!(s.lr_at(0), 4e-4);
        assert!((s.lr_at(500) - 2e-4).abs() < 1e-10);
        assert!(s.lr_at(999) < 1e-8);
        assert_eq!(s.lr_at(1000), 0.0);
    }

    #[test]
    fn frozen_parameters_bitwise_unchanged_by_steps() {
        let mut rng = Rng::new(8);
        let mut params = ParamStore::new();
        params
            .insert("frozen", Tensor::randn(&[4, 4], 1.0, &mut rng), false)
            .unwrap();
        params
            .insert("live", Tensor::randn(&[4, 4], 1.0, &mut rng), true)
            .unwrap();
        let before = params.value("frozen").unwrap().clone();
        let live_before = params.value("live").unwrap().clone();

        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..25 {
            let mut g = Graph::new(Mode::Eval, 0);
            let live = params.bind(&mut g, "live").unwrap();
            let frozen = params.bind(&mut g, "frozen").unwrap();
            let prod = g.matmul(live, frozen).unwrap();
            let sq = g.mul(prod, prod).unwrap();
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).unwrap();
            assert!(!grads.contains("frozen"));
            opt.step(&mut params, &grads, 1e-2).unwrap();
        }
        assert!(params.value("frozen").unwrap().bits_eq(&before));
        assert!(!params.value("live").unwrap().bits_eq(&live_before));
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::full(&[2], 5.0), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..300 {
            let mut g = Graph::new(Mode::Eval, 0);
            let x = params.bind(&mut g, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum_all(sq);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut params, &grads, 5e-2).unwrap();
        }
        for &v in params.value("x").unwrap().data() {
            assert!(v.abs() < 0.15, "did not converge: {v}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient_signal() {
        // Loss gradient is zero (loss = sum(0 * x)); decay must still apply
        // when a gradient entry exists.
        let mut params = ParamStore::new();
        params.insert("x", Tensor::full(&[1], 2.0), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..10 {
            let mut g = Graph::new(Mode::Eval, 0);
            let x = params.bind(&mut g, "x").unwrap();
            let zero = g.constant(Tensor::zeros(&[1]));
            let prod = g.mul(x, zero).unwrap();
            let loss = g.sum_all(prod);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut params, &grads, 1e-1).unwrap();
        }
        let v = params.value("x").unwrap().data()[0];
        assert!(v < 2.0 && v > 1.8, "expected mild decay, got {v}");
    }
}
