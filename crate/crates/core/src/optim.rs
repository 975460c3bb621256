//! Adam with a cosine learning-rate schedule.

use std::f64::consts::PI;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::init::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// `lr(t) = lr_min + (lr_max - lr_min) (1 + cos(π t / T)) / 2`, held at
/// `lr_min` once `t >= T`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Bias-corrected Adam; moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. Parameters
    /// without one keep their value and moments.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid("adam", format!("learning rate {lr}")));
        }
        for (name, grad) in grads {
            let p = store.get(name)?;
            if !p.requires_grad {
                return Err(Error::invalid("adam", format!("gradient for frozen parameter {name}")));
            }
            p.value.expect_same_shape(grad, "adam")?;
            if !grad.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let p = store.get_mut(name)?;
            let n = grad.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, (w, gr)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let gr = gr.as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gr;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gr * gr;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Writes queued buffer values (BatchNorm running statistics) back into the store.
pub fn apply_buffer_updates<T: Real>(store: &mut ParamStore<T>, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
    for (name, value) in updates {
        store.set(&name, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 300, 2e-4, 1e-6), 2e-4);
        assert!((cosine_lr(150, 300, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(300, 300, 2e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(5, 0, 2e-4, 1e-6), 1e-6);
        let mut prev = f64::INFINITY;
        for t in 0..=300 {
            let lr = cosine_lr(t, 300, 2e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn store(v: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = v.len();
        s.insert("w", Tensor::new(&[n], v).unwrap(), true).unwrap();
        s.insert("frozen", Tensor::zeros(&[1]), false).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::new(&[3], vec![3.0, -0.01, 0.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &g, 0.1).unwrap();
        let w = s.tensor("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - -1.9).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn matches_reference_recursion() {
        let grads = [0.5, -1.0, 2.0, 0.25];
        let mut s = store(vec![0.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, gr) in grads.iter().enumerate() {
            let mut g = Gradients::new();
            g.insert("w".into(), Tensor::new(&[1], vec![*gr]).unwrap());
            opt.step(&mut s, &g, 0.01).unwrap();
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let k = (t + 1) as i32;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((s.tensor("w").unwrap().data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut s = store(vec![3.0, -4.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for t in 0..500 {
            let w = s.tensor("w").unwrap().clone();
            let mut g = Gradients::new();
            g.insert("w".into(), w.map(|x| 2.0 * x));
            opt.step(&mut s, &g, cosine_lr(t, 500, 0.1, 1e-4)).unwrap();
        }
        assert!(s.tensor("w").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = store(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = Gradients::new();
        g.insert("frozen".into(), Tensor::zeros(&[1]));
        assert!(opt.step(&mut s, &g, 0.1).is_err());
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[2]));
        assert!(opt.step(&mut s, &g, 0.1).is_err());
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::full(&[1], f64::NAN));
        assert!(opt.step(&mut s, &g, 0.1).is_err());
        let mut g = Gradients::new();
        g.insert("missing".into(), Tensor::zeros(&[1]));
        assert!(opt.step(&mut s, &g, 0.1).is_err());
        assert_eq!(opt.steps_taken(), 0);
    }
}
