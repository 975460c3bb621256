//! Full-batch training of the network on paired low/clean images.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::loss::{l_artifact, l_recon, l_reg, l_smooth, l_sparse, LossBreakdown, LossTerms, LossWeights};
use crate::model::{forward, DrwkvWeights, ForwardVars};
use crate::ops::NormMode;
use crate::optim::{apply_buffer_updates, cosine_lr, Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr_max: 2e-4,
            lr_min: 1e-6,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

/// Builds the five loss terms for one forward pass. `low` is the network
/// input and `clean` the reference.
pub fn loss_terms(g: &mut Graph<f32>, out: &ForwardVars, low: Var, clean: Var, w: &LossWeights) -> Result<LossTerms> {
    Ok(LossTerms {
        recon: l_recon(g, clean, out.enhanced)?,
        sparse: l_sparse(g, out.edge)?,
        smooth: l_smooth(g, out.illumination, low, w.lambda_smooth)?,
        artifact: l_artifact(g, out.artifact, w.delta_tv)?,
        reg: l_reg(g, out.ger.alpha, out.ger.beta, out.ger.gamma)?,
    })
}

fn check_batch(low: &Tensor<f32>, clean: &Tensor<f32>) -> Result<()> {
    low.expect_same_shape(clean, "train")?;
    let (n, c, _, _) = low.dims4("train")?;
    if n == 0 || c != 3 {
        return Err(Error::shape("train", "[N >= 1, 3, H, W]", low.shape()));
    }
    Ok(())
}

/// Loss breakdown, gradients and queued batch-norm updates for one batch.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Gradients<f32>,
    pub buffer_updates: Vec<(String, Tensor<f32>)>,
}

/// Forward and backward pass in training mode, without touching the weights.
pub fn compute_gradients(weights: &DrwkvWeights, low: &Tensor<f32>, clean: &Tensor<f32>, w: &LossWeights) -> Result<StepResult> {
    check_batch(low, clean)?;
    let g = &mut Graph::new();
    let b = weights.params.bind(g)?;
    let x = g.constant(low.clone());
    let y = g.constant(clean.clone());
    let out = forward(g, &b, &weights.config, x, NormMode::Train)?;
    let terms = loss_terms(g, &out, x, y, w)?;
    let total = terms.total(g, w)?;
    let loss = terms.breakdown(g, w)?;
    let buffer_updates = g.take_buffer_updates();
    let grads = g.backward(total)?;
    Ok(StepResult {
        loss,
        grads,
        buffer_updates,
    })
}

/// Loss of the current weights, batch norm on batch statistics, nothing
/// recorded or updated.
pub fn evaluate(weights: &DrwkvWeights, low: &Tensor<f32>, clean: &Tensor<f32>, w: &LossWeights) -> Result<LossBreakdown> {
    check_batch(low, clean)?;
    let g = &mut Graph::inference();
    let b = weights.params.bind(g)?;
    let x = g.constant(low.clone());
    let y = g.constant(clean.clone());
    let out = forward(g, &b, &weights.config, x, NormMode::Train)?;
    let terms = loss_terms(g, &out, x, y, w)?;
    terms.breakdown(g, w)
}

/// Adam on the full batch with a cosine schedule.
pub struct Trainer {
    pub weights: DrwkvWeights,
    pub config: TrainConfig,
    opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(weights: DrwkvWeights, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        if !(config.lr_max >= config.lr_min && config.lr_min >= 0.0 && config.lr_max.is_finite()) {
            return Err(Error::invalid("train", format!("bad lr range {}..{}", config.lr_min, config.lr_max)));
        }
        let opt = Adam::new(config.adam);
        Ok(Self {
            weights,
            config,
            opt,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.config.steps, self.config.lr_max, self.config.lr_min)
    }

    /// One update; returns the loss measured before it.
    pub fn step(&mut self, low: &Tensor<f32>, clean: &Tensor<f32>) -> Result<LossBreakdown> {
        let r = compute_gradients(&self.weights, low, clean, &self.config.loss)?;
        if !r.loss.total.is_finite() {
            return Err(Error::NonFinite { op: "train" });
        }
        let lr = self.current_lr();
        self.opt.step(&mut self.weights.params, &r.grads, lr)?;
        apply_buffer_updates(&mut self.weights.params, r.buffer_updates)?;
        self.step += 1;
        Ok(r.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            n1: 2,
            n2: 1,
            levels: 1,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn batch(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let clean = Tensor::<f32>::uniform(&[2, 3, 8, 8], 0.2, 0.9, &mut r);
        let low = clean.map(|v| 0.3 * v * v);
        (low, clean)
    }

    #[test]
    fn zero_steps_leave_weights_unchanged() {
        let w = DrwkvWeights::init(tiny()).unwrap();
        let t = Trainer::new(w.clone(), TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(t.weights.to_bytes().unwrap(), w.to_bytes().unwrap());
    }

    #[test]
    fn step_reports_pre_update_loss_and_is_deterministic() {
        let (low, clean) = batch(1);
        let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
        let run = || {
            let mut t = Trainer::new(DrwkvWeights::init(tiny()).unwrap(), cfg.clone()).unwrap();
            let before = evaluate(&t.weights, &low, &clean, &cfg.loss).unwrap();
            let first = t.step(&low, &clean).unwrap();
            assert_eq!(before.total.to_bits(), first.total.to_bits());
            let mut curve = vec![first.total];
            for _ in 0..2 {
                curve.push(t.step(&low, &clean).unwrap().total);
            }
            (curve, t.weights.to_bytes().unwrap())
        };
        let (a, wa) = run();
        let (b, wb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(wa, wb);
    }

    #[test]
    fn running_stats_follow_training() {
        let (low, clean) = batch(2);
        let mut t = Trainer::new(DrwkvWeights::init(tiny()).unwrap(), TrainConfig::default()).unwrap();
        let before = t.weights.params.tensor("fuse0.see.bn.running_mean").unwrap().clone();
        t.step(&low, &clean).unwrap();
        assert_ne!(t.weights.params.tensor("fuse0.see.bn.running_mean").unwrap(), &before);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let (low, _) = batch(3);
        let w = DrwkvWeights::init(tiny()).unwrap();
        let other = Tensor::<f32>::zeros(&[2, 3, 8, 4]);
        assert!(compute_gradients(&w, &low, &other, &LossWeights::default()).is_err());
    }
}
