use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{init, loss_and_grad, ModelConfig, ModelError, Parameters};
use crate::tasks::{generate, Split, TaskError, TaskSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least one step")]
    NoSteps,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step} (non-finite loss or parameters)")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed for mini-batch sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f64>,
    pub curve: Vec<TrainPoint>,
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Parameters<f64>,
    v: Parameters<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(params: &Parameters<f64>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut Parameters<f64>,
        grad: &Parameters<f64>,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Seeded mini-batch Adam on the task's training split. Batches are drawn
/// with replacement; the loss of every step is recorded.
pub fn train(
    model: &ModelConfig,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.steps == 0 {
        return Err(TrainError::NoSteps);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let mut params = init(model)?;
    let data = generate(task, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(data[rng.random_range(0..data.len())].clone());
        }
        let (loss, grad) = loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        adam.step(&mut params, &grad, cfg);
        if !params.all_finite() {
            return Err(TrainError::Diverged { step });
        }
        curve.push(TrainPoint { step, loss });
        if step % 100 == 0 || step == cfg.steps {
            info!("step {step}: loss {loss:.5}");
        } else {
            debug!("step {step}: loss {loss:.5}");
        }
    }
    Ok(TrainOutcome { params, curve })
}
