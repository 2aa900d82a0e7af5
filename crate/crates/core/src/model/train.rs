use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Ctx;
use super::params::ParamSet;
use super::transformer::Transformer;
use super::Example;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Sentence pairs per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup length in updates; the rate stays fixed afterwards.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement tolerated once `min_epochs` is reached.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            clip_norm: 1.0,
            min_epochs: 50,
            max_epochs: 100,
            patience: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return Err(Error::invalid(format!(
                "need 0 < min_epochs ({}) <= max_epochs ({})",
                self.min_epochs, self.max_epochs
            )));
        }
        Ok(())
    }

    fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let lr = cfg.rate_at(self.step) * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(cfg.epsilon));
        let one = T::one();
        let tensors = params.tensors_mut().zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, m), v), g) in tensors.zip(grads.tensors()) {
            for (((p, m), v), &g) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Label-smoothed training loss per target token.
    pub train_loss: f64,
    /// Unsmoothed dev cross-entropy per target token.
    pub dev_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Parameters of the best dev epoch.
    pub params: ParamSet<T>,
    pub optimizer: AdamState<T>,
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub patience_counter: usize,
    pub history: Vec<EpochRecord>,
}

/// Mean unsmoothed cross-entropy per target token (EOS included).
pub fn corpus_loss<T: Scalar>(model: &Transformer<T>, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in examples {
        total += model.loss(ex, 0.0)?.to_f64_lossy();
        tokens += ex.tgt.len() + 1;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Trains `model` in place and leaves it holding the best dev checkpoint.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    corpus: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev corpus".into()));
    }
    let smoothing = model.config().label_smoothing;
    let dropout = model.config().dropout;
    let mut state = TrainState {
        params: model.params().clone(),
        optimizer: AdamState::new(model.params()),
        epoch: 0,
        best_epoch: 0,
        best_dev_loss: f64::INFINITY,
        patience_counter: 0,
        history: Vec::new(),
    };
    let mut grads = model.params().zeros_like();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2 * epoch as u64));
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2 * epoch as u64 + 1));
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill_zero();
            let mut loss = T::zero();
            let mut tokens = 0usize;
            for &i in chunk {
                let ex = &corpus[i];
                let mut ctx = if dropout > 0.0 {
                    Ctx::training(dropout, &mut dropout_rng)
                } else {
                    Ctx::inference()
                };
                loss += model.loss_and_grad(ex, smoothing, &mut grads, &mut ctx)?;
                tokens += ex.tgt.len() + 1;
            }
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss,
                });
            }
            epoch_loss += loss;
            epoch_tokens += tokens;
            grads.scale(T::one() / T::from_usize_lossy(tokens));
            if cfg.clip_norm > 0.0 {
                let norm = grads.global_norm().to_f64_lossy();
                if !norm.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch + 1,
                        loss: norm,
                    });
                }
                if norm > cfg.clip_norm {
                    grads.scale(T::from_f64_lossy(cfg.clip_norm / norm));
                }
            }
            state.optimizer.update(model.params_mut(), &grads, cfg);
        }
        let dev_loss = corpus_loss(model, dev)?;
        if !dev_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: dev_loss,
            });
        }
        let improved = dev_loss < state.best_dev_loss;
        if improved {
            state.best_dev_loss = dev_loss;
            state.best_epoch = epoch;
            state.params = model.params().clone();
            state.patience_counter = 0;
        } else {
            state.patience_counter += 1;
        }
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            dev_loss,
            improved,
        };
        on_epoch(&record);
        state.history.push(record);
        if epoch >= cfg.min_epochs && state.patience_counter >= cfg.patience {
            break;
        }
    }
    model.set_params(state.params.clone());
    Ok(state)
}
