//! Minibatch training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::cross_entropy;
use super::{MqarDataset, MqarSample, TinyModel};
use crate::error::{DmaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamwLite,
}

fn default_batch() -> usize {
    32
}

fn default_decay() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Decoupled decay applied to matrices (AdamW-lite only).
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Linear warmup length in optimizer steps.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Seed of the per-epoch shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Stop once test accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            batch_size: default_batch(),
            optimizer: OptimizerKind::AdamwLite,
            weight_decay: default_decay(),
            clip_norm: None,
            warmup_steps: 0,
            seed: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub queries: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
    pub steps: usize,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_accuracy)
    }
}

/// Query accuracy and mean cross-entropy over `samples`.
pub fn evaluate(model: &TinyModel, samples: &[MqarSample]) -> Result<EvalReport> {
    let parts: Vec<(f64, usize, usize)> = samples
        .par_iter()
        .map(|s| {
            let (logits, _) = model.forward_rows(&s.tokens, &s.positions)?;
            let (loss, correct, _) = cross_entropy(&logits, &s.targets);
            Ok((loss, correct, s.targets.len()))
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut correct, mut queries) = (0.0, 0, 0);
    for (l, c, q) in parts {
        loss += l;
        correct += c;
        queries += q;
    }
    let denom = queries.max(1) as f64;
    Ok(EvalReport { accuracy: correct as f64 / denom, mean_loss: loss / denom, queries, correct })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;

fn decays(name: &str) -> bool {
    ["wq", "wk", "wv", "wod", "w_in", "w_out", "head", "embedding"].iter().any(|s| name.ends_with(s))
}

/// Trains in place and returns the per-epoch log. The log depends only on the
/// model, data and config, never on the thread count.
pub fn train(model: &mut TinyModel, data: &MqarDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    model.check()?;
    if cfg.batch_size == 0 {
        return Err(DmaError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let n = model.num_params();
    let mut adam = Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 };
    let decay_mask: Vec<bool> = model
        .named_tensors()
        .iter()
        .flat_map(|(name, t)| std::iter::repeat_n(decays(name), t.len()))
        .collect();
    let mut log = TrainLog { epochs: Vec::new(), stopped_early: false, steps: 0 };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut queries) = (0.0, 0usize, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(f64, usize, usize, TinyModel)> = batch
                .par_iter()
                .map(|&i| {
                    let s = &data.train[i];
                    let (logits, trace) = model.forward_rows(&s.tokens, &s.positions)?;
                    let (loss, ok, d_logits) = cross_entropy(&logits, &s.targets);
                    let mut g = model.zeros_like();
                    model.backward(&trace, &d_logits, &mut g)?;
                    Ok((loss, ok, s.targets.len(), g))
                })
                .collect::<Result<_>>()?;
            let mut grads = model.zeros_like();
            let (mut b_loss, mut b_queries) = (0.0, 0);
            for (l, ok, q, g) in &parts {
                b_loss += l;
                correct += ok;
                b_queries += q;
                grads.accumulate(g);
            }
            if !b_loss.is_finite() {
                return Err(DmaError::Diverged {
                    epoch,
                    step,
                    detail: format!("batch loss {b_loss}"),
                });
            }
            loss_sum += b_loss;
            queries += b_queries;

            let mut flat = grads.flatten();
            let inv = 1.0 / b_queries.max(1) as f64;
            flat.iter_mut().for_each(|g| *g *= inv);
            if let Some(limit) = cfg.clip_norm {
                let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > limit {
                    let s = limit / norm;
                    flat.iter_mut().for_each(|g| *g *= s);
                }
            }
            let warm = if cfg.warmup_steps > 0 {
                ((log.steps + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let lr = cfg.lr * warm;
            let mut params = model.flatten();
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (p, g) in params.iter_mut().zip(&flat) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::AdamwLite => {
                    adam.step += 1;
                    let c1 = 1.0 - BETA1.powi(adam.step);
                    let c2 = 1.0 - BETA2.powi(adam.step);
                    for (k, (p, g)) in params.iter_mut().zip(&flat).enumerate() {
                        adam.m[k] = BETA1 * adam.m[k] + (1.0 - BETA1) * g;
                        adam.v[k] = BETA2 * adam.v[k] + (1.0 - BETA2) * g * g;
                        let update = (adam.m[k] / c1) / ((adam.v[k] / c2).sqrt() + ADAM_EPS);
                        let decay = if decay_mask[k] { cfg.weight_decay * *p } else { 0.0 };
                        *p -= lr * (update + decay);
                    }
                }
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(DmaError::Diverged { epoch, step, detail: "non-finite parameter".into() });
            }
            model.load_flat(&params)?;
            log.steps += 1;
        }

        let test = evaluate(model, &data.test)?;
        let denom = queries.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / denom,
            train_accuracy: correct as f64 / denom,
            test_loss: test.mean_loss,
            test_accuracy: test.accuracy,
        });
        if cfg.target_accuracy.is_some_and(|t| test.accuracy >= t) {
            log.stopped_early = true;
            break;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MaskKind;
    use crate::mqar::{generate_mqar, ModelConfig, MqarSpec};

    fn tiny_spec(seed: u64) -> MqarSpec {
        MqarSpec {
            vocab_size: 20,
            num_pairs: 3,
            seq_len: 16,
            num_train: 16,
            num_test: 8,
            noise_fill: false,
            seed,
            num_queries: None,
            min_query_pos: None,
            shuffle_pairs: true,
        }
    }

    fn tiny_model(seed: u64) -> TinyModel {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            window: 4,
            mlp_hidden: 16,
            tied_head: false,
            mask: MaskKind::Dynamic,
            use_rope: true,
            block: 4,
            gate_init: 1.0,
        };
        TinyModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let data = generate_mqar(&tiny_spec(1)).unwrap();
        let mut model = tiny_model(1);
        let before = model.clone();
        let log = train(&mut model, &data, &TrainConfig::new(3, 0.0)).unwrap();
        let first = log.epochs[0].train_loss;
        assert!(log.epochs.iter().all(|e| (e.train_loss - first).abs() < 1e-9));
        assert_eq!(model, before);
    }

    #[test]
    fn one_small_step_descends() {
        let mut wins = 0;
        for seed in 0..20 {
            let data = generate_mqar(&MqarSpec { num_train: 8, ..tiny_spec(seed) }).unwrap();
            let mut model = tiny_model(seed);
            let before = evaluate(&model, &data.train).unwrap().mean_loss;
            let cfg = TrainConfig { optimizer: OptimizerKind::Sgd, batch_size: 8, ..TrainConfig::new(1, 1e-3) };
            train(&mut model, &data, &cfg).unwrap();
            if evaluate(&model, &data.train).unwrap().mean_loss < before {
                wins += 1;
            }
        }
        assert!(wins >= 18, "{wins}/20");
    }

    #[test]
    fn random_model_is_near_chance() {
        let spec = MqarSpec { num_train: 0, num_test: 512, ..MqarSpec::small(4) };
        let data = generate_mqar(&spec).unwrap();
        let (mut correct, mut queries) = (0, 0);
        for seed in 0..8 {
            let model = TinyModel::new(ModelConfig::small(64, MaskKind::Dynamic), seed).unwrap();
            let r = evaluate(&model, &data.test).unwrap();
            correct += r.correct;
            queries += r.queries;
        }
        let p = 1.0 / 64.0;
        let acc = correct as f64 / queries as f64;
        let sigma = (p * (1.0 - p) / queries as f64).sqrt();
        assert!((acc - p).abs() <= 3.0 * sigma, "acc {acc}, chance {p} +- {}", 3.0 * sigma);
    }

    #[test]
    fn planted_identity_solution_is_exact() {
        // Tied one-hot embeddings and zero blocks: the logits at a position
        // peak at that position's own token.
        let cfg = ModelConfig { tied_head: true, d_model: 20, n_heads: 2, ..tiny_model(0).config };
        let mut model = TinyModel::new(cfg, 0).unwrap();
        for b in &mut model.blocks {
            b.attn.wod = b.attn.wod.map(crate::tensor::Elementwise::Scale(0.0));
            b.w_out = b.w_out.map(crate::tensor::Elementwise::Scale(0.0));
        }
        model.embedding = crate::tensor::Tensor::from_fn([20, 20], |i| if i / 20 == i % 20 { 1.0 } else { 0.0 });
        let data = generate_mqar(&tiny_spec(2)).unwrap();
        let echo: Vec<MqarSample> = data
            .train
            .iter()
            .map(|s| MqarSample {
                tokens: s.tokens.clone(),
                positions: s.positions.clone(),
                targets: s.positions.iter().map(|&p| s.tokens[p]).collect(),
            })
            .collect();
        assert_eq!(evaluate(&model, &echo).unwrap().accuracy, 1.0);
    }
}
