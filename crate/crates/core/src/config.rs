//! Hyperparameters and learnable parameters of one attention layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DmaError, Result};
use crate::tensor::{DType, Scalar, Tensor};

/// Non-negative squashing applied to `<v, Delta>` before the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Tau {
    #[default]
    Softplus,
}

/// Which key set each query row may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Top-`window` keys by dynamic weight, biased by that weight.
    #[default]
    Dynamic,
    /// Plain causal attention, zero bias.
    Causal,
    /// The `window` most recent keys, zero bias.
    SlidingWindow,
}

impl MaskKind {
    pub fn uses_dynamic_weights(self) -> bool {
        matches!(self, MaskKind::Dynamic)
    }
}

fn default_block() -> usize {
    16
}

fn default_rope_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    /// Keys kept per query row.
    pub window: usize,
    #[serde(default = "default_block")]
    pub block_q: usize,
    #[serde(default = "default_block")]
    pub block_k: usize,
    #[serde(default)]
    pub tau: Tau,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub use_rope: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub mask: MaskKind,
}

impl DmaConfig {
    /// A config with `d_model = n_heads * head_dim`, 16x16 blocks and RoPE off.
    pub fn new(n_heads: usize, head_dim: usize, window: usize) -> Self {
        Self {
            n_heads,
            head_dim,
            d_model: n_heads * head_dim,
            window,
            block_q: default_block(),
            block_k: default_block(),
            tau: Tau::Softplus,
            dtype: DType::F64,
            use_rope: false,
            rope_base: default_rope_base(),
            mask: MaskKind::Dynamic,
        }
    }

    pub fn with_blocks(mut self, block_q: usize, block_k: usize) -> Self {
        self.block_q = block_q;
        self.block_k = block_k;
        self
    }

    pub fn with_rope(mut self, base: f64) -> Self {
        self.use_rope = true;
        self.rope_base = base;
        self
    }

    pub fn with_mask(mut self, mask: MaskKind) -> Self {
        self.mask = mask;
        self
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DmaError::Config(msg));
        if self.n_heads == 0 || self.head_dim == 0 {
            return bad("n_heads and head_dim must be positive".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model ({}) must equal n_heads * head_dim ({} * {})",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.block_q == 0 || self.block_k == 0 {
            return bad("block extents must be at least 1".into());
        }
        if self.use_rope && !self.head_dim.is_multiple_of(2) {
            return bad(format!("rotary embeddings need an even head_dim, got {}", self.head_dim));
        }
        if self.use_rope && !(self.rope_base > 0.0) {
            return bad("rope_base must be positive".into());
        }
        Ok(())
    }
}

/// Learnable parameters of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaWeights<S = f64> {
    /// `[d_model x n_heads*head_dim]`
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    /// `[n_heads*head_dim x d_model]`
    pub wod: Tensor<S>,
    /// Per-head sampling vector, `[n_heads x head_dim]`.
    pub delta: Tensor<S>,
    /// Per-head gate `A`, `[n_heads]`.
    pub gate: Tensor<S>,
}

/// Names of the parameter tensors, in the order used for flattening.
pub const WEIGHT_NAMES: [&str; 6] = ["wq", "wk", "wv", "wod", "delta", "gate"];

impl<S: Scalar> DmaWeights<S> {
    pub fn zeros(cfg: &DmaConfig) -> Self {
        let (d, inner) = (cfg.d_model, cfg.inner_dim());
        Self {
            wq: Tensor::zeros([d, inner]),
            wk: Tensor::zeros([d, inner]),
            wv: Tensor::zeros([d, inner]),
            wod: Tensor::zeros([inner, d]),
            delta: Tensor::zeros([cfg.n_heads, cfg.head_dim]),
            gate: Tensor::zeros([cfg.n_heads]),
        }
    }

    /// Gaussian init scaled by fan-in; gate starts at 1.
    pub fn random<R: Rng + ?Sized>(cfg: &DmaConfig, rng: &mut R) -> Self {
        let (d, inner) = (cfg.d_model, cfg.inner_dim());
        let mut gauss = |shape: [usize; 2], fan_in: usize| {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            Tensor::from_fn(shape, |_| S::from_f64(normal.sample(rng)))
        };
        let wq = gauss([d, inner], d);
        let wk = gauss([d, inner], d);
        let wv = gauss([d, inner], d);
        let wod = gauss([inner, d], inner);
        let delta = gauss([cfg.n_heads, cfg.head_dim], cfg.head_dim);
        Self { wq, wk, wv, wod, delta, gate: Tensor::full([cfg.n_heads], S::ONE) }
    }

    pub fn check(&self, cfg: &DmaConfig) -> Result<()> {
        let (d, inner) = (cfg.d_model, cfg.inner_dim());
        let expect: [(&str, &Tensor<S>, Vec<usize>); 6] = [
            ("wq", &self.wq, vec![d, inner]),
            ("wk", &self.wk, vec![d, inner]),
            ("wv", &self.wv, vec![d, inner]),
            ("wod", &self.wod, vec![inner, d]),
            ("delta", &self.delta, vec![cfg.n_heads, cfg.head_dim]),
            ("gate", &self.gate, vec![cfg.n_heads]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(DmaError::Shape {
                    op: "weights",
                    detail: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            if !t.all_finite() {
                return Err(DmaError::Config(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor<S>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wod, &self.delta, &self.gate]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<S>; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wod,
            &mut self.delta,
            &mut self.gate,
        ]
    }

    pub fn cast<T: Scalar>(&self) -> DmaWeights<T> {
        DmaWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wod: self.wod.cast(),
            delta: self.delta.cast(),
            gate: self.gate.cast(),
        }
    }
}
