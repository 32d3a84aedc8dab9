//! Pre-norm transformer with one attention layer per block and a SiLU MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{forward, AttentionActivations};
use crate::config::{DmaConfig, DmaWeights, MaskKind};
use crate::error::{DmaError, Result};
use crate::grad::backward;
use crate::mask::DynamicMask;
use crate::tensor::{sigmoid, Tensor};

const NORM_EPS: f64 = 1e-6;

fn default_true() -> bool {
    true
}

fn default_block() -> usize {
    16
}

fn default_gate() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    /// Reuse the embedding table as the output projection.
    #[serde(default)]
    pub tied_head: bool,
    #[serde(default)]
    pub mask: MaskKind,
    #[serde(default = "default_true")]
    pub use_rope: bool,
    #[serde(default = "default_block")]
    pub block: usize,
    /// Initial value of every attention gate `A`.
    #[serde(default = "default_gate")]
    pub gate_init: f64,
}

impl ModelConfig {
    pub fn small(vocab_size: usize, mask: MaskKind) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            window: 16,
            mlp_hidden: 32,
            tied_head: false,
            mask,
            use_rope: true,
            block: 16,
            gate_init: 0.1,
        }
    }

    pub fn attention(&self) -> DmaConfig {
        let cfg = DmaConfig::new(self.n_heads, self.d_model / self.n_heads.max(1), self.window)
            .with_blocks(self.block, self.block)
            .with_mask(self.mask);
        if self.use_rope {
            cfg.with_rope(10_000.0)
        } else {
            cfg
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(DmaError::Config("the model needs at least one layer".into()));
        }
        if self.vocab_size == 0 || self.mlp_hidden == 0 {
            return Err(DmaError::Config("vocab_size and mlp_hidden must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DmaError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        self.attention().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: DmaWeights,
    pub norm_attn: Tensor,
    pub norm_mlp: Tensor,
    /// `[d_model x mlp_hidden]`
    pub w_in: Tensor,
    /// `[mlp_hidden x d_model]`
    pub w_out: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub config: ModelConfig,
    /// `[vocab x d_model]`
    pub embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `[d_model x vocab]`; absent when tied.
    pub head: Option<Tensor>,
}

struct NormCache {
    normed: Tensor,
    inv_rms: Vec<f64>,
}

fn rms_norm(x: &Tensor, gain: &Tensor) -> (Tensor, NormCache) {
    let d = x.cols();
    let mut normed = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = normed.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
        inv_rms.push(inv);
    }
    let mut y = normed.clone();
    for r in 0..y.rows() {
        for (v, g) in y.row_mut(r).iter_mut().zip(gain.data()) {
            *v *= g;
        }
    }
    (y, NormCache { normed, inv_rms })
}

/// Returns `dx` and accumulates the gain gradient.
fn rms_norm_backward(dy: &Tensor, gain: &Tensor, cache: &NormCache, d_gain: &mut Tensor) -> Tensor {
    let d = dy.cols();
    let mut dx = Tensor::zeros([dy.rows(), d]);
    for r in 0..dy.rows() {
        let xhat = cache.normed.row(r);
        let dyr = dy.row(r);
        let mut proj = 0.0;
        for c in 0..d {
            d_gain.data_mut()[c] += dyr[c] * xhat[c];
            proj += dyr[c] * gain.data()[c] * xhat[c];
        }
        proj /= d as f64;
        let inv = cache.inv_rms[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = (dyr[c] * gain.data()[c] - xhat[c] * proj) * inv;
        }
    }
    dx
}

struct BlockCache {
    attn_norm: NormCache,
    acts: AttentionActivations,
    mask: DynamicMask,
    mlp_norm: NormCache,
    mlp_in: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// Activations of one sequence, kept for the backward pass.
pub(crate) struct Trace {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    rows: Vec<usize>,
    final_norm: NormCache,
    features: Tensor,
}

fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

impl TinyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, hid) = (config.vocab_size, config.d_model, config.mlp_hidden);
        let gauss = |shape: [usize; 2], std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| normal.sample(rng))
        };
        let embedding = gauss([v, d], 1.0, &mut rng);
        let attn_cfg = config.attention();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut attn = DmaWeights::random(&attn_cfg, &mut rng);
            attn.gate = Tensor::full([config.n_heads], config.gate_init);
            let w_in = gauss([d, hid], 1.0 / (d as f64).sqrt(), &mut rng);
            let w_out = gauss([hid, d], 1.0 / (hid as f64).sqrt(), &mut rng);
            blocks.push(Block {
                attn,
                norm_attn: Tensor::full([d], 1.0),
                norm_mlp: Tensor::full([d], 1.0),
                w_in,
                w_out,
            });
        }
        let head = (!config.tied_head).then(|| gauss([d, v], 1.0 / (d as f64).sqrt(), &mut rng));
        Ok(Self { config, embedding, blocks, final_norm: Tensor::full([d], 1.0), head })
    }

    /// Same shapes, all zeros; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    /// Parameter tensors with stable names, in flattening order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in crate::config::WEIGHT_NAMES.iter().zip(b.attn.tensors()) {
                out.push((format!("blocks.{i}.attn.{name}"), t));
            }
            out.push((format!("blocks.{i}.norm_attn"), &b.norm_attn));
            out.push((format!("blocks.{i}.norm_mlp"), &b.norm_mlp));
            out.push((format!("blocks.{i}.w_in"), &b.w_in));
            out.push((format!("blocks.{i}.w_out"), &b.w_out));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.attn.tensors_mut());
            out.push(&mut b.norm_attn);
            out.push(&mut b.norm_mlp);
            out.push(&mut b.w_in);
            out.push(&mut b.w_out);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DmaError::Checkpoint(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(DmaError::Config(format!(
                "{} blocks for {} layers",
                self.blocks.len(),
                self.config.n_layers
            )));
        }
        if self.head.is_some() == self.config.tied_head {
            return Err(DmaError::Config("output head presence disagrees with tied_head".into()));
        }
        if !self.all_finite() {
            return Err(DmaError::Config("model holds non-finite parameters".into()));
        }
        Ok(())
    }

    fn head_matrix(&self) -> Result<Tensor> {
        match &self.head {
            Some(h) => Ok(h.clone()),
            None => Ok(self.embedding.transpose()?),
        }
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut x = Tensor::zeros([tokens.len(), d]);
        for (r, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(DmaError::Config(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            x.row_mut(r).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(x)
    }

    /// Logits at `rows` (`[rows x vocab]`) plus the trace needed for gradients.
    pub(crate) fn forward_rows(&self, tokens: &[u32], rows: &[usize]) -> Result<(Tensor, Trace)> {
        let attn_cfg = self.config.attention();
        let mut x = self.embed(tokens)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a, attn_norm) = rms_norm(&x, &b.norm_attn);
            let (acts, mask) = forward(&a, &b.attn, &attn_cfg)?;
            x = x.add(&acts.output)?;
            let (mlp_in, mlp_norm) = rms_norm(&x, &b.norm_mlp);
            let pre = mlp_in.matmul(&b.w_in)?;
            let act = Tensor::from_fn(pre.shape().to_vec(), |i| silu(pre.data()[i]));
            x = x.add(&act.matmul(&b.w_out)?)?;
            blocks.push(BlockCache { attn_norm, acts, mask, mlp_norm, mlp_in, pre, act });
        }
        let d = self.config.d_model;
        let mut picked = Tensor::zeros([rows.len(), d]);
        for (r, &row) in rows.iter().enumerate() {
            picked.row_mut(r).copy_from_slice(x.row(row));
        }
        let (features, final_norm) = rms_norm(&picked, &self.final_norm);
        let logits = features.matmul(&self.head_matrix()?)?;
        let trace = Trace { tokens: tokens.to_vec(), blocks, rows: rows.to_vec(), final_norm, features };
        Ok((logits, trace))
    }

    /// Logits at every position, `[seq x vocab]`.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let rows: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.forward_rows(tokens, &rows)?.0)
    }

    /// Per-layer attention masks for `tokens`, first block first.
    pub fn masks(&self, tokens: &[u32]) -> Result<Vec<(AttentionActivations, DynamicMask)>> {
        let (_, trace) = self.forward_rows(tokens, &[])?;
        Ok(trace.blocks.into_iter().map(|b| (b.acts, b.mask)).collect())
    }

    /// Accumulates into `grads` the gradient of a loss whose gradient w.r.t.
    /// the logits of `trace` is `d_logits`.
    pub(crate) fn backward(&self, trace: &Trace, d_logits: &Tensor, grads: &mut TinyModel) -> Result<()> {
        let attn_cfg = self.config.attention();
        let head = self.head_matrix()?;
        let d_features = d_logits.matmul(&head.transpose()?)?;
        match &mut grads.head {
            Some(dh) => {
                let g = trace.features.transpose()?.matmul(d_logits)?;
                *dh = dh.add(&g)?;
            }
            None => {
                let g = d_logits.transpose()?.matmul(&trace.features)?;
                grads.embedding = grads.embedding.add(&g)?;
            }
        }
        let d_picked = rms_norm_backward(&d_features, &self.final_norm, &trace.final_norm, &mut grads.final_norm);
        let d = self.config.d_model;
        let mut dx = Tensor::zeros([trace.tokens.len(), d]);
        for (r, &row) in trace.rows.iter().enumerate() {
            for (o, g) in dx.row_mut(row).iter_mut().zip(d_picked.row(r)) {
                *o += g;
            }
        }

        for (i, (b, cache)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[i];
            // MLP branch.
            let d_act = dx.matmul(&b.w_out.transpose()?)?;
            gb.w_out = gb.w_out.add(&cache.act.transpose()?.matmul(&dx)?)?;
            let d_pre = Tensor::from_fn(d_act.shape().to_vec(), |k| d_act.data()[k] * silu_grad(cache.pre.data()[k]));
            gb.w_in = gb.w_in.add(&cache.mlp_in.transpose()?.matmul(&d_pre)?)?;
            let d_mlp_in = d_pre.matmul(&b.w_in.transpose()?)?;
            dx = dx.add(&rms_norm_backward(&d_mlp_in, &b.norm_mlp, &cache.mlp_norm, &mut gb.norm_mlp))?;
            // Attention branch.
            let g = backward(&cache.acts, &cache.mask, &b.attn, &attn_cfg, &dx)?;
            for (acc, part) in gb.attn.tensors_mut().into_iter().zip(g.weight_grads()) {
                *acc = acc.add(part)?;
            }
            dx = dx.add(&rms_norm_backward(&g.d_input, &b.norm_attn, &cache.attn_norm, &mut gb.norm_attn))?;
        }

        for (r, &t) in trace.tokens.iter().enumerate() {
            let row = grads.embedding.row_mut(t as usize);
            for (o, g) in row.iter_mut().zip(dx.row(r)) {
                *o += g;
            }
        }
        Ok(())
    }

    /// Adds `other` into `self` element by element.
    pub fn accumulate(&mut self, other: &TinyModel) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

/// Summed cross-entropy and the count of correct argmax predictions over the
/// rows of `logits`, with its gradient.
pub(crate) fn cross_entropy(logits: &Tensor, targets: &[u32]) -> (f64, usize, Tensor) {
    let v = logits.cols();
    let mut grad = Tensor::zeros([logits.rows(), v]);
    let (mut loss, mut correct) = (0.0, 0);
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = c;
            }
        }
        if best == t as usize {
            correct += 1;
        }
        let m = row[best];
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[t as usize];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = (row[c] - lse).exp();
        }
        grad.row_mut(r)[t as usize] -= 1.0;
    }
    (loss, correct, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;

    fn small(tied: bool, mask: MaskKind) -> TinyModel {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            window: 3,
            mlp_hidden: 8,
            tied_head: tied,
            mask,
            use_rope: true,
            block: 4,
            gate_init: 1.0,
        };
        TinyModel::new(cfg, 9).unwrap()
    }

    fn loss_at(model: &TinyModel, tokens: &[u32], rows: &[usize], targets: &[u32]) -> f64 {
        let (logits, _) = model.forward_rows(tokens, rows).unwrap();
        cross_entropy(&logits, targets).0
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let tokens = [3, 7, 1, 9, 3, 0, 5, 11, 2, 7];
        let rows = [4, 7, 9];
        let targets = [7, 2, 10];
        for (tied, mask) in [(false, MaskKind::Dynamic), (true, MaskKind::Dynamic), (false, MaskKind::SlidingWindow)] {
            let model = small(tied, mask);
            let (logits, trace) = model.forward_rows(&tokens, &rows).unwrap();
            let (_, _, d_logits) = cross_entropy(&logits, &targets);
            let mut grads = model.zeros_like();
            model.backward(&trace, &d_logits, &mut grads).unwrap();

            let fd = finite_diff_grad(
                |p| {
                    let mut m = model.clone();
                    m.load_flat(p)?;
                    Ok(loss_at(&m, &tokens, &rows, &targets))
                },
                &model.flatten(),
                Default::default(),
            )
            .unwrap();
            let analytic = grads.flatten();
            let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = fd.iter().zip(&analytic).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err / scale < 1e-4, "tied={tied} {mask:?}: rel err {}", err / scale);
        }
    }

    #[test]
    fn loss_ignores_non_query_logits() {
        let model = small(false, MaskKind::Dynamic);
        let tokens = [3, 7, 1, 9, 3, 0, 5, 11];
        let full = model.logits(&tokens).unwrap();
        let rows = [4, 6];
        let targets = [7, 1];
        let pick = |l: &Tensor| {
            Tensor::from_rows(&rows.iter().map(|&r| l.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let base = cross_entropy(&pick(&full), &targets).0;
        let mut perturbed = full.clone();
        for r in [0, 1, 2, 3, 5, 7] {
            perturbed.row_mut(r).iter_mut().for_each(|x| *x += 3.5);
        }
        assert_eq!(cross_entropy(&pick(&perturbed), &targets).0, base);
        assert!((loss_at(&model, &tokens, &rows, &targets) - base).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip_and_shapes() {
        let model = small(true, MaskKind::Causal);
        let mut other = model.zeros_like();
        other.load_flat(&model.flatten()).unwrap();
        assert_eq!(other, model);
        assert!(model.check().is_ok());
        assert!(other.load_flat(&[1.0]).is_err());
        assert!(model.logits(&[12]).is_err());
    }
}
