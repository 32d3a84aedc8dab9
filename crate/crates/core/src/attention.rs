//! Forward path of dynamic mask attention.
//!
//! `h -> (q, k, v)` by per-head projections, per-key dynamic weights
//! `delta = exp(A * softplus(<v, Delta>))`, a top-w mask over causal keys, and
//! a tiled attention kernel that never touches tiles without a kept entry.
//!
//! The kernel works on `(head, query block)` tasks. Each task walks the key
//! tiles in ascending order and, for active tiles, scores only the kept keys.
//! Scores are reduced per row in ascending key order so the skipping and
//! non-skipping paths produce bitwise identical results.

use rayon::prelude::*;

use crate::config::{DmaConfig, DmaWeights};
use crate::error::{shape_err, DmaError, Result};
use crate::mask::{mask_for_kind, DynamicMask};
use crate::rope::apply_rope;
use crate::tensor::{softmax_in_place, softplus, Scalar, Tensor};

/// Exponents above this make `exp` overflow in `f64`.
pub const MAX_DELTA_EXPONENT: f64 = 700.0;

/// `[seq x n_heads*head_dim] -> [n_heads x seq x head_dim]`
pub fn split_heads<S: Scalar>(x: &Tensor<S>, n_heads: usize) -> Result<Tensor<S>> {
    let (seq, inner) = match x.shape() {
        &[s, i] if i % n_heads == 0 => (s, i),
        other => {
            return Err(shape_err(
                "split_heads",
                format!("cannot split {other:?} into {n_heads} heads"),
            ))
        }
    };
    let d = inner / n_heads;
    let mut out = Vec::with_capacity(x.len());
    for h in 0..n_heads {
        for s in 0..seq {
            out.extend_from_slice(&x.row(s)[h * d..(h + 1) * d]);
        }
    }
    Ok(Tensor::new([n_heads, seq, d], out)?)
}

/// `[n_heads x seq x head_dim] -> [seq x n_heads*head_dim]`
pub fn merge_heads<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n_heads, seq, d) = three_d(x, "merge_heads")?;
    let mut out = Vec::with_capacity(x.len());
    for s in 0..seq {
        for h in 0..n_heads {
            let base = (h * seq + s) * d;
            out.extend_from_slice(&x.data()[base..base + d]);
        }
    }
    Ok(Tensor::new([seq, n_heads * d], out)?)
}

pub(crate) fn three_d<S: Scalar>(x: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[a, b, c] => Ok((a, b, c)),
        other => Err(shape_err(op, format!("expected a 3-D tensor, got {other:?}"))),
    }
}

/// Projects `h` (`[seq x d_model]`) into per-head `q, k, v`, rotating `q` and
/// `k` when RoPE is enabled. Row `s` is position `s`.
pub fn project_qkv<S: Scalar>(
    h: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    project_qkv_at(h, weights, cfg, 0)
}

/// As [`project_qkv`], with row `s` at absolute position `offset + s`.
pub fn project_qkv_at<S: Scalar>(
    h: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    offset: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    cfg.validate()?;
    match h.shape() {
        &[_, d] if d == cfg.d_model => {}
        other => {
            return Err(shape_err(
                "project_qkv",
                format!("input {other:?} does not have d_model = {} columns", cfg.d_model),
            ))
        }
    }
    let mut q = split_heads(&h.matmul(&weights.wq)?, cfg.n_heads)?;
    let mut k = split_heads(&h.matmul(&weights.wk)?, cfg.n_heads)?;
    let v = split_heads(&h.matmul(&weights.wv)?, cfg.n_heads)?;
    if cfg.use_rope {
        apply_rope(&mut q, offset, cfg.rope_base, false);
        apply_rope(&mut k, offset, cfg.rope_base, false);
    }
    Ok((q, k, v))
}

/// Concatenates `[n_heads x t x d]` tensors along the sequence axis.
pub fn concat_seq<S: Scalar>(past: &Tensor<S>, new: &Tensor<S>) -> Result<Tensor<S>> {
    let (hp, tp, dp) = three_d(past, "concat_kv")?;
    let (hn, tn, dn) = three_d(new, "concat_kv")?;
    if hp != hn || dp != dn {
        return Err(shape_err(
            "concat_kv",
            format!("past {:?} and new {:?} disagree on heads/dim", past.shape(), new.shape()),
        ));
    }
    let mut out = Vec::with_capacity(past.len() + new.len());
    for h in 0..hp {
        out.extend_from_slice(&past.data()[h * tp * dp..(h + 1) * tp * dp]);
        out.extend_from_slice(&new.data()[h * tn * dn..(h + 1) * tn * dn]);
    }
    Ok(Tensor::new([hp, tp + tn, dp], out)?)
}

/// Appends freshly projected keys and values to the cached ones.
pub fn concat_kv<S: Scalar>(
    past_k: &Tensor<S>,
    past_v: &Tensor<S>,
    new_k: &Tensor<S>,
    new_v: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((concat_seq(past_k, new_k)?, concat_seq(past_v, new_v)?))
}

/// `<v[h][j], Delta[h]>` for every head and key, in `f64`.
pub(crate) fn delta_logits<S: Scalar>(v: &Tensor<S>, weights: &DmaWeights<S>) -> Vec<f64> {
    let shape = v.shape();
    let (n_heads, t, d) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(n_heads * t);
    for h in 0..n_heads {
        let sample = &weights.delta.data()[h * d..(h + 1) * d];
        for j in 0..t {
            let row = &v.data()[(h * t + j) * d..(h * t + j + 1) * d];
            let mut z = 0.0;
            for (a, b) in row.iter().zip(sample) {
                z += a.to_f64() * b.to_f64();
            }
            out.push(z);
        }
    }
    out
}

/// Dynamic weights `delta[h][j] = exp(A[h] * softplus(<v[h][j], Delta[h]>))`,
/// shape `[n_heads x t]`.
pub fn dynamic_delta<S: Scalar>(
    v: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
) -> Result<Tensor<S>> {
    let (n_heads, t, d) = three_d(v, "dynamic_delta")?;
    if n_heads != cfg.n_heads || d != cfg.head_dim {
        return Err(shape_err(
            "dynamic_delta",
            format!("v {:?} does not match {} heads of dim {}", v.shape(), cfg.n_heads, cfg.head_dim),
        ));
    }
    let logits = delta_logits(v, weights);
    let mut out = Vec::with_capacity(n_heads * t);
    for h in 0..n_heads {
        let gate = weights.gate.data()[h].to_f64();
        for j in 0..t {
            let exponent = gate * softplus(logits[h * t + j]);
            if !(exponent <= MAX_DELTA_EXPONENT) {
                return Err(DmaError::ParameterOverflow { head: h, key: j, exponent });
            }
            out.push(S::from_f64(exponent.exp()));
        }
    }
    Ok(Tensor::new([n_heads, t], out)?)
}

/// Block accounting of one kernel invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipStats {
    pub total_blocks: usize,
    pub skipped_blocks: usize,
}

impl SkipStats {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped_blocks as f64 / self.total_blocks.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelOptions {
    /// Skip tiles with no kept entry and score only kept keys. When false,
    /// every causal score is computed and masked afterwards.
    pub skip_masked: bool,
    /// Keep per-entry scores and probabilities for the backward pass.
    pub record: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { skip_masked: true, record: true }
    }
}

/// Output of the attention kernel before the output projection.
#[derive(Debug, Clone)]
pub struct KernelOutput<S = f64> {
    /// `[n_heads x n_q x head_dim]`
    pub context: Tensor<S>,
    /// Scores (`q.k/sqrt(d) + bias`) at kept entries, aligned with the mask's
    /// flat kept-entry order. Empty unless recorded.
    pub scores: Vec<S>,
    /// Softmax probabilities at kept entries, same alignment as `scores`.
    pub probs: Vec<S>,
    pub stats: SkipStats,
}

struct TaskOut<S> {
    context: Vec<S>,
    scores: Vec<S>,
    probs: Vec<S>,
    skipped: usize,
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// Tiled masked attention over `q` (`[n_heads x n_q x d]`) and `k, v`
/// (`[n_heads x n_k x d]`).
pub fn attend<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &DynamicMask<S>,
    opts: KernelOptions,
) -> Result<KernelOutput<S>> {
    let (n_heads, n_q, d) = three_d(q, "attend")?;
    let (hk, n_k, dk) = three_d(k, "attend")?;
    if k.shape() != v.shape() || hk != n_heads || dk != d {
        return Err(shape_err(
            "attend",
            format!("q {:?}, k {:?}, v {:?} are inconsistent", q.shape(), k.shape(), v.shape()),
        ));
    }
    if mask.n_heads() != n_heads || mask.n_q() != n_q || mask.n_k() != n_k {
        return Err(shape_err(
            "attend",
            format!(
                "mask covers {}x{}x{}, inputs need {n_heads}x{n_q}x{n_k}",
                mask.n_heads(),
                mask.n_q(),
                mask.n_k()
            ),
        ));
    }
    for h in 0..n_heads {
        for i in 0..n_q {
            if mask.active_count(h, i) == 0 {
                return Err(DmaError::DegenerateRow { head: h, row: i });
            }
        }
    }

    let nqb = mask.n_q_blocks();
    let tasks: Vec<TaskOut<S>> = (0..n_heads * nqb)
        .into_par_iter()
        .map(|task| {
            let (h, qb) = (task / nqb, task % nqb);
            if opts.skip_masked {
                sparse_task(q, k, v, mask, h, qb, opts.record)
            } else {
                dense_task(q, k, v, mask, h, qb, opts.record)
            }
        })
        .collect();

    let mut context = vec![S::ZERO; n_heads * n_q * d];
    let mut scores = Vec::with_capacity(if opts.record { mask.nnz() } else { 0 });
    let mut probs = Vec::with_capacity(scores.capacity());
    let mut skipped = 0;
    for (task, out) in tasks.into_iter().enumerate() {
        let (h, qb) = (task / nqb, task % nqb);
        let start = (h * n_q + qb * mask.block_q()) * d;
        context[start..start + out.context.len()].copy_from_slice(&out.context);
        scores.extend(out.scores);
        probs.extend(out.probs);
        skipped += out.skipped;
    }
    Ok(KernelOutput {
        context: Tensor::new([n_heads, n_q, d], context)?,
        scores,
        probs,
        stats: SkipStats { total_blocks: n_heads * nqb * mask.n_k_blocks(), skipped_blocks: skipped },
    })
}

fn sparse_task<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &DynamicMask<S>,
    h: usize,
    qb: usize,
    record: bool,
) -> TaskOut<S> {
    let (n_q, n_k, d) = (mask.n_q(), mask.n_k(), q.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let (bq, bk) = (mask.block_q(), mask.block_k());
    let rows = qb * bq..((qb + 1) * bq).min(n_q);
    let kq = &k.data()[h * n_k * d..(h + 1) * n_k * d];
    let vq = &v.data()[h * n_k * d..(h + 1) * n_k * d];
    let qh = &q.data()[h * n_q * d..(h + 1) * n_q * d];

    let bias = mask.head_bias(h);
    let mut cursor = vec![0usize; rows.len()];
    let mut row_scores: Vec<Vec<S>> =
        rows.clone().map(|i| Vec::with_capacity(mask.active_count(h, i))).collect();
    let mut skipped = 0;
    for kb in 0..mask.n_k_blocks() {
        if !mask.block_active(h, qb, kb) {
            skipped += 1;
            continue;
        }
        let k_end = ((kb + 1) * bk).min(n_k) as u32;
        for (r, i) in rows.clone().enumerate() {
            let kept = mask.kept_keys(h, i);
            let q_row = &qh[i * d..(i + 1) * d];
            let start = cursor[r];
            let end = start + kept[start..].partition_point(|&j| j < k_end);
            let out = &mut row_scores[r];
            for &j in &kept[start..end] {
                let j = j as usize;
                out.push(S::from_f64(dot(q_row, &kq[j * d..(j + 1) * d]) * scale) + bias[j]);
            }
            cursor[r] = end;
        }
    }

    let mut context = Vec::with_capacity(rows.len() * d);
    let mut scores = Vec::new();
    let mut probs = Vec::new();
    let mut acc = vec![0.0f64; d];
    let mut p = Vec::new();
    for (r, i) in rows.clone().enumerate() {
        let kept = mask.kept_keys(h, i);
        p.clear();
        p.extend_from_slice(&row_scores[r]);
        softmax_in_place(&mut p).expect("row has at least one kept key");
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (&j, &pj) in kept.iter().zip(&p) {
            let pj = pj.to_f64();
            for (a, &vv) in acc.iter_mut().zip(&vq[j as usize * d..(j as usize + 1) * d]) {
                *a += pj * vv.to_f64();
            }
        }
        context.extend(acc.iter().map(|&x| S::from_f64(x)));
        if record {
            scores.extend_from_slice(&row_scores[r]);
            probs.extend_from_slice(&p);
        }
    }
    TaskOut { context, scores, probs, skipped }
}

fn dense_task<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &DynamicMask<S>,
    h: usize,
    qb: usize,
    record: bool,
) -> TaskOut<S> {
    let (n_q, n_k, d) = (mask.n_q(), mask.n_k(), q.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let (bq, bk) = (mask.block_q(), mask.block_k());
    let offset = mask.q_offset();
    let rows = qb * bq..((qb + 1) * bq).min(n_q);
    let kq = &k.data()[h * n_k * d..(h + 1) * n_k * d];
    let vq = &v.data()[h * n_k * d..(h + 1) * n_k * d];
    let qh = &q.data()[h * n_q * d..(h + 1) * n_q * d];

    let mut bias_rows: Vec<Vec<S>> = rows
        .clone()
        .map(|i| {
            let mut b = vec![S::NEG_INFINITY; offset + i + 1];
            for &j in mask.kept_keys(h, i) {
                b[j as usize] = mask.key_bias(h, j as usize);
            }
            b
        })
        .collect();
    for kb in 0..mask.n_k_blocks() {
        let k_start = kb * bk;
        for (r, i) in rows.clone().enumerate() {
            let pos = offset + i;
            let q_row = &qh[i * d..(i + 1) * d];
            let row = &mut bias_rows[r];
            for j in k_start..((kb + 1) * bk).min(pos + 1) {
                row[j] = S::from_f64(dot(q_row, &kq[j * d..(j + 1) * d]) * scale) + row[j];
            }
        }
    }

    let mut context = Vec::with_capacity(rows.len() * d);
    let mut scores = Vec::new();
    let mut probs = Vec::new();
    let mut acc = vec![0.0f64; d];
    for (r, i) in rows.clone().enumerate() {
        let raw = &bias_rows[r];
        let mut p = raw.clone();
        softmax_in_place(&mut p).expect("row has at least one kept key");
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (j, &pj) in p.iter().enumerate() {
            let pj = pj.to_f64();
            for (a, &vv) in acc.iter_mut().zip(&vq[j * d..(j + 1) * d]) {
                *a += pj * vv.to_f64();
            }
        }
        context.extend(acc.iter().map(|&x| S::from_f64(x)));
        if record {
            for &j in mask.kept_keys(h, i) {
                scores.push(raw[j as usize]);
                probs.push(p[j as usize]);
            }
        }
    }
    TaskOut { context, scores, probs, skipped: 0 }
}

/// Attention plus output projection, given projected `q, k, v` and a mask.
pub fn sparse_attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &DynamicMask<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
) -> Result<(KernelOutput<S>, Tensor<S>)> {
    attention_with_options(q, k, v, mask, weights, cfg, KernelOptions::default())
}

pub fn attention_with_options<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: &DynamicMask<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    opts: KernelOptions,
) -> Result<(KernelOutput<S>, Tensor<S>)> {
    if q.shape().first() != Some(&cfg.n_heads) || q.shape().get(2) != Some(&cfg.head_dim) {
        return Err(shape_err("sparse_attention_forward", "q does not match config heads"));
    }
    let kernel = attend(q, k, v, mask, opts)?;
    let output = merge_heads(&kernel.context)?.matmul(&weights.wod)?;
    Ok((kernel, output))
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionActivations<S = f64> {
    /// `[seq x d_model]`
    pub input: Tensor<S>,
    /// `[n_heads x seq x head_dim]`; `q` and `k` after rotation.
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// `[n_heads x seq]`; zeros for static masks.
    pub delta: Tensor<S>,
    /// Kept-entry scores and probabilities, aligned with the mask.
    pub scores: Vec<S>,
    pub probs: Vec<S>,
    /// `[n_heads x seq x head_dim]`
    pub context: Tensor<S>,
    /// `[seq x d_model]`
    pub output: Tensor<S>,
    pub stats: SkipStats,
}

impl<S: Scalar> AttentionActivations<S> {
    /// Probabilities as a dense `[n_heads x n_q x n_k]` tensor, zero where masked.
    pub fn probs_dense(&self, mask: &DynamicMask<S>) -> Tensor<S> {
        scatter(mask, &self.probs, S::ZERO)
    }

    /// Scores as a dense tensor, `-inf` where masked.
    pub fn scores_dense(&self, mask: &DynamicMask<S>) -> Tensor<S> {
        scatter(mask, &self.scores, S::NEG_INFINITY)
    }
}

fn scatter<S: Scalar>(mask: &DynamicMask<S>, values: &[S], fill: S) -> Tensor<S> {
    let (nh, nq, nk) = (mask.n_heads(), mask.n_q(), mask.n_k());
    let mut out = Tensor::full([nh, nq, nk], fill);
    let data = out.data_mut();
    for h in 0..nh {
        for i in 0..nq {
            let range = mask.row_range(h, i);
            for (&j, &x) in mask.kept_keys(h, i).iter().zip(&values[range]) {
                data[(h * nq + i) * nk + j as usize] = x;
            }
        }
    }
    out
}

/// Full layer forward on `h` (`[seq x d_model]`), building the mask selected
/// by `cfg.mask`.
pub fn forward<S: Scalar>(
    h: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
) -> Result<(AttentionActivations<S>, DynamicMask<S>)> {
    forward_with_options(h, weights, cfg, KernelOptions::default())
}

pub fn forward_with_options<S: Scalar>(
    h: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    opts: KernelOptions,
) -> Result<(AttentionActivations<S>, DynamicMask<S>)> {
    weights.check(cfg)?;
    let (q, k, v) = project_qkv(h, weights, cfg)?;
    let seq = h.shape()[0];
    let delta = if cfg.mask.uses_dynamic_weights() {
        dynamic_delta(&v, weights, cfg)?
    } else {
        Tensor::zeros([cfg.n_heads, seq])
    };
    let mask = mask_for_kind(cfg.mask, &delta, seq, cfg)?;
    let (kernel, output) = attention_with_options(&q, &k, &v, &mask, weights, cfg, opts)?;
    let acts = AttentionActivations {
        input: h.clone(),
        q,
        k,
        v,
        delta,
        scores: kernel.scores,
        probs: kernel.probs,
        context: kernel.context,
        output,
        stats: kernel.stats,
    };
    Ok((acts, mask))
}

/// Cached keys, values and dynamic weights for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<S = f64> {
    /// `[n_heads x t x head_dim]`, rotated.
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    /// `[n_heads x t]`
    pub delta: Tensor<S>,
}

impl<S: Scalar> KvCache<S> {
    pub fn empty(cfg: &DmaConfig) -> Self {
        Self {
            k: Tensor::zeros([cfg.n_heads, 0, cfg.head_dim]),
            v: Tensor::zeros([cfg.n_heads, 0, cfg.head_dim]),
            delta: Tensor::zeros([cfg.n_heads, 0]),
        }
    }

    pub fn len(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of one decoding step.
#[derive(Debug, Clone)]
pub struct DecodeStep<S = f64> {
    /// `[1 x d_model]`
    pub output: Tensor<S>,
    pub cache: KvCache<S>,
    pub mask: DynamicMask<S>,
}

/// Attends the single token `h_new` (`[1 x d_model]`) to the cache plus itself.
pub fn decode_step<S: Scalar>(
    cache: KvCache<S>,
    h_new: &Tensor<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
) -> Result<DecodeStep<S>> {
    if h_new.shape().first() != Some(&1) {
        return Err(shape_err("decode_step", format!("expected one token, got {:?}", h_new.shape())));
    }
    let pos = cache.len();
    if cache.delta.shape() != [cfg.n_heads, pos] || cache.v.shape() != cache.k.shape() {
        return Err(DmaError::Consistency("kv cache extents disagree".into()));
    }
    let (q, k_new, v_new) = project_qkv_at(h_new, weights, cfg, pos)?;
    let delta_new = if cfg.mask.uses_dynamic_weights() {
        dynamic_delta(&v_new, weights, cfg)?
    } else {
        Tensor::zeros([cfg.n_heads, 1])
    };
    let (k, v) = concat_kv(&cache.k, &cache.v, &k_new, &v_new)?;
    let delta = {
        let d3 = |t: &Tensor<S>| t.clone().reshape([cfg.n_heads, t.shape()[1], 1]);
        concat_seq(&d3(&cache.delta)?, &d3(&delta_new)?)?.reshape([cfg.n_heads, pos + 1])?
    };
    let mask = mask_for_kind(cfg.mask, &delta, 1, cfg)?;
    let opts = KernelOptions { skip_masked: true, record: false };
    let (_, output) = attention_with_options(&q, &k, &v, &mask, weights, cfg, opts)?;
    Ok(DecodeStep { output, cache: KvCache { k, v, delta }, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MaskKind;
    use crate::mask::build_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_projection_selects_input() {
        let cfg = DmaConfig::new(2, 2, 4);
        let mut w = DmaWeights::<f64>::zeros(&cfg);
        for i in 0..4 {
            w.wq.set(&[i, i], 1.0);
        }
        let h = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap();
        let (q, _, _) = project_qkv(&h, &w, &cfg).unwrap();
        assert_eq!(q.shape(), &[2, 2, 2]);
        // token 0 is e_2 -> head 1, dim 0.
        assert_eq!(q.at(&[1, 0, 0]), 1.0);
        assert_eq!(q.at(&[0, 0, 0]), 0.0);
        assert_eq!(merge_heads(&q).unwrap(), h);
    }

    #[test]
    fn single_token_projection_matches_vector_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = DmaConfig::new(2, 3, 2);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let h = rand_tensor(&[1, 6], &mut rng);
        let (q, k, v) = project_qkv(&h, &w, &cfg).unwrap();
        for (out, wt) in [(&q, &w.wq), (&k, &w.wk), (&v, &w.wv)] {
            for head in 0..2 {
                for c in 0..3 {
                    let col = head * 3 + c;
                    let mut s = 0.0;
                    for r in 0..6 {
                        s += h.at(&[0, r]) * wt.at(&[r, col]);
                    }
                    assert!((out.at(&[head, 0, c]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rope_at_position_zero_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DmaConfig::new(2, 4, 2);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let h = rand_tensor(&[1, 8], &mut rng);
        let plain = project_qkv(&h, &w, &cfg).unwrap();
        let roped = project_qkv(&h, &w, &cfg.clone().with_rope(10_000.0)).unwrap();
        assert_eq!(plain.0, roped.0);
        assert_eq!(plain.1, roped.1);
    }

    #[test]
    fn concat_examples() {
        let cfg = DmaConfig::new(2, 3, 2);
        let empty = KvCache::<f64>::empty(&cfg);
        let new = Tensor::<f64>::from_fn([2, 3, 3], |i| i as f64);
        let (k, _) = concat_kv(&empty.k, &empty.v, &new, &new).unwrap();
        assert_eq!(k, new);

        let past = Tensor::<f64>::from_fn([2, 2, 3], |i| 100.0 + i as f64);
        let one = Tensor::<f64>::from_fn([2, 1, 3], |i| -(i as f64));
        let (k, _) = concat_kv(&past, &past, &one, &one).unwrap();
        assert_eq!(k.shape(), &[2, 3, 3]);
        for h in 0..2 {
            assert_eq!(&k.data()[h * 9..h * 9 + 6], &past.data()[h * 6..h * 6 + 6]);
        }
        let bad = Tensor::<f64>::zeros([2, 1, 4]);
        assert!(concat_kv(&past, &past, &bad, &bad).is_err());
    }

    #[test]
    fn decode_concat_matches_batch_concat() {
        let all = Tensor::<f64>::from_fn([2, 8, 3], |i| (i as f64).sin());
        let cfg = DmaConfig::new(2, 3, 2);
        let mut k = KvCache::<f64>::empty(&cfg).k;
        for s in 0..8 {
            let step = Tensor::from_fn([2, 1, 3], |i| all.at(&[i / 3, s, i % 3]));
            k = concat_seq(&k, &step).unwrap();
        }
        assert_eq!(k, all);
    }

    #[test]
    fn delta_examples() {
        let cfg = DmaConfig::new(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let v = rand_tensor(&[2, 4, 3], &mut rng);

        w.gate = Tensor::zeros([2]);
        assert!(dynamic_delta(&v, &w, &cfg).unwrap().data().iter().all(|&x| x == 1.0));

        w.gate = Tensor::full([2], 1.0);
        let zeros = Tensor::<f64>::zeros([2, 4, 3]);
        for &x in dynamic_delta(&zeros, &w, &cfg).unwrap().data() {
            assert!((x - 2.0).abs() < 1e-15);
        }

        w.gate = Tensor::new([2], vec![0.7, -1.3]).unwrap();
        let got = dynamic_delta(&v, &w, &cfg).unwrap();
        for h in 0..2 {
            for j in 0..4 {
                let mut z = 0.0;
                for c in 0..3 {
                    z += v.at(&[h, j, c]) * w.delta.at(&[h, c]);
                }
                let want = (w.gate.at(&[h]) * (1.0 + z.exp()).ln()).exp();
                assert!((got.at(&[h, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_overflow_is_reported() {
        let cfg = DmaConfig::new(1, 1, 1);
        let mut w = DmaWeights::<f64>::zeros(&cfg);
        w.delta = Tensor::full([1, 1], 1.0);
        w.gate = Tensor::full([1], 100.0);
        let v = Tensor::full([1, 2, 1], 10.0);
        assert!(matches!(
            dynamic_delta(&v, &w, &cfg),
            Err(DmaError::ParameterOverflow { head: 0, key: 0, .. })
        ));
    }

    #[test]
    fn single_survivor_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = DmaConfig::new(2, 3, 1).with_blocks(2, 2);
        let (q, k, v) = (
            rand_tensor(&[2, 5, 3], &mut rng),
            rand_tensor(&[2, 5, 3], &mut rng),
            rand_tensor(&[2, 5, 3], &mut rng),
        );
        let delta = rand_tensor(&[2, 5], &mut rng).map(crate::tensor::Elementwise::Exp);
        let mask = build_mask(&delta, 5, &cfg).unwrap();
        let out = attend(&q, &k, &v, &mask, KernelOptions::default()).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let j = mask.kept_keys(h, i)[0] as usize;
                for c in 0..3 {
                    assert_eq!(out.context.at(&[h, i, c]), v.at(&[h, j, c]));
                }
            }
        }
        assert!(out.probs.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn skipping_is_bitwise_equal_to_full_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(t, w) in &[(37usize, 5usize), (64, 8), (16, 16), (9, 1)] {
            let cfg = DmaConfig::new(2, 4, w).with_blocks(4, 8);
            let (q, k, v) = (
                rand_tensor(&[2, t, 4], &mut rng),
                rand_tensor(&[2, t, 4], &mut rng),
                rand_tensor(&[2, t, 4], &mut rng),
            );
            let delta = rand_tensor(&[2, t], &mut rng).map(crate::tensor::Elementwise::Exp);
            let mask = build_mask(&delta, t, &cfg).unwrap();
            let sparse = attend(&q, &k, &v, &mask, KernelOptions::default()).unwrap();
            let dense =
                attend(&q, &k, &v, &mask, KernelOptions { skip_masked: false, record: true })
                    .unwrap();
            assert_eq!(sparse.context, dense.context);
            assert_eq!(sparse.probs, dense.probs);
            assert_eq!(sparse.scores, dense.scores);
            assert_eq!(dense.stats.skipped_blocks, 0);
        }
    }

    #[test]
    fn probs_are_zero_exactly_where_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DmaConfig::new(2, 4, 3).with_blocks(4, 4);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let h = rand_tensor(&[20, 8], &mut rng);
        let (acts, mask) = forward(&h, &w, &cfg).unwrap();
        let probs = acts.probs_dense(&mask);
        let bias = mask.dense_bias();
        for (p, b) in probs.data().iter().zip(bias.data()) {
            if *b == f64::NEG_INFINITY {
                assert_eq!(*p, 0.0);
            }
        }
        for hh in 0..2 {
            for i in 0..20 {
                let s: f64 = (0..20).map(|j| probs.at(&[hh, i, j])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_first_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DmaConfig::new(2, 2, 4);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let h = rand_tensor(&[1, 4], &mut rng);
        let step = decode_step(KvCache::empty(&cfg), &h, &w, &cfg).unwrap();
        assert_eq!(step.cache.len(), 1);
        assert_eq!(step.mask.kept_keys(0, 0), &[0]);
        // one key with probability 1: output = v W_od
        let (_, _, v) = project_qkv(&h, &w, &cfg).unwrap();
        let want = merge_heads(&v).unwrap().matmul(&w.wod).unwrap();
        assert!(step.output.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn long_cache_keeps_exactly_window_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = DmaConfig::new(2, 4, 64);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let t = 4096;
        let k = rand_tensor(&[2, t, 4], &mut rng);
        let v = rand_tensor(&[2, t, 4], &mut rng);
        let delta = dynamic_delta(&v, &w, &cfg).unwrap();
        let cache = KvCache { k, v, delta };
        let h = rand_tensor(&[1, 8], &mut rng);
        let step = decode_step(cache, &h, &w, &cfg).unwrap();
        for head in 0..2 {
            assert_eq!(step.mask.active_count(head, 0), 64);
        }
    }

    #[test]
    fn static_mask_kinds_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [MaskKind::Causal, MaskKind::SlidingWindow] {
            let cfg = DmaConfig::new(2, 2, 3).with_mask(kind);
            let w = DmaWeights::<f64>::random(&cfg, &mut rng);
            let h = rand_tensor(&[7, 4], &mut rng);
            let (acts, mask) = forward(&h, &w, &cfg).unwrap();
            assert!(acts.output.all_finite());
            assert_eq!(acts.delta, Tensor::zeros([2, 7]));
            let expect = if kind == MaskKind::Causal { 7 } else { 3 };
            assert_eq!(mask.active_count(1, 6), expect);
        }
    }
}
