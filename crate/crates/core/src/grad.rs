//! Backward pass of the attention layer.
//!
//! Gradients flow only through kept entries. For a kept `(h, i, j)` with
//! probability `p` and upstream `dp = dO_i . v_j`, the score gradient is
//! `ds = p (dp - sum_j' p' dp')`; it feeds `q_i`, `k_j` and, because the
//! kept score carries `+ delta_j`, the dynamic weight of key `j`. The weight
//! gradient is then chained through `exp`, the gate, softplus and the
//! `<v, Delta>` contraction. The kept set itself is held fixed.
//!
//! [`grad_skip_audit`] re-runs the same math over every position with the
//! dense `-inf` mask and checks the two paths agree bit for bit.

use rayon::prelude::*;

use crate::attention::{delta_logits, merge_heads, split_heads, three_d, AttentionActivations};
use crate::config::{DmaConfig, DmaWeights, MaskKind};
use crate::error::{DmaError, Result};
use crate::mask::DynamicMask;
use crate::rope::apply_rope;
use crate::tensor::{sigmoid, softplus, Scalar, Tensor};

/// Gradients of a scalar loss with respect to every layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<S = f64> {
    pub d_wq: Tensor<S>,
    pub d_wk: Tensor<S>,
    pub d_wv: Tensor<S>,
    pub d_wod: Tensor<S>,
    pub d_delta: Tensor<S>,
    pub d_gate: Tensor<S>,
    /// `[seq x d_model]`
    pub d_input: Tensor<S>,
    /// `[n_heads x seq x head_dim]`, w.r.t. the rotated `q`/`k` and `v`.
    pub d_q: Tensor<S>,
    pub d_k: Tensor<S>,
    pub d_v: Tensor<S>,
    /// `[n_heads x seq]`, w.r.t. the dynamic weights.
    pub d_dynamic: Tensor<S>,
}

impl<S: Scalar> GradBundle<S> {
    /// Parameter gradients in `WEIGHT_NAMES` order.
    pub fn weight_grads(&self) -> [&Tensor<S>; 6] {
        [&self.d_wq, &self.d_wk, &self.d_wv, &self.d_wod, &self.d_delta, &self.d_gate]
    }

    pub fn as_weights(&self) -> DmaWeights<S> {
        DmaWeights {
            wq: self.d_wq.clone(),
            wk: self.d_wk.clone(),
            wv: self.d_wv.clone(),
            wod: self.d_wod.clone(),
            delta: self.d_delta.clone(),
            gate: self.d_gate.clone(),
        }
    }

    /// Named tensors, for reports.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("wq", &self.d_wq),
            ("wk", &self.d_wk),
            ("wv", &self.d_wv),
            ("wod", &self.d_wod),
            ("delta", &self.d_delta),
            ("gate", &self.d_gate),
            ("input", &self.d_input),
            ("q", &self.d_q),
            ("k", &self.d_k),
            ("v", &self.d_v),
            ("dynamic", &self.d_dynamic),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Attention-core gradients of one head, in `f64`.
struct HeadGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    ddelta: Vec<f64>,
    masked_nonzero: usize,
    masked_seen: usize,
}

fn check_consistency<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    cfg: &DmaConfig,
    d_out: &Tensor<S>,
) -> Result<()> {
    let (nh, nq, d) = three_d(&acts.q, "backward")?;
    let nk = acts.k.shape()[1];
    if nh != cfg.n_heads || d != cfg.head_dim {
        return Err(DmaError::Consistency(format!(
            "activations carry {nh} heads of dim {d}, config says {} of {}",
            cfg.n_heads, cfg.head_dim
        )));
    }
    if mask.n_heads() != nh || mask.n_q() != nq || mask.n_k() != nk {
        return Err(DmaError::Consistency(format!(
            "mask is {}x{}x{}, activations are {nh}x{nq}x{nk}",
            mask.n_heads(),
            mask.n_q(),
            mask.n_k()
        )));
    }
    if acts.probs.len() != mask.nnz() {
        return Err(DmaError::Consistency(format!(
            "{} recorded probabilities for {} kept entries",
            acts.probs.len(),
            mask.nnz()
        )));
    }
    if d_out.shape() != acts.output.shape() {
        return Err(DmaError::Consistency(format!(
            "upstream gradient {:?} does not match output {:?}",
            d_out.shape(),
            acts.output.shape()
        )));
    }
    Ok(())
}

/// Skipping path: visits kept entries only.
fn head_grads_sparse<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    d_ctx: &Tensor<S>,
    h: usize,
) -> HeadGrads {
    let (nq, nk, d) = (mask.n_q(), mask.n_k(), acts.q.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let qh = &acts.q.data()[h * nq * d..(h + 1) * nq * d];
    let kh = &acts.k.data()[h * nk * d..(h + 1) * nk * d];
    let vh = &acts.v.data()[h * nk * d..(h + 1) * nk * d];
    let doh = &d_ctx.data()[h * nq * d..(h + 1) * nq * d];
    let mut g = HeadGrads {
        dq: vec![0.0; nq * d],
        dk: vec![0.0; nk * d],
        dv: vec![0.0; nk * d],
        ddelta: vec![0.0; nk],
        masked_nonzero: 0,
        masked_seen: 0,
    };
    let mut dp = Vec::new();
    for i in 0..nq {
        let range = mask.row_range(h, i);
        let keys = mask.kept_keys(h, i);
        let probs = &acts.probs[range];
        let d_o = &doh[i * d..(i + 1) * d];
        dp.clear();
        for &j in keys {
            let j = j as usize;
            dp.push(dot(d_o, &vh[j * d..(j + 1) * d]));
        }
        let mut weighted = 0.0;
        for (p, x) in probs.iter().zip(&dp) {
            weighted += p.to_f64() * x;
        }
        for ((&j, p), x) in keys.iter().zip(probs).zip(&dp) {
            accumulate(&mut g, qh, kh, d_o, i, j as usize, p.to_f64(), *x, weighted, scale, d);
        }
    }
    g
}

/// Reference path: visits every `(i, j)` with the dense probabilities, which
/// are exactly zero at masked positions.
fn head_grads_naive<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    probs_dense: &Tensor<S>,
    bias_dense: &Tensor<S>,
    d_ctx: &Tensor<S>,
    h: usize,
) -> HeadGrads {
    let (nq, nk, d) = (mask.n_q(), mask.n_k(), acts.q.shape()[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let qh = &acts.q.data()[h * nq * d..(h + 1) * nq * d];
    let kh = &acts.k.data()[h * nk * d..(h + 1) * nk * d];
    let vh = &acts.v.data()[h * nk * d..(h + 1) * nk * d];
    let doh = &d_ctx.data()[h * nq * d..(h + 1) * nq * d];
    let mut g = HeadGrads {
        dq: vec![0.0; nq * d],
        dk: vec![0.0; nk * d],
        dv: vec![0.0; nk * d],
        ddelta: vec![0.0; nk],
        masked_nonzero: 0,
        masked_seen: 0,
    };
    for i in 0..nq {
        let d_o = &doh[i * d..(i + 1) * d];
        let row = (h * nq + i) * nk;
        let probs: Vec<f64> = (0..nk).map(|j| probs_dense.data()[row + j].to_f64()).collect();
        let dp: Vec<f64> = (0..nk).map(|j| dot(d_o, &vh[j * d..(j + 1) * d])).collect();
        let mut weighted = 0.0;
        for (p, x) in probs.iter().zip(&dp) {
            weighted += p * x;
        }
        for j in 0..nk {
            let ds = accumulate(&mut g, qh, kh, d_o, i, j, probs[j], dp[j], weighted, scale, d);
            if bias_dense.data()[row + j] == S::NEG_INFINITY {
                g.masked_seen += 1;
                if ds != 0.0 {
                    g.masked_nonzero += 1;
                }
            }
        }
    }
    g
}

/// One `(i, j)` contribution. Returns the score gradient.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate<S: Scalar>(
    g: &mut HeadGrads,
    qh: &[S],
    kh: &[S],
    d_o: &[S],
    i: usize,
    j: usize,
    p: f64,
    dp: f64,
    weighted: f64,
    scale: f64,
    d: usize,
) -> f64 {
    let ds = p * (dp - weighted);
    let c = ds * scale;
    for x in 0..d {
        g.dq[i * d + x] += c * kh[j * d + x].to_f64();
        g.dk[j * d + x] += c * qh[i * d + x].to_f64();
        g.dv[j * d + x] += p * d_o[x].to_f64();
    }
    g.ddelta[j] += ds;
    ds
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f64() * y.to_f64();
    }
    acc
}

/// Hand-derived gradients of the layer given the upstream gradient `d_out`
/// (`[seq x d_model]`).
pub fn backward<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    d_out: &Tensor<S>,
) -> Result<GradBundle<S>> {
    check_consistency(acts, mask, cfg, d_out)?;
    let d_ctx = split_heads(&d_out.matmul(&weights.wod.transpose()?)?, cfg.n_heads)?;
    let heads: Vec<HeadGrads> = (0..cfg.n_heads)
        .into_par_iter()
        .map(|h| head_grads_sparse(acts, mask, &d_ctx, h))
        .collect();
    finish(acts, weights, cfg, d_out, heads)
}

fn finish<S: Scalar>(
    acts: &AttentionActivations<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    d_out: &Tensor<S>,
    mut heads: Vec<HeadGrads>,
) -> Result<GradBundle<S>> {
    let (nh, nq, d) = three_d(&acts.q, "backward")?;
    let nk = acts.k.shape()[1];

    let mut d_delta = vec![0.0f64; nh * d];
    let mut d_gate = vec![0.0f64; nh];
    if cfg.mask == MaskKind::Dynamic {
        let logits = delta_logits(&acts.v, weights);
        for (h, g) in heads.iter_mut().enumerate() {
            let gate = weights.gate.data()[h].to_f64();
            let sample = &weights.delta.data()[h * d..(h + 1) * d];
            for j in 0..nk {
                let z = logits[h * nk + j];
                let dexp = g.ddelta[j] * acts.delta.data()[h * nk + j].to_f64();
                d_gate[h] += dexp * softplus(z);
                let dz = dexp * gate * sigmoid(z);
                let vj = &acts.v.data()[(h * nk + j) * d..(h * nk + j + 1) * d];
                for x in 0..d {
                    d_delta[h * d + x] += dz * vj[x].to_f64();
                    g.dv[j * d + x] += dz * sample[x].to_f64();
                }
            }
        }
    }

    let collect = |f: &dyn Fn(&HeadGrads) -> &Vec<f64>, shape: [usize; 3]| -> Result<Tensor<S>> {
        let data = heads.iter().flat_map(|g| f(g).iter().map(|&x| S::from_f64(x))).collect();
        Ok(Tensor::new(shape, data)?)
    };
    let d_q = collect(&|g| &g.dq, [nh, nq, d])?;
    let d_k = collect(&|g| &g.dk, [nh, nk, d])?;
    let d_v = collect(&|g| &g.dv, [nh, nk, d])?;
    let d_dynamic = collect(&|g| &g.ddelta, [nh, 1, nk])?.reshape([nh, nk])?;

    let mut dq_pre = d_q.clone();
    let mut dk_pre = d_k.clone();
    if cfg.use_rope {
        apply_rope(&mut dq_pre, nk - nq, cfg.rope_base, true);
        apply_rope(&mut dk_pre, 0, cfg.rope_base, true);
    }
    let dq_flat = merge_heads(&dq_pre)?;
    let dk_flat = merge_heads(&dk_pre)?;
    let dv_flat = merge_heads(&d_v)?;
    let input_t = acts.input.transpose()?;
    let d_wq = input_t.matmul(&dq_flat)?;
    let d_wk = input_t.matmul(&dk_flat)?;
    let d_wv = input_t.matmul(&dv_flat)?;
    let d_wod = merge_heads(&acts.context)?.transpose()?.matmul(d_out)?;
    let d_input = dq_flat
        .matmul(&weights.wq.transpose()?)?
        .add(&dk_flat.matmul(&weights.wk.transpose()?)?)?
        .add(&dv_flat.matmul(&weights.wv.transpose()?)?)?;

    Ok(GradBundle {
        d_wq,
        d_wk,
        d_wv,
        d_wod,
        d_delta: Tensor::new([nh, d], d_delta.into_iter().map(S::from_f64).collect())?,
        d_gate: Tensor::new([nh], d_gate.into_iter().map(S::from_f64).collect())?,
        d_input,
        d_q,
        d_k,
        d_v,
        d_dynamic,
    })
}

/// Result of comparing the skipping backward against the all-positions one.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipAudit {
    /// Max absolute difference per gradient tensor, in `GradBundle::named` order.
    pub max_abs_diff: Vec<(&'static str, f64)>,
    /// Masked `(h, i, j)` positions visited by the naive path.
    pub masked_positions: usize,
    /// Masked positions whose score gradient was not exactly zero.
    pub nonzero_masked_contributions: usize,
}

impl SkipAudit {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.iter().map(|(_, d)| *d).fold(0.0, f64::max)
    }

    pub fn is_exact(&self) -> bool {
        self.worst() == 0.0 && self.nonzero_masked_contributions == 0
    }
}

/// Backward over every position with the dense `-inf` mask.
pub fn backward_naive<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    d_out: &Tensor<S>,
) -> Result<(GradBundle<S>, usize, usize)> {
    check_consistency(acts, mask, cfg, d_out)?;
    let d_ctx = split_heads(&d_out.matmul(&weights.wod.transpose()?)?, cfg.n_heads)?;
    let probs = acts.probs_dense(mask);
    let bias = mask.dense_bias();
    let heads: Vec<HeadGrads> = (0..cfg.n_heads)
        .map(|h| head_grads_naive(acts, mask, &probs, &bias, &d_ctx, h))
        .collect();
    let seen = heads.iter().map(|g| g.masked_seen).sum();
    let nonzero = heads.iter().map(|g| g.masked_nonzero).sum();
    Ok((finish(acts, weights, cfg, d_out, heads)?, seen, nonzero))
}

/// Runs both backward paths and reports how far apart they are.
pub fn grad_skip_audit<S: Scalar>(
    acts: &AttentionActivations<S>,
    mask: &DynamicMask<S>,
    weights: &DmaWeights<S>,
    cfg: &DmaConfig,
    d_out: &Tensor<S>,
) -> Result<SkipAudit> {
    let fast = backward(acts, mask, weights, cfg, d_out)?;
    let (naive, seen, nonzero) = backward_naive(acts, mask, weights, cfg, d_out)?;
    let max_abs_diff = fast
        .named()
        .into_iter()
        .zip(naive.named())
        .map(|((name, a), (_, b))| (name, a.max_abs_diff(b)))
        .collect();
    Ok(SkipAudit { max_abs_diff, masked_positions: seen, nonzero_masked_contributions: nonzero })
}
