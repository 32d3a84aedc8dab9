//! Naive reference implementations.
//!
//! Nothing in here calls into the attention kernel or the mask builder.
//! [`dense_forward`] materializes the full `n_heads x t x t` score tensor and
//! masks afterwards; [`scalar_loop_forward`] does the same arithmetic with
//! plain nested loops and no tensor ops at all. Both run in `f64` and are
//! single-threaded.

use crate::config::{DmaConfig, DmaWeights, MaskKind};
use crate::error::{DmaError, Result};
use crate::tensor::{Scalar, Tensor};

/// Central-difference settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDiffSpec {
    pub step: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        Self { step: 1e-6 }
    }
}

/// `(L(x + h e_i) - L(x - h e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], spec: FiniteDiffSpec) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(spec.step > 0.0) {
        return Err(DmaError::Config(format!("finite-difference step must be > 0, got {}", spec.step)));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + spec.step;
        let up = loss(&x)?;
        x[i] = orig - spec.step;
        let down = loss(&x)?;
        x[i] = orig;
        if !up.is_finite() {
            return Err(DmaError::NonFiniteLoss(up));
        }
        if !down.is_finite() {
            return Err(DmaError::NonFiniteLoss(down));
        }
        grad.push((up - down) / (2.0 * spec.step));
    }
    Ok(grad)
}

/// Indices of the `w` largest entries of `delta_row[..causal_len]`, ties to
/// the smaller index, returned in ascending order. Sorts the whole prefix.
pub fn brute_force_topw(delta_row: &[f64], causal_len: usize, w: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..causal_len).collect();
    idx.sort_by(|&a, &b| delta_row[b].total_cmp(&delta_row[a]).then(a.cmp(&b)));
    idx.truncate(w);
    idx.sort_unstable();
    idx
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn kept_set(kind: MaskKind, delta_row: &[f64], pos: usize, window: usize) -> Vec<usize> {
    match kind {
        MaskKind::Dynamic => brute_force_topw(delta_row, pos + 1, window),
        MaskKind::Causal => (0..=pos).collect(),
        MaskKind::SlidingWindow => ((pos + 1).saturating_sub(window)..=pos).collect(),
    }
}

fn rotate(vec: &mut [f64], pos: usize, base: f64) {
    let d = vec.len();
    let half = d / 2;
    for i in 0..half {
        let theta = pos as f64 / base.powf((2 * i) as f64 / d as f64);
        let (a, b) = (vec[i], vec[i + half]);
        vec[i] = a * theta.cos() - b * theta.sin();
        vec[i + half] = a * theta.sin() + b * theta.cos();
    }
}

/// Dense additive mask `[n_heads x t x t]` built from brute-force top-w.
pub fn dense_mask(delta: &[Vec<f64>], cfg: &DmaConfig) -> Tensor<f64> {
    let n_heads = delta.len();
    let t = delta.first().map_or(0, Vec::len);
    let mut mask = Tensor::full([n_heads, t, t], f64::NEG_INFINITY);
    for (h, row) in delta.iter().enumerate() {
        for i in 0..t {
            for j in kept_set(cfg.mask, row, i, cfg.window) {
                let bias = if cfg.mask.uses_dynamic_weights() { row[j] } else { 0.0 };
                mask.set(&[h, i, j], bias);
            }
        }
    }
    mask
}

/// Per-head `q, k, v` as `[n_heads][t][d]`, plus dynamic weights `[n_heads][t]`.
#[allow(clippy::type_complexity)]
fn heads_and_delta(
    h: &Tensor<f64>,
    weights: &DmaWeights<f64>,
    cfg: &DmaConfig,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    weights.check(cfg)?;
    let t = h.shape()[0];
    let d = cfg.head_dim;
    let split = |x: Tensor<f64>, rope: bool| -> Vec<Vec<Vec<f64>>> {
        (0..cfg.n_heads)
            .map(|hh| {
                (0..t)
                    .map(|s| {
                        let mut v = x.row(s)[hh * d..(hh + 1) * d].to_vec();
                        if rope && cfg.use_rope {
                            rotate(&mut v, s, cfg.rope_base);
                        }
                        v
                    })
                    .collect()
            })
            .collect()
    };
    let q = split(h.matmul(&weights.wq)?, true);
    let k = split(h.matmul(&weights.wk)?, true);
    let v = split(h.matmul(&weights.wv)?, false);
    let delta = if cfg.mask.uses_dynamic_weights() {
        let mut out = Vec::with_capacity(cfg.n_heads);
        for hh in 0..cfg.n_heads {
            let sample = weights.delta.row(hh);
            let gate = weights.gate.data()[hh];
            let mut row = Vec::with_capacity(t);
            for j in 0..t {
                let z: f64 = v[hh][j].iter().zip(sample).map(|(a, b)| a * b).sum();
                let e = gate * softplus(z);
                if e > 700.0 {
                    return Err(DmaError::ParameterOverflow { head: hh, key: j, exponent: e });
                }
                row.push(e.exp());
            }
            out.push(row);
        }
        out
    } else {
        vec![vec![0.0; t]; cfg.n_heads]
    };
    Ok((q, k, v, delta))
}

/// Full-matrix reference forward: every score is computed, then the mask is
/// added, then softmax. Returns `[t x d_model]`.
pub fn dense_forward(h: &Tensor<f64>, weights: &DmaWeights<f64>, cfg: &DmaConfig) -> Result<Tensor<f64>> {
    let (q, k, v, delta) = heads_and_delta(h, weights, cfg)?;
    let mask = dense_mask(&delta, cfg);
    dense_attention(&q, &k, &v, &mask, weights)
}

/// Reference attention for an explicit dense additive mask.
pub fn dense_attention(
    q: &[Vec<Vec<f64>>],
    k: &[Vec<Vec<f64>>],
    v: &[Vec<Vec<f64>>],
    mask: &Tensor<f64>,
    weights: &DmaWeights<f64>,
) -> Result<Tensor<f64>> {
    let n_heads = q.len();
    let n_q = q[0].len();
    let d = q[0][0].len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut concat = Tensor::<f64>::zeros([n_q, n_heads * d]);
    for hh in 0..n_heads {
        let qm = Tensor::from_rows(&q[hh])?;
        let km = Tensor::from_rows(&k[hh])?;
        let vm = Tensor::from_rows(&v[hh])?;
        let n_k = km.shape()[0];
        let scores = qm.matmul(&km.transpose()?)?;
        let masked = Tensor::from_fn([n_q, n_k], |idx| {
            scores.data()[idx] * scale + mask.data()[hh * n_q * n_k + idx]
        });
        let probs = masked.softmax_rows()?;
        let ctx = probs.matmul(&vm)?;
        for i in 0..n_q {
            for c in 0..d {
                concat.set(&[i, hh * d + c], ctx.at(&[i, c]));
            }
        }
    }
    Ok(concat.matmul(&weights.wod)?)
}

/// Element-wise reference: no tensor ops, no masks materialized.
pub fn scalar_loop_forward(
    h: &Tensor<f64>,
    weights: &DmaWeights<f64>,
    cfg: &DmaConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let t = h.shape()[0];
    let (nh, d, dm) = (cfg.n_heads, cfg.head_dim, cfg.d_model);
    let x = |s: usize, c: usize| h.data()[s * dm + c];
    let proj = |w: &Tensor<f64>, s: usize, col: usize| {
        let mut acc = 0.0;
        for c in 0..dm {
            acc += x(s, c) * w.data()[c * nh * d + col];
        }
        acc
    };
    let head_vec = |w: &Tensor<f64>, hh: usize, s: usize, rope: bool| {
        let mut out: Vec<f64> = (0..d).map(|c| proj(w, s, hh * d + c)).collect();
        if rope && cfg.use_rope {
            rotate(&mut out, s, cfg.rope_base);
        }
        out
    };
    let mut concat = vec![vec![0.0; nh * d]; t];
    for hh in 0..nh {
        let qs: Vec<Vec<f64>> = (0..t).map(|s| head_vec(&weights.wq, hh, s, true)).collect();
        let ks: Vec<Vec<f64>> = (0..t).map(|s| head_vec(&weights.wk, hh, s, true)).collect();
        let vs: Vec<Vec<f64>> = (0..t).map(|s| head_vec(&weights.wv, hh, s, false)).collect();
        let delta: Vec<f64> = (0..t)
            .map(|j| {
                if !cfg.mask.uses_dynamic_weights() {
                    return 0.0;
                }
                let mut z = 0.0;
                for c in 0..d {
                    z += vs[j][c] * weights.delta.data()[hh * d + c];
                }
                (weights.gate.data()[hh] * softplus(z)).exp()
            })
            .collect();
        for i in 0..t {
            let kept = kept_set(cfg.mask, &delta, i, cfg.window);
            let mut scores = Vec::with_capacity(kept.len());
            for &j in &kept {
                let mut s = 0.0;
                for c in 0..d {
                    s += qs[i][c] * ks[j][c];
                }
                scores.push(s / (d as f64).sqrt() + delta[j]);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&j, e) in kept.iter().zip(&exps) {
                for c in 0..d {
                    concat[i][hh * d + c] += e / z * vs[j][c];
                }
            }
        }
    }
    let mut out = vec![vec![0.0; dm]; t];
    for s in 0..t {
        for o in 0..dm {
            let mut acc = 0.0;
            for c in 0..nh * d {
                acc += concat[s][c] * weights.wod.data()[c * dm + o];
            }
            out[s][o] = acc;
        }
    }
    Ok(out)
}

/// Dynamic weights computed the reference way, `[n_heads][t]`.
pub fn reference_delta(h: &Tensor<f64>, weights: &DmaWeights<f64>, cfg: &DmaConfig) -> Result<Vec<Vec<f64>>> {
    Ok(heads_and_delta(h, weights, cfg)?.3)
}

/// Flattens layer weights in `WEIGHT_NAMES` order.
pub fn flatten_weights<S: Scalar>(w: &DmaWeights<S>) -> Vec<f64> {
    w.tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_f64())).collect()
}

/// Inverse of [`flatten_weights`].
pub fn unflatten_weights(cfg: &DmaConfig, flat: &[f64]) -> DmaWeights<f64> {
    let mut w = DmaWeights::zeros(cfg);
    let mut at = 0;
    for t in w.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len(), "flat parameter vector has the wrong length");
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn finite_diff_on_analytic_functions() {
        let x = [0.3, -1.2, 2.0];
        let g = finite_diff_grad(|p| Ok(p.iter().map(|v| v * v).sum()), &x, Default::default()).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        let g = finite_diff_grad(|_| Ok(4.2), &x, Default::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        let g = finite_diff_grad(|p| Ok(p[0].exp()), &[0.5], Default::default()).unwrap();
        assert!((g[0] - 0.5f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nan() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], FiniteDiffSpec { step: 0.0 }).is_err());
        assert!(matches!(
            finite_diff_grad(|_| Ok(f64::NAN), &[1.0], Default::default()),
            Err(DmaError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn topw_tie_rule_and_full_window() {
        assert_eq!(brute_force_topw(&[0.5, 0.5, 0.1], 3, 1), vec![0]);
        assert_eq!(brute_force_topw(&[0.1, 0.9, 0.5, 0.7], 4, 2), vec![1, 3]);
        assert_eq!(brute_force_topw(&[0.3, 0.2, 0.1], 3, 8), vec![0, 1, 2]);
        assert_eq!(brute_force_topw(&[0.3, 0.2, 0.9], 2, 8), vec![0, 1]);
    }

    #[test]
    fn dense_forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (t, w, rope) in [(1, 1, false), (5, 2, false), (7, 3, true), (6, 10, true)] {
            let cfg = DmaConfig::new(2, 4, w);
            let cfg = if rope { cfg.with_rope(10_000.0) } else { cfg };
            let weights = DmaWeights::<f64>::random(&cfg, &mut rng);
            let h = Tensor::from_fn([t, 8], |_| rng.random_range(-1.0..1.0));
            let dense = dense_forward(&h, &weights, &cfg).unwrap();
            let scalar = scalar_loop_forward(&h, &weights, &cfg).unwrap();
            for s in 0..t {
                for o in 0..8 {
                    assert!((dense.at(&[s, o]) - scalar[s][o]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_output_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DmaConfig::new(2, 3, 4);
        let w = DmaWeights::<f64>::random(&cfg, &mut rng);
        let h = Tensor::from_fn([1, 6], |_| rng.random_range(-1.0..1.0));
        let out = dense_forward(&h, &w, &cfg).unwrap();
        let want = h.matmul(&w.wv).unwrap().matmul(&w.wod).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn constant_weights_with_full_window_is_causal_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DmaConfig::new(2, 3, 16);
        let mut w = DmaWeights::<f64>::random(&cfg, &mut rng);
        w.gate = Tensor::zeros([2]);
        let h = Tensor::from_fn([9, 6], |_| rng.random_range(-1.0..1.0));
        let dma = dense_forward(&h, &w, &cfg).unwrap();
        let causal = dense_forward(&h, &w, &cfg.clone().with_mask(MaskKind::Causal)).unwrap();
        assert!(dma.max_abs_diff(&causal) < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = DmaConfig::new(2, 3, 4);
        let w = DmaWeights::<f64>::random(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(unflatten_weights(&cfg, &flatten_weights(&w)), w);
    }
}
