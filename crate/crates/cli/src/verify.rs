//! Correctness suites comparing the kernels against the reference
//! implementations in `dma_core::oracle`.
//!
//! Every case draws its own seed from the run seed, so a failure can be
//! replayed in isolation. Reports carry no timings and no thread counts.

use dma_core::attention::{attention_with_options, KernelOptions};
use dma_core::grad::{backward, grad_skip_audit};
use dma_core::mask::build_mask;
use dma_core::oracle::{brute_force_topw, dense_forward, finite_diff_grad, flatten_weights, unflatten_weights};
use dma_core::{decode_step, forward, DType, DmaConfig, DmaWeights, KvCache, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Result;

pub const SUITES: [&str; 6] =
    ["forward_equivalence", "gradient", "skip_safety", "mask_invariants", "bias_invariance", "decode"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub forward_cases: usize,
    pub max_t: usize,
    pub grad_cases: usize,
    pub skip_cases: usize,
    pub mask_rows: usize,
    pub bias_cases: usize,
    pub decode_cases: usize,
    pub decode_steps: usize,
    pub forward_tol_f64: f64,
    pub forward_tol_f32: f64,
    pub grad_tol: f64,
    pub bias_tol: f64,
    pub decode_tol: f64,
    /// Flip one mask entry before checking invariants.
    pub inject_fault: bool,
    /// Run only these suites; all when empty.
    pub suites: Vec<String>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            forward_cases: 100,
            max_t: 256,
            grad_cases: 20,
            skip_cases: 20,
            mask_rows: 1000,
            bias_cases: 10,
            decode_cases: 4,
            decode_steps: 16,
            forward_tol_f64: 1e-10,
            forward_tol_f32: 1e-4,
            grad_tol: 1e-5,
            bias_tol: 1e-6,
            decode_tol: 1e-10,
            inject_fault: false,
            suites: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub case: usize,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    pub dtype: DType,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub command: String,
    pub seed: u64,
    pub dtype: DType,
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

struct Suite {
    report: SuiteReport,
}

impl Suite {
    fn new(name: &str, dtype: DType, tolerance: f64) -> Self {
        Self {
            report: SuiteReport {
                name: name.to_string(),
                passed: true,
                dtype,
                cases: 0,
                max_error: 0.0,
                tolerance,
                failures: Vec::new(),
            },
        }
    }

    /// Records one case's error; errors above tolerance (or NaN) fail it.
    fn observe(&mut self, case: usize, seed: u64, err: f64, what: impl FnOnce() -> String) {
        if err > self.report.max_error || err.is_nan() {
            self.report.max_error = err;
        }
        if !(err <= self.report.tolerance) {
            self.fail(case, seed, format!("{}: error {err:e} exceeds {:e}", what(), self.report.tolerance));
        }
    }

    fn fail(&mut self, case: usize, seed: u64, detail: String) {
        self.report.passed = false;
        self.report.failures.push(Failure { case, seed, detail });
    }

    fn finish(mut self, cases: usize) -> SuiteReport {
        self.report.cases = cases;
        self.report
    }
}

fn case_seeds(seed: u64, suite: usize, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(suite as u64 + 1);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// A random layer and input.
pub struct Instance {
    pub cfg: DmaConfig,
    pub weights: DmaWeights,
    pub h: Tensor,
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    t: usize,
    n_heads: usize,
    head_dim: usize,
    window: usize,
) -> Instance {
    let rope = head_dim.is_multiple_of(2) && rng.random_bool(0.5);
    let block = [4, 8, 16, 32][rng.random_range(0..4)];
    let mut cfg = DmaConfig::new(n_heads, head_dim, window).with_blocks(block, block);
    if rope {
        cfg = cfg.with_rope(10_000.0);
    }
    let weights = DmaWeights::random(&cfg, rng);
    let h = Tensor::from_fn([t, cfg.d_model], |_| rng.random_range(-1.0..1.0));
    Instance { cfg, weights, h }
}

fn window_choice(rng: &mut ChaCha8Rng, t: usize) -> usize {
    [1, 4, (t / 4).max(1), t][rng.random_range(0..4)]
}

fn err_text(e: impl std::fmt::Display) -> String {
    format!("error: {e}")
}

fn forward_suite(cfg: &VerifyConfig, seed: u64, dtype: DType) -> SuiteReport {
    let tol = if dtype == DType::F32 { cfg.forward_tol_f32 } else { cfg.forward_tol_f64 };
    let mut suite = Suite::new("forward_equivalence", dtype, tol);
    for (case, &s) in case_seeds(seed, 0, cfg.forward_cases).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = rng.random_range(1..=cfg.max_t.max(1));
        let (nh, dh) = (rng.random_range(1..=4), rng.random_range(1..=32));
        let w = window_choice(&mut rng, t);
        let inst = random_instance(&mut rng, t, nh, dh, w);
        let run = || -> dma_core::Result<f64> {
            let reference = dense_forward(&inst.h, &inst.weights, &inst.cfg)?;
            let out = match dtype {
                DType::F64 => forward(&inst.h, &inst.weights, &inst.cfg)?.0.output,
                DType::F32 => forward(&inst.h.cast::<f32>(), &inst.weights.cast::<f32>(), &inst.cfg)?
                    .0
                    .output
                    .cast::<f64>(),
            };
            Ok(out.max_abs_diff(&reference))
        };
        match run() {
            Ok(err) => suite.observe(case, s, err, || format!("t={t} n_h={nh} d_h={dh} w={w}")),
            Err(e) => suite.fail(case, s, err_text(e)),
        }
    }
    suite.finish(cfg.forward_cases)
}

/// Normwise relative error `max|a - b| / max|b|`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_suite(cfg: &VerifyConfig, seed: u64) -> SuiteReport {
    let mut suite = Suite::new("gradient", DType::F64, cfg.grad_tol);
    for (case, &s) in case_seeds(seed, 1, cfg.grad_cases).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = rng.random_range(2..=16);
        let nh = rng.random_range(1..=3);
        let dh = 2 * rng.random_range(1..=4);
        let w = rng.random_range(1..=t);
        let inst = random_instance(&mut rng, t, nh, dh, w);
        let c = Tensor::from_fn([t, inst.cfg.d_model], |_| rng.random_range(-1.0..1.0));
        match gradient_errors(&inst, &c) {
            Ok(errs) => {
                for (name, e) in errs {
                    suite.observe(case, s, e, || format!("d_{name} (t={t} n_h={nh} d_h={dh} w={w})"));
                }
            }
            Err(e) => suite.fail(case, s, err_text(e)),
        }
    }
    suite.finish(cfg.grad_cases)
}

/// Relative error of every parameter gradient and of the input gradient
/// against central differences of `sum(c * dense_forward)`.
pub fn gradient_errors(inst: &Instance, c: &Tensor) -> dma_core::Result<Vec<(&'static str, f64)>> {
    let Instance { cfg, weights, h } = inst;
    let loss = |w: &DmaWeights, h: &Tensor| -> dma_core::Result<f64> {
        let out = dense_forward(h, w, cfg)?;
        Ok(out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum())
    };
    let (acts, mask) = forward(h, weights, cfg)?;
    let g = backward(&acts, &mask, weights, cfg, c)?;

    let fd_w = finite_diff_grad(|p| loss(&unflatten_weights(cfg, p), h), &flatten_weights(weights), Default::default())?;
    let fd_h = finite_diff_grad(
        |p| loss(weights, &Tensor::new(h.shape().to_vec(), p.to_vec())?),
        h.data(),
        Default::default(),
    )?;
    let mut out = Vec::new();
    let mut at = 0;
    for (name, t) in dma_core::config::WEIGHT_NAMES.iter().zip(g.weight_grads()) {
        out.push((*name, rel_err(t.data(), &fd_w[at..at + t.len()])));
        at += t.len();
    }
    out.push(("input", rel_err(g.d_input.data(), &fd_h)));
    Ok(out)
}

fn skip_suite(cfg: &VerifyConfig, seed: u64) -> SuiteReport {
    let mut suite = Suite::new("skip_safety", DType::F64, 0.0);
    for (case, &s) in case_seeds(seed, 2, cfg.skip_cases).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = rng.random_range(4..=48);
        let nh = rng.random_range(1..=3);
        let dh = 2 * rng.random_range(1..=4);
        let w = rng.random_range(1..=t / 2);
        let inst = random_instance(&mut rng, t, nh, dh, w);
        let d_out = Tensor::from_fn([t, inst.cfg.d_model], |_| rng.random_range(-1.0..1.0));
        match skip_checks(&inst, &d_out) {
            Ok(checks) => {
                for (what, err) in checks {
                    suite.observe(case, s, err, || what.to_string());
                }
            }
            Err(e) => suite.fail(case, s, err_text(e)),
        }
    }
    suite.finish(cfg.skip_cases)
}

/// Each entry is a quantity that must be exactly zero.
pub fn skip_checks(inst: &Instance, d_out: &Tensor) -> dma_core::Result<Vec<(&'static str, f64)>> {
    let Instance { cfg, weights, h } = inst;
    let (acts, mask) = forward(h, weights, cfg)?;
    let (nh, t) = (cfg.n_heads, h.shape()[0]);

    // Softmax over the full row with -inf at masked cells.
    let probs = acts.scores_dense(&mask).softmax_rows_3d()?;
    let mut masked_prob = 0.0f64;
    for hh in 0..nh {
        for i in 0..t {
            for j in 0..t {
                if !mask.is_kept(hh, i, j) {
                    masked_prob = masked_prob.max(probs.at(&[hh, i, j]).abs());
                }
            }
        }
    }

    let audit = grad_skip_audit(&acts, &mask, weights, cfg, d_out)?;
    let g = backward(&acts, &mask, weights, cfg, d_out)?;
    let mut unkept_grad = 0.0f64;
    for hh in 0..nh {
        for j in 0..t {
            if (0..t).any(|i| mask.is_kept(hh, i, j)) {
                continue;
            }
            unkept_grad = unkept_grad.max(g.d_dynamic.at(&[hh, j]).abs());
            for x in 0..cfg.head_dim {
                unkept_grad = unkept_grad
                    .max(g.d_k.at(&[hh, j, x]).abs())
                    .max(g.d_v.at(&[hh, j, x]).abs());
            }
        }
    }
    Ok(vec![
        ("masked probability", masked_prob),
        ("skip vs all-positions backward", audit.worst()),
        ("nonzero masked score gradients", audit.nonzero_masked_contributions as f64),
        ("gradient reaching never-kept keys", unkept_grad),
    ])
}

trait SoftmaxLast {
    fn softmax_rows_3d(&self) -> dma_core::Result<Tensor>;
}

impl SoftmaxLast for Tensor {
    fn softmax_rows_3d(&self) -> dma_core::Result<Tensor> {
        let shape = self.shape().to_vec();
        let cols = shape[shape.len() - 1];
        let flat = self.clone().reshape([self.len() / cols, cols])?;
        Ok(flat.softmax_rows()?.reshape(shape)?)
    }
}

fn mask_suite(cfg: &VerifyConfig, seed: u64) -> SuiteReport {
    let mut suite = Suite::new("mask_invariants", DType::F64, 0.0);
    let mut rows = 0;
    let mut case = 0;
    let seeds = case_seeds(seed, 3, cfg.mask_rows.max(1));
    while rows < cfg.mask_rows {
        let s = seeds[case % seeds.len()] ^ case as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = rng.random_range(1..=64);
        let nh = rng.random_range(1..=4);
        let w = rng.random_range(1..=t + 2);
        let ties = rng.random_bool(0.5);
        let delta = Tensor::from_fn([nh, t], |_| {
            if ties {
                f64::from(rng.random_range(1..=3))
            } else {
                rng.random_range(0.5..4.0)
            }
        });
        let block = [1, 4, 16][rng.random_range(0..3)];
        let lcfg = DmaConfig::new(nh, 2, w).with_blocks(block, block);
        let mut mask = match build_mask(&delta, t, &lcfg) {
            Ok(m) => m,
            Err(e) => {
                suite.fail(case, s, err_text(e));
                case += 1;
                continue;
            }
        };
        if cfg.inject_fault && case == 0 {
            let j = mask.kept_keys(0, t - 1)[0] as usize;
            mask.toggle_entry(0, t - 1, j);
        }
        for v in mask.check_invariants(Some(w)) {
            suite.fail(case, s, v);
        }
        for hh in 0..nh {
            let row_delta: Vec<f64> = delta.row(hh).to_vec();
            for i in 0..t {
                if rows >= cfg.mask_rows {
                    break;
                }
                rows += 1;
                let kept: Vec<usize> = mask.kept_keys(hh, i).iter().map(|&j| j as usize).collect();
                let want = brute_force_topw(&row_delta, i + 1, w);
                if kept != want {
                    suite.fail(case, s, format!("mask.topw: head {hh} row {i} kept {kept:?}, expected {want:?}"));
                }
            }
        }
        case += 1;
    }
    // Ties resolve toward the smaller index.
    let flat = Tensor::full([1, 8], 1.0);
    let lcfg = DmaConfig::new(1, 2, 3);
    match build_mask(&flat, 8, &lcfg) {
        Ok(m) if m.kept_keys(0, 7) == [0, 1, 2] => {}
        Ok(m) => suite.fail(case, 0, format!("mask.ties: kept {:?}, expected [0, 1, 2]", m.kept_keys(0, 7))),
        Err(e) => suite.fail(case, 0, err_text(e)),
    }
    suite.finish(rows)
}

fn bias_suite(cfg: &VerifyConfig, seed: u64) -> SuiteReport {
    let mut suite = Suite::new("bias_invariance", DType::F64, cfg.bias_tol);
    for (case, &s) in case_seeds(seed, 4, cfg.bias_cases).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let t = rng.random_range(1..=64);
        let nh = rng.random_range(1..=4);
        let dh = 2 * rng.random_range(1..=8);
        let w = t + rng.random_range(0..4);
        let inst = random_instance(&mut rng, t, nh, dh, w);
        let shift = [-3.0, 0.5, 10.0, 100.0][case % 4];
        match bias_shift_error(&inst, shift) {
            Ok(err) => suite.observe(case, s, err, || format!("shift {shift}")),
            Err(e) => suite.fail(case, s, err_text(e)),
        }
    }
    suite.finish(cfg.bias_cases)
}

/// Output change when every dynamic weight is shifted by `shift`.
pub fn bias_shift_error(inst: &Instance, shift: f64) -> dma_core::Result<f64> {
    let Instance { cfg, weights, h } = inst;
    let (q, k, v) = dma_core::project_qkv(h, weights, cfg)?;
    let delta = dma_core::dynamic_delta(&v, weights, cfg)?;
    let t = h.shape()[0];
    let base = build_mask(&delta, t, cfg)?;
    let shifted = build_mask(&delta.map(dma_core::tensor::Elementwise::AddScalar(shift)), t, cfg)?;
    let opts = KernelOptions::default();
    let (_, a) = attention_with_options(&q, &k, &v, &base, weights, cfg, opts)?;
    let (_, b) = attention_with_options(&q, &k, &v, &shifted, weights, cfg, opts)?;
    Ok(a.max_abs_diff(&b))
}

fn decode_suite(cfg: &VerifyConfig, seed: u64) -> SuiteReport {
    let mut suite = Suite::new("decode", DType::F64, cfg.decode_tol);
    for (case, &s) in case_seeds(seed, 5, cfg.decode_cases).iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let prefix = rng.random_range(0..=48);
        let t = prefix + cfg.decode_steps;
        let nh = rng.random_range(1..=4);
        let dh = 2 * rng.random_range(1..=8);
        let w = [1, 4, 8, t][case % 4];
        let mut inst = random_instance(&mut rng, t, nh, dh, w);
        if case % 2 == 0 {
            inst.cfg = inst.cfg.clone().with_rope(10_000.0);
        }
        match decode_error(&inst, cfg.decode_steps) {
            Ok(err) => suite.observe(case, s, err, || format!("prefix {prefix}, w={w}")),
            Err(e) => suite.fail(case, s, err_text(e)),
        }
    }
    suite.finish(cfg.decode_cases)
}

/// Feeds every token through `decode_step` and compares the last `steps`
/// outputs with one batch forward.
pub fn decode_error(inst: &Instance, steps: usize) -> dma_core::Result<f64> {
    let Instance { cfg, weights, h } = inst;
    let t = h.shape()[0];
    let batch = forward(h, weights, cfg)?.0.output;
    let mut cache = KvCache::empty(cfg);
    let mut worst = 0.0f64;
    for i in 0..t {
        let token = Tensor::new([1, cfg.d_model], h.row(i).to_vec())?;
        let step = decode_step(cache, &token, weights, cfg)?;
        if i + steps >= t {
            for (a, b) in step.output.data().iter().zip(batch.row(i)) {
                worst = worst.max((a - b).abs());
            }
        }
        cache = step.cache;
    }
    Ok(worst)
}

fn wanted(cfg: &VerifyConfig, name: &str) -> bool {
    cfg.suites.is_empty() || cfg.suites.iter().any(|s| s == name)
}

/// Runs the selected suites. `dtype` applies to the forward suite; the
/// remaining suites are `f64` by construction.
pub fn run_verify(cfg: &VerifyConfig, seed: u64, dtype: DType) -> Result<VerifyReport> {
    for s in &cfg.suites {
        if !SUITES.contains(&s.as_str()) {
            return Err(crate::CliError::Usage(format!("unknown suite {s:?}; known: {SUITES:?}")));
        }
    }
    let mut suites = Vec::new();
    if wanted(cfg, "forward_equivalence") {
        suites.push(forward_suite(cfg, seed, dtype));
    }
    if wanted(cfg, "gradient") {
        suites.push(gradient_suite(cfg, seed));
    }
    if wanted(cfg, "skip_safety") {
        suites.push(skip_suite(cfg, seed));
    }
    if wanted(cfg, "mask_invariants") {
        suites.push(mask_suite(cfg, seed));
    }
    if wanted(cfg, "bias_invariance") {
        suites.push(bias_suite(cfg, seed));
    }
    if wanted(cfg, "decode") {
        suites.push(decode_suite(cfg, seed));
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport { command: "verify".into(), seed, dtype, passed, suites })
}
