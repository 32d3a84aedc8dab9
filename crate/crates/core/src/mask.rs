//! Per-head sparse masks.
//!
//! A [`DynamicMask`] records, for every `(head, query row)`, the ascending
//! list of key indices the row may attend to, plus one bias value per
//! `(head, key)` that is added to the score at kept positions. Every other
//! position carries `-inf`. Rows are bottom-right aligned: with `n_q` queries
//! over `n_k` keys, local row `i` sits at absolute position `n_k - n_q + i`
//! and sees keys `j <= n_k - n_q + i`.
//!
//! The block map marks `block_q x block_k` tiles containing at least one kept
//! entry. The attention kernel never touches a tile whose flag is false.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::config::{DmaConfig, MaskKind};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask<S = f64> {
    n_heads: usize,
    n_q: usize,
    n_k: usize,
    block_q: usize,
    block_k: usize,
    key_bias: Vec<S>,
    row_ptr: Vec<usize>,
    keys: Vec<u32>,
    block_map: Vec<bool>,
}

/// Ordering used by top-w selection: larger weight ranks higher, and on equal
/// weights the smaller key index ranks higher.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    weight: f64,
    key: u32,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight.total_cmp(&other.weight).then_with(|| other.key.cmp(&self.key))
    }
}

/// Builds the top-`window` dynamic mask from per-key weights `delta`
/// (`[n_heads x n_k]`) for the last `n_q` query rows.
pub fn build_mask<S: Scalar>(delta: &Tensor<S>, n_q: usize, cfg: &DmaConfig) -> Result<DynamicMask<S>> {
    let (n_heads, n_k) = match delta.shape() {
        &[h, t] => (h, t),
        other => return Err(shape_err("build_mask", format!("delta must be 2-D, got {other:?}"))),
    };
    if n_heads != cfg.n_heads {
        return Err(shape_err(
            "build_mask",
            format!("delta has {n_heads} heads, config has {}", cfg.n_heads),
        ));
    }
    if n_q > n_k {
        return Err(shape_err("build_mask", format!("n_q ({n_q}) exceeds key count ({n_k})")));
    }
    let offset = n_k - n_q;
    let window = cfg.window;
    let mut rows: Vec<Vec<u32>> = Vec::with_capacity(n_heads * n_q);
    for h in 0..n_heads {
        let weights = &delta.data()[h * n_k..(h + 1) * n_k];
        let mut ranked: BTreeSet<Ranked> = BTreeSet::new();
        let mut kept: BTreeSet<u32> = BTreeSet::new();
        let admit = |j: usize, ranked: &mut BTreeSet<Ranked>, kept: &mut BTreeSet<u32>| {
            let cand = Ranked { weight: weights[j].to_f64(), key: j as u32 };
            if ranked.len() < window {
                ranked.insert(cand);
                kept.insert(cand.key);
            } else {
                let worst = *ranked.first().expect("window >= 1");
                if cand > worst {
                    ranked.pop_first();
                    kept.remove(&worst.key);
                    ranked.insert(cand);
                    kept.insert(cand.key);
                }
            }
        };
        for j in 0..offset {
            admit(j, &mut ranked, &mut kept);
        }
        for i in 0..n_q {
            admit(offset + i, &mut ranked, &mut kept);
            rows.push(kept.iter().copied().collect());
        }
    }
    Ok(DynamicMask::from_rows(
        n_heads,
        n_q,
        n_k,
        cfg.block_q,
        cfg.block_k,
        delta.data().to_vec(),
        rows,
    ))
}

/// Builds the mask for `kind`. Static kinds ignore `delta` and use a zero bias.
pub fn mask_for_kind<S: Scalar>(
    kind: MaskKind,
    delta: &Tensor<S>,
    n_q: usize,
    cfg: &DmaConfig,
) -> Result<DynamicMask<S>> {
    let n_k = delta.shape().get(1).copied().unwrap_or(0);
    match kind {
        MaskKind::Dynamic => build_mask(delta, n_q, cfg),
        MaskKind::Causal => DynamicMask::static_window(cfg.n_heads, n_q, n_k, usize::MAX, cfg),
        MaskKind::SlidingWindow => DynamicMask::static_window(cfg.n_heads, n_q, n_k, cfg.window, cfg),
    }
}

impl<S: Scalar> DynamicMask<S> {
    /// Zero-bias mask where each row keeps its `window` most recent causal keys
    /// (`usize::MAX` gives plain causal masking).
    pub fn static_window(
        n_heads: usize,
        n_q: usize,
        n_k: usize,
        window: usize,
        cfg: &DmaConfig,
    ) -> Result<Self> {
        if n_q > n_k {
            return Err(shape_err("static_window", format!("n_q ({n_q}) exceeds n_k ({n_k})")));
        }
        let offset = n_k - n_q;
        let mut rows = Vec::with_capacity(n_heads * n_q);
        for _ in 0..n_heads {
            for i in 0..n_q {
                let pos = offset + i;
                let start = (pos + 1).saturating_sub(window);
                rows.push((start as u32..=pos as u32).collect());
            }
        }
        Ok(Self::from_rows(
            n_heads,
            n_q,
            n_k,
            cfg.block_q,
            cfg.block_k,
            vec![S::ZERO; n_heads * n_k],
            rows,
        ))
    }

    fn from_rows(
        n_heads: usize,
        n_q: usize,
        n_k: usize,
        block_q: usize,
        block_k: usize,
        key_bias: Vec<S>,
        rows: Vec<Vec<u32>>,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut keys = Vec::with_capacity(total);
        for r in &rows {
            keys.extend_from_slice(r);
            row_ptr.push(keys.len());
        }
        let mut mask = Self {
            n_heads,
            n_q,
            n_k,
            block_q,
            block_k,
            key_bias,
            row_ptr,
            keys,
            block_map: Vec::new(),
        };
        mask.rebuild_block_map();
        mask
    }

    fn rebuild_block_map(&mut self) {
        let (nqb, nkb) = (self.n_q_blocks(), self.n_k_blocks());
        let mut map = vec![false; self.n_heads * nqb * nkb];
        for h in 0..self.n_heads {
            for i in 0..self.n_q {
                let bi = i / self.block_q;
                for &j in self.kept_keys(h, i) {
                    map[(h * nqb + bi) * nkb + j as usize / self.block_k] = true;
                }
            }
        }
        self.block_map = map;
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    /// Absolute position of local query row 0.
    pub fn q_offset(&self) -> usize {
        self.n_k - self.n_q
    }

    pub fn block_q(&self) -> usize {
        self.block_q
    }

    pub fn block_k(&self) -> usize {
        self.block_k
    }

    pub fn n_q_blocks(&self) -> usize {
        self.n_q.div_ceil(self.block_q)
    }

    pub fn n_k_blocks(&self) -> usize {
        self.n_k.div_ceil(self.block_k)
    }

    /// Total number of stored (kept) entries.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }

    /// Position of row `(h, i)` inside the flat kept-entry arrays.
    pub fn row_range(&self, h: usize, i: usize) -> std::ops::Range<usize> {
        let r = h * self.n_q + i;
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    /// Ascending key indices kept for `(h, i)`.
    pub fn kept_keys(&self, h: usize, i: usize) -> &[u32] {
        &self.keys[self.row_range(h, i)]
    }

    pub fn active_count(&self, h: usize, i: usize) -> usize {
        self.row_range(h, i).len()
    }

    pub fn is_kept(&self, h: usize, i: usize, j: usize) -> bool {
        self.kept_keys(h, i).binary_search(&(j as u32)).is_ok()
    }

    /// Bias of every key of head `h`.
    pub fn head_bias(&self, h: usize) -> &[S] {
        &self.key_bias[h * self.n_k..(h + 1) * self.n_k]
    }

    /// Bias added to kept scores of key `j` in head `h`.
    pub fn key_bias(&self, h: usize, j: usize) -> S {
        self.key_bias[h * self.n_k + j]
    }

    /// Additive mask value at `(h, i, j)`: the key bias if kept, else `-inf`.
    pub fn bias(&self, h: usize, i: usize, j: usize) -> S {
        if self.is_kept(h, i, j) {
            self.key_bias(h, j)
        } else {
            S::NEG_INFINITY
        }
    }

    pub fn block_active(&self, h: usize, bi: usize, bj: usize) -> bool {
        self.block_map[(h * self.n_q_blocks() + bi) * self.n_k_blocks() + bj]
    }

    /// Fraction of tiles with no kept entry.
    pub fn skippable_fraction(&self) -> f64 {
        let inactive = self.block_map.iter().filter(|&&b| !b).count();
        inactive as f64 / self.block_map.len().max(1) as f64
    }

    /// Materializes `[n_heads x n_q x n_k]` with `-inf` at masked positions.
    pub fn dense_bias(&self) -> Tensor<S> {
        let mut out = Tensor::full([self.n_heads, self.n_q, self.n_k], S::NEG_INFINITY);
        let data = out.data_mut();
        for h in 0..self.n_heads {
            for i in 0..self.n_q {
                let base = (h * self.n_q + i) * self.n_k;
                for &j in self.kept_keys(h, i) {
                    data[base + j as usize] = self.key_bias(h, j as usize);
                }
            }
        }
        out
    }

    /// Flips a single mask entry (kept becomes masked and vice versa) and
    /// refreshes the block map. Exists so verification suites can prove they
    /// catch a corrupted mask.
    pub fn toggle_entry(&mut self, h: usize, i: usize, j: usize) {
        let mut rows: Vec<Vec<u32>> =
            (0..self.n_heads * self.n_q).map(|r| {
                self.keys[self.row_ptr[r]..self.row_ptr[r + 1]].to_vec()
            }).collect();
        let row = &mut rows[h * self.n_q + i];
        match row.binary_search(&(j as u32)) {
            Ok(pos) => {
                row.remove(pos);
            }
            Err(pos) => row.insert(pos, j as u32),
        }
        let rebuilt = Self::from_rows(
            self.n_heads,
            self.n_q,
            self.n_k,
            self.block_q,
            self.block_k,
            std::mem::take(&mut self.key_bias),
            rows,
        );
        *self = rebuilt;
    }

    /// Checks causality, per-row counts (when `window` is given) and block-map
    /// consistency. Returns one message per violated invariant.
    pub fn check_invariants(&self, window: Option<usize>) -> Vec<String> {
        let mut problems = Vec::new();
        let offset = self.q_offset();
        'rows: for h in 0..self.n_heads {
            for i in 0..self.n_q {
                let pos = offset + i;
                let kept = self.kept_keys(h, i);
                if kept.iter().any(|&j| j as usize > pos) {
                    problems.push(format!("mask.causal: head {h} row {i} keeps a future key"));
                    break 'rows;
                }
                if kept.windows(2).any(|w| w[0] >= w[1]) {
                    problems.push(format!("mask.sorted: head {h} row {i} keys not ascending"));
                    break 'rows;
                }
                let expect = window.map_or(pos + 1, |w| w.min(pos + 1));
                if kept.len() != expect {
                    problems.push(format!(
                        "mask.active_count: head {h} row {i} keeps {} keys, expected {expect}",
                        kept.len()
                    ));
                    break 'rows;
                }
            }
        }
        let mut fresh = self.clone();
        fresh.rebuild_block_map();
        if fresh.block_map != self.block_map {
            problems.push("mask.block_map: block map disagrees with kept entries".into());
        }
        problems
    }
}
