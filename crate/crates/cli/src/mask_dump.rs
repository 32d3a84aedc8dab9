//! Per-head mask matrices for external heatmap plotting.
//!
//! For every layer and head two CSV files are written, one with the bias
//! (dynamic weight) and one with the attention probability at each kept
//! cell. Masked cells are empty fields.

use std::collections::BTreeSet;
use std::path::Path;

use dma_core::mqar::{generate_mqar, load_checkpoint, ModelConfig, MqarSpec, TinyModel};
use dma_core::{DynamicMask, MaskKind};
use serde::{Deserialize, Serialize};

use crate::output::{write_csv_file, write_json};
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMask {
    pub layer: usize,
    pub head: usize,
    /// Kept keys of every query row.
    pub kept: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// Number of distinct kept-key sets among this layer's heads.
    pub distinct_head_masks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskDumpReport {
    pub command: String,
    pub source: String,
    pub tokens: Vec<u32>,
    pub window: usize,
    pub layers: Vec<LayerSummary>,
    pub heads: Vec<HeadMask>,
    /// True when some layer has at least two heads with different kept sets.
    pub heads_differ: bool,
    pub files: Vec<String>,
}

/// The probe: the first test sequence of an MQAR set matching the vocabulary.
pub fn default_probe(vocab_size: usize, seq_len: usize, seed: u64) -> Result<Vec<u32>> {
    let spec = MqarSpec { vocab_size, seq_len, num_train: 0, num_test: 1, ..MqarSpec::small(seed) };
    Ok(generate_mqar(&spec)?.test.remove(0).tokens)
}

pub fn parse_tokens(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| CliError::Usage(format!("bad token {t:?}: {e}"))))
        .collect()
}

fn matrix(mask: &DynamicMask, h: usize, value: impl Fn(usize, usize, usize) -> f64) -> Vec<Vec<Option<String>>> {
    (0..mask.n_q())
        .map(|i| {
            let mut row = vec![Some(i.to_string())];
            row.extend((0..mask.n_k()).map(|j| mask.is_kept(h, i, j).then(|| format!("{}", value(h, i, j)))));
            row
        })
        .collect()
}

/// Loads `checkpoint` (or builds a random model from `config`) and dumps the
/// masks it produces on `tokens`.
pub fn run_mask_dump(
    checkpoint: Option<&Path>,
    config: Option<ModelConfig>,
    tokens: Option<Vec<u32>>,
    seed: u64,
    out: &Path,
) -> Result<MaskDumpReport> {
    let (model, source) = match checkpoint {
        Some(p) => {
            let (model, header) = load_checkpoint(p)?;
            (model, format!("checkpoint:seed={}", header.seed))
        }
        None => {
            let cfg = config.unwrap_or_else(|| ModelConfig::small(64, MaskKind::Dynamic));
            (TinyModel::new(cfg, seed)?, format!("random:{seed}"))
        }
    };
    let tokens = match tokens {
        Some(t) => t,
        None => default_probe(model.config.vocab_size, 64, seed)?,
    };
    let layers = model.masks(&tokens)?;

    let mut heads = Vec::new();
    let mut summaries = Vec::new();
    let mut files = Vec::new();
    for (l, (acts, mask)) in layers.iter().enumerate() {
        let probs = acts.probs_dense(mask);
        let mut sets = BTreeSet::new();
        for h in 0..mask.n_heads() {
            let kept: Vec<Vec<u32>> = (0..mask.n_q()).map(|i| mask.kept_keys(h, i).to_vec()).collect();
            sets.insert(kept.clone());
            let header: Vec<String> =
                std::iter::once("row".to_string()).chain((0..mask.n_k()).map(|j| format!("k{j}"))).collect();
            for (kind, rows) in [
                ("bias", matrix(mask, h, |h, _, j| mask.key_bias(h, j))),
                ("probs", matrix(mask, h, |h, i, j| probs.at(&[h, i, j]))),
            ] {
                let name = format!("layer{l}_head{h}_{kind}.csv");
                write_csv_file(&out.join(&name), &header, &rows)?;
                files.push(name);
            }
            heads.push(HeadMask { layer: l, head: h, kept });
        }
        summaries.push(LayerSummary { layer: l, distinct_head_masks: sets.len() });
    }
    let report = MaskDumpReport {
        command: "mask-dump".into(),
        source,
        tokens,
        window: model.config.window,
        heads_differ: summaries.iter().any(|s| s.distinct_head_masks >= 2),
        layers: summaries,
        heads,
        files,
    };
    write_json(&out.join("mask_dump.json"), &report)?;
    Ok(report)
}
