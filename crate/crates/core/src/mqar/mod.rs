//! Multi-query associative recall: data, a tiny language model around the
//! attention layer, and a small training loop.
//!
//! A sequence opens with `num_pairs` key/value bindings (`k1 v1 k2 v2 ...`),
//! followed by filler. Some of the keys reappear later as queries; the model
//! must emit the bound value at the query position.

mod checkpoint;
mod model;
mod train;

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmaError, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use model::{ModelConfig, TinyModel};
pub use train::{evaluate, train, EpochLog, EvalReport, OptimizerKind, TrainConfig, TrainLog};

/// Token id used for empty filler slots.
pub const PAD: u32 = 0;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarSpec {
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub seq_len: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Fill non key/value/query slots with random tokens instead of padding.
    #[serde(default)]
    pub noise_fill: bool,
    pub seed: u64,
    /// Queries per sequence; all pairs are queried when absent.
    #[serde(default)]
    pub num_queries: Option<usize>,
    /// Earliest position a query may occupy.
    #[serde(default)]
    pub min_query_pos: Option<usize>,
    /// Shuffle the order in which bindings are listed.
    #[serde(default = "default_true")]
    pub shuffle_pairs: bool,
}

impl MqarSpec {
    /// 8 pairs in 64 tokens over a 64-token vocabulary.
    pub fn small(seed: u64) -> Self {
        Self {
            vocab_size: 64,
            num_pairs: 8,
            seq_len: 64,
            num_train: 2048,
            num_test: 256,
            noise_fill: false,
            seed,
            num_queries: None,
            min_query_pos: None,
            shuffle_pairs: true,
        }
    }

    pub fn queries(&self) -> usize {
        self.num_queries.unwrap_or(self.num_pairs)
    }

    fn first_query_pos(&self) -> usize {
        self.min_query_pos.unwrap_or(0).max(2 * self.num_pairs)
    }

    /// How the vocabulary is carved up.
    pub fn layout(&self) -> VocabLayout {
        let usable = self.vocab_size.saturating_sub(1);
        let parts = if self.noise_fill { 3 } else { 2 };
        let keys = usable / parts;
        let values = if self.noise_fill { usable / parts } else { usable - keys };
        let noise = usable - keys - values;
        VocabLayout {
            key_start: 1u32,
            num_keys: keys,
            value_start: 1 + keys as u32,
            num_values: values,
            noise_start: (1 + keys + values) as u32,
            num_noise: noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cap = |msg: String| Err(DmaError::Capacity(msg));
        let layout = self.layout();
        let q = self.queries();
        if self.num_pairs == 0 {
            return cap("at least one pair is required".into());
        }
        if q > self.num_pairs {
            return cap(format!("{q} queries exceed {} pairs", self.num_pairs));
        }
        if self.num_pairs > layout.num_keys || self.num_pairs > layout.num_values {
            return cap(format!(
                "{} pairs need distinct keys and values; vocabulary {} offers {} keys and {} values",
                self.num_pairs, self.vocab_size, layout.num_keys, layout.num_values
            ));
        }
        if self.seq_len < 2 * self.num_pairs + q {
            return cap(format!(
                "seq_len {} is shorter than 2 * {} pairs + {q} queries",
                self.seq_len, self.num_pairs
            ));
        }
        if self.first_query_pos() + q > self.seq_len {
            return cap(format!(
                "{q} queries do not fit after position {} in length {}",
                self.first_query_pos(),
                self.seq_len
            ));
        }
        if self.noise_fill && layout.num_noise == 0 {
            return cap("vocabulary leaves no room for noise tokens".into());
        }
        Ok(())
    }
}

/// Disjoint token ranges; token 0 is padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub key_start: u32,
    pub num_keys: usize,
    pub value_start: u32,
    pub num_values: usize,
    pub noise_start: u32,
    pub num_noise: usize,
}

impl VocabLayout {
    pub fn is_key(&self, t: u32) -> bool {
        t >= self.key_start && ((t - self.key_start) as usize) < self.num_keys
    }

    pub fn is_value(&self, t: u32) -> bool {
        t >= self.value_start && ((t - self.value_start) as usize) < self.num_values
    }
}

/// One sequence with its query positions and expected tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarSample {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarDataset {
    pub spec: MqarSpec,
    pub train: Vec<MqarSample>,
    pub test: Vec<MqarSample>,
}

fn sample_one(spec: &MqarSpec, layout: &VocabLayout, rng: &mut ChaCha8Rng) -> MqarSample {
    let (p, q) = (spec.num_pairs, spec.queries());
    let keys: Vec<u32> = index::sample(rng, layout.num_keys, p)
        .into_iter()
        .map(|i| layout.key_start + i as u32)
        .collect();
    let values: Vec<u32> = index::sample(rng, layout.num_values, p)
        .into_iter()
        .map(|i| layout.value_start + i as u32)
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    if spec.shuffle_pairs {
        order.shuffle(rng);
    }

    let mut tokens = vec![PAD; spec.seq_len];
    if spec.noise_fill {
        for t in tokens.iter_mut() {
            *t = layout.noise_start + rng.random_range(0..layout.num_noise as u32);
        }
    }
    for (slot, &pair) in order.iter().enumerate() {
        tokens[2 * slot] = keys[pair];
        tokens[2 * slot + 1] = values[pair];
    }

    let start = spec.first_query_pos();
    let mut positions: Vec<usize> =
        index::sample(rng, spec.seq_len - start, q).into_iter().map(|i| start + i).collect();
    positions.sort_unstable();
    let queried = index::sample(rng, p, q).into_vec();
    let mut targets = Vec::with_capacity(q);
    for (&pos, &pair) in positions.iter().zip(&queried) {
        tokens[pos] = keys[pair];
        targets.push(values[pair]);
    }
    MqarSample { tokens, positions, targets }
}

/// Deterministic dataset for `spec`; train samples are drawn first.
pub fn generate_mqar(spec: &MqarSpec) -> Result<MqarDataset> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = (0..spec.num_train).map(|_| sample_one(spec, &layout, &mut rng)).collect();
    let test = (0..spec.num_test).map(|_| sample_one(spec, &layout, &mut rng)).collect();
    Ok(MqarDataset { spec: spec.clone(), train, test })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Spec(MqarSpec),
    Train(MqarSample),
    Test(MqarSample),
}

impl MqarDataset {
    /// One JSON object per line: the spec, then every sample tagged by split.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &Line::Spec(self.spec.clone()))?;
        out.write_all(b"\n")?;
        for (split, samples) in [(true, &self.train), (false, &self.test)] {
            for s in samples {
                let line = if split { Line::Train(s.clone()) } else { Line::Test(s.clone()) };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut spec = None;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Line::Spec(s) => spec = Some(s),
                Line::Train(s) => train.push(s),
                Line::Test(s) => test.push(s),
            }
        }
        let spec = spec.ok_or_else(|| DmaError::Capacity("dataset file has no spec line".into()))?;
        Ok(Self { spec, train, test })
    }
}
