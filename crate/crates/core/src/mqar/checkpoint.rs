//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every parameter as little-endian `f64` in
//! `TinyModel::named_tensors` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TinyModel};
use crate::error::{DmaError, Result};

const MAGIC: &[u8; 8] = b"DMACKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub num_values: usize,
}

pub fn write_checkpoint<W: Write>(model: &TinyModel, seed: u64, mut out: W) -> Result<()> {
    let mut offset = 0;
    let tensors = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry { name, shape: t.shape().to_vec(), offset };
            offset += t.len();
            e
        })
        .collect();
    let header = CheckpointHeader { config: model.config.clone(), seed, tensors, num_values: offset };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for x in model.flatten() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(TinyModel, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DmaError::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;

    let mut model = TinyModel::new(header.config.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let listed: Vec<(String, Vec<usize>)> =
        header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != listed {
        return Err(DmaError::Checkpoint("tensor table does not match the model config".into()));
    }
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != header.num_values * 8 {
        return Err(DmaError::Checkpoint(format!(
            "payload holds {} bytes, header promises {} values",
            raw.len(),
            header.num_values
        )));
    }
    let flat: Vec<f64> =
        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    model.load_flat(&flat)?;
    model.check()?;
    Ok((model, header))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TinyModel, seed: u64) -> Result<()> {
    write_checkpoint(model, seed, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TinyModel, CheckpointHeader)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MaskKind;

    #[test]
    fn round_trip_is_exact() {
        let model = TinyModel::new(ModelConfig::small(32, MaskKind::Dynamic), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, 5).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.seed, 5);
        assert_eq!(header.num_values, model.num_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = TinyModel::new(ModelConfig::small(32, MaskKind::Causal), 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, 1, &mut bytes).unwrap();
        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(read_checkpoint(truncated), Err(DmaError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(DmaError::Checkpoint(_))));
    }
}
