//! Head checkpoint file.
//!
//! Layout: `u64` little-endian header length, the JSON header, then every
//! parameter as little-endian `f32`: for each trunk layer and finally the
//! projection, the row-major weight matrix followed by the bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Dense, HeadParams, TrainConfig, TrainError};
use crate::io::{f32s_to_le_bytes, le_bytes_to_f32s, write_atomic};

pub const CHECKPOINT_FORMAT: &str = "sceneret-head";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub activation: Activation,
    pub trunk: Vec<LayerShape>,
    pub projection: LayerShape,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

fn err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn save_checkpoint(
    path: &Path,
    head: &HeadParams,
    config: Option<&TrainConfig>,
) -> Result<(), TrainError> {
    let shape = |l: &Dense| LayerShape {
        input: l.input,
        output: l.output,
    };
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        activation: head.activation,
        trunk: head.trunk.iter().map(shape).collect(),
        projection: shape(&head.projection),
        seed: config.map_or(0, |c| c.seed),
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + json.len() + head.param_count() * 4);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for l in head.layers() {
        bytes.extend_from_slice(&f32s_to_le_bytes(&l.weight));
        bytes.extend_from_slice(&f32s_to_le_bytes(&l.bias));
    }
    write_atomic(path, &bytes).map_err(|e| err(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(HeadParams, CheckpointHeader), TrainError> {
    let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    if bytes.len() < 8 {
        return Err(err("file too short"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| err(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut values = Vec::new();
    le_bytes_to_f32s(&bytes[8 + hlen..], &mut values);
    let expected: usize = header
        .trunk
        .iter()
        .chain(std::iter::once(&header.projection))
        .map(|s| s.input * s.output + s.output)
        .sum();
    if (bytes.len() - 8 - hlen) != expected * 4 {
        return Err(err(format!(
            "weight blob has {} bytes, header implies {}",
            bytes.len() - 8 - hlen,
            expected * 4
        )));
    }
    let mut rest = values.as_slice();
    let mut take = |s: &LayerShape| {
        let (w, r) = rest.split_at(s.input * s.output);
        let (b, r) = r.split_at(s.output);
        rest = r;
        Dense {
            input: s.input,
            output: s.output,
            weight: w.to_vec(),
            bias: b.to_vec(),
        }
    };
    let trunk = header.trunk.iter().map(&mut take).collect();
    let projection = take(&header.projection);
    let head = HeadParams {
        trunk,
        projection,
        activation: header.activation,
    };
    head.check_shapes()?;
    if !head.is_finite() {
        return Err(err("non-finite parameter"));
    }
    Ok((head, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_head;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = TrainConfig {
            trunk_depth: 3,
            hidden_width: 7,
            representation_dim: 5,
            projection_dim: 3,
            seed: 99,
            ..TrainConfig::default()
        };
        let head = init_head(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        save_checkpoint(&path, &head, Some(&cfg)).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, head);
        assert_eq!(header.config, Some(cfg));
        assert_eq!(header.seed, 99);
    }

    #[test]
    fn truncated_blob_rejected() {
        let cfg = TrainConfig {
            hidden_width: 4,
            representation_dim: 3,
            projection_dim: 2,
            ..TrainConfig::default()
        };
        let head = init_head(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        save_checkpoint(&path, &head, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::Checkpoint(_))
        ));
    }
}
