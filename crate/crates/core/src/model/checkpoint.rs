//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
//! header, then every parameter and buffer as little-endian `f32` in
//! declaration order. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Network, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub metric: f64,
    pub metric_name: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    num_values: usize,
}

/// Hex SHA-256 of the model config's canonical JSON.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save<F: Scalar>(path: &Path, net: &Network<F>, meta: &CheckpointMeta) -> Result<()> {
    if !meta.metric.is_finite() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("metric {} is not finite", meta.metric),
        });
    }
    let values = net.state_vector();
    let header = serde_json::to_vec(&Header {
        config: net.config.clone(),
        meta: meta.clone(),
        num_values: values.len(),
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<(Network<F>, CheckpointMeta)> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let data = &bytes[16 + hlen..];
    if data.len() != 4 * header.num_values {
        return Err(bad(format!(
            "expected {} weight values, found {} bytes",
            header.num_values,
            data.len()
        )));
    }
    let mut net = Network::<F>::new(header.config, 0)?;
    let expected = net.state_vector().len();
    if expected != header.num_values {
        return Err(bad(format!(
            "config implies {expected} values but header declares {}",
            header.num_values
        )));
    }
    let mut values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    net.visit_mut(&mut |p, _| {
        for v in p.value.iter_mut() {
            *v = F::of(values.next().expect("length checked") as f64);
        }
    });
    Ok((net, header.meta))
}
