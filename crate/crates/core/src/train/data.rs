//! Frame preparation and the on-disk pair-label cache.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::depthio::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::{label_frame, LabelingConfig, PairLabel};
use crate::model::{normalize_depth, resize_labels, Tensor};

/// Pair labels keyed by frame id.
pub type PairIndex = BTreeMap<String, Vec<PairLabel>>;

/// A frame ready for the network: normalized input plus optional targets.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub frame_id: String,
    /// `[1, 1, input_size, input_size]`.
    pub input: Tensor<f32>,
    /// Class mask resized (nearest) to `input_size²`.
    pub labels: Option<Vec<u8>>,
    pub activity: Option<u32>,
    pub pairs: Vec<PairLabel>,
}

/// Runs the labeling pipeline on every manifest frame in parallel; results
/// are in manifest order.
pub fn compute_pair_labels(
    manifest: &DatasetManifest,
    cfg: &LabelingConfig,
    seed: u64,
    unit_scale: f64,
) -> Result<Vec<Vec<PairLabel>>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let frame = manifest.load_frame(e, unit_scale)?;
            Ok(label_frame(&frame, cfg, seed)?.pairs)
        })
        .collect()
}

/// JSON lines, one [`PairLabel`] per line.
pub fn write_pair_labels<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a PairLabel>) -> Result<usize> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut n = 0;
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub fn read_pair_labels(path: &Path) -> Result<PairIndex> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut index = PairIndex::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLabel = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        index.entry(p.frame_id.clone()).or_default().push(p);
    }
    Ok(index)
}

/// Loads and normalizes every frame of `manifest` in parallel, attaching
/// cached pairs when an index is given. Output is in manifest order.
pub fn prepare_frames(
    manifest: &DatasetManifest,
    input_size: usize,
    unit_scale: f64,
    pairs: Option<&PairIndex>,
) -> Result<Vec<PreparedFrame>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let frame = manifest.load_frame(e, unit_scale)?;
            Ok(PreparedFrame {
                frame_id: frame.frame_id.clone(),
                input: normalize_depth(&frame, input_size),
                labels: frame.labels.as_ref().map(|l| resize_labels(l, input_size)),
                activity: frame.activity,
                pairs: pairs.and_then(|p| p.get(&frame.frame_id)).cloned().unwrap_or_default(),
            })
        })
        .collect()
}
