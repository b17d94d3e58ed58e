//! Self-supervised distance-regression training.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, pretext_eval, pretext_step, stack_inputs, BestTracker, Optimizer, PreparedFrame, TrainConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{self, CheckpointMeta};
use crate::model::{interp, Mode, ModelConfig, Network};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "pretrain_history.json";
pub const VAL_METRIC: &str = "val_pretext_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Pair-weighted mean training loss over the epoch's steps.
    pub train_loss: f64,
    pub val_loss: f64,
    pub saved: bool,
}

#[derive(Debug, Clone)]
pub struct PretextOutcome {
    pub checkpoint: PathBuf,
    pub meta: CheckpointMeta,
    pub history: Vec<EpochLog>,
    /// Weights of the saved (best) epoch.
    pub network: Network<f32>,
}

/// Mean pretext loss over every pair of `frames`, evaluation mode.
///
/// Frames are evaluated in parallel and summed in frame order.
pub fn pretext_validation_loss(net: &Network<f32>, frames: &[PreparedFrame]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = frames
        .par_iter()
        .map(|f| {
            let pairs = [f.pairs.as_slice()];
            pretext_eval(net, &f.input, &pairs)
        })
        .collect::<Result<_>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    if count == 0 {
        return Err(Error::invalid("no pair labels in the validation frames"));
    }
    Ok(sum / count as f64)
}

/// `(‖h_a − h_b‖₂, target distance)` for every pair of `frames`, in order.
pub fn embedding_distances(net: &Network<f32>, frames: &[PreparedFrame]) -> Result<Vec<(f64, f64)>> {
    let size = net.config.sps_size;
    let per_frame: Vec<Vec<(f64, f64)>> = frames
        .par_iter()
        .map(|f| {
            if f.pairs.is_empty() {
                return Ok(Vec::new());
            }
            let dense = net.dense_features(&f.input)?;
            f.pairs
                .iter()
                .map(|p| {
                    let a = interp::sps_sample(&dense, 0, &p.bbox_a, size)?;
                    let b = interp::sps_sample(&dense, 0, &p.bbox_b, size)?;
                    let d: f64 = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
                    Ok((d, p.distance))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Trains the encoder-decoder on pair distances and keeps the checkpoint
/// with the strictly lowest validation loss in `out_dir`.
pub fn train_pretext(
    cfg: &TrainConfig,
    model: &ModelConfig,
    train: &[PreparedFrame],
    val: &[PreparedFrame],
    out_dir: &Path,
) -> Result<PretextOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("pretext training needs non-empty train and validation sets"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut net = Network::<f32>::new(model.clone(), derive_seed(cfg.seed, "pretext/init"))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretext/order"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let ckpt_path = out_dir.join(BEST_CHECKPOINT);
    let config_hash = checkpoint::config_hash(model);

    let mut best = BestTracker::lower_is_better();
    let mut best_net = None;
    let mut best_meta = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let frames: Vec<&PreparedFrame> = chunk.iter().map(|&i| &train[i]).collect();
            let pairs: Vec<&[_]> = frames.iter().map(|f| f.pairs.as_slice()).collect();
            if pairs.iter().all(|p| p.is_empty()) {
                continue;
            }
            let x = stack_inputs(&frames);
            net.zero_grad();
            let (loss, n) = pretext_step(&mut net, &x, &pairs, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!("pretext loss diverged at epoch {epoch}")));
            }
            opt.step(&mut net);
            sum += loss * n as f64;
            count += n;
        }
        if count == 0 {
            return Err(Error::invalid(format!("no pair labels in training epoch {epoch}")));
        }
        let train_loss = sum / count as f64;
        let val_loss = pretext_validation_loss(&net, val)?;
        let saved = best.offer(epoch, val_loss);
        if saved {
            let meta = CheckpointMeta {
                epoch,
                metric: val_loss,
                metric_name: VAL_METRIC.into(),
                config_hash: config_hash.clone(),
            };
            checkpoint::save(&ckpt_path, &net, &meta)?;
            best_net = Some(net.clone());
            best_meta = Some(meta);
        }
        log::info!("pretrain epoch {epoch}/{}: train {train_loss:.6} val {val_loss:.6}{}", cfg.epochs, if saved { " *" } else { "" });
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            saved,
        });
    }
    let history_path = out_dir.join(HISTORY_FILE);
    std::fs::write(&history_path, serde_json::to_vec_pretty(&history)?).map_err(|e| Error::io(&history_path, e))?;
    match (best_net, best_meta) {
        (Some(network), Some(meta)) => Ok(PretextOutcome {
            checkpoint: ckpt_path,
            meta,
            history,
            network,
        }),
        _ => Err(Error::invalid("validation loss was never finite; no checkpoint saved")),
    }
}
