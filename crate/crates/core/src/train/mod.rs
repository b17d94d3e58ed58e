//! Pretext training, label-fraction splits and downstream fine-tuning.

pub mod data;
pub mod finetune;
pub mod loss;
pub mod optim;
pub mod pretext;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthio::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::{frame_seed, PairLabel};
use crate::model::{Mode, Network, Profile, Scalar, Tensor};

pub use data::{prepare_frames, PairIndex, PreparedFrame};
pub use finetune::{finetune, FinetuneOutcome, Init, Task};
pub use loss::{cross_entropy, pixel_cross_entropy, pretext_loss, pretext_loss_batch};
pub use optim::{Optimizer, OptimizerKind};
pub use pretext::{train_pretext, EpochLog, PretextOutcome};

/// Derives an independent stream seed from the run seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    frame_seed(seed, tag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Frames per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub profile: Profile,
    pub pairs_per_frame: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            profile: Profile::Full,
            pairs_per_frame: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.pairs_per_frame == 0 {
            return Err(Error::invalid("batch_size, epochs and pairs_per_frame must be >= 1"));
        }
        Ok(())
    }
}

/// Keeps the best epoch under strict improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestTracker {
    lower_is_better: bool,
    best: Option<(usize, f64)>,
}

impl BestTracker {
    pub fn lower_is_better() -> Self {
        BestTracker {
            lower_is_better: true,
            best: None,
        }
    }

    pub fn higher_is_better() -> Self {
        BestTracker {
            lower_is_better: false,
            best: None,
        }
    }

    /// Records `metric` for `epoch`; true when it strictly improves on the best so far.
    pub fn offer(&mut self, epoch: usize, metric: f64) -> bool {
        let better = match self.best {
            None => metric.is_finite(),
            Some((_, b)) if self.lower_is_better => metric < b,
            Some((_, b)) => metric > b,
        };
        if better {
            self.best = Some((epoch, metric));
        }
        better
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One fine-tuning run's outcome, as stored in the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// `segmentation` or `classification`.
    pub task: String,
    /// `scratch` or `pretrained`.
    pub init: String,
    pub fraction: f64,
    pub seed: u64,
    /// `miou` or `map`.
    pub metric_name: String,
    pub best_epoch: usize,
    pub val_metric: f64,
    pub test_metric: f64,
    pub n_train_frames: usize,
}

pub fn append_result(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.02, 0.05, 0.10, 0.20, 0.50, 1.00];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSplit {
    pub fraction: f64,
    /// Split index in `0..n_seeds`.
    pub seed: u64,
    pub frame_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fractions: Vec<f64>,
    pub n_seeds: usize,
    /// Run seed the per-split permutations derive from.
    pub seed: u64,
    pub splits: Vec<FractionSplit>,
}

impl SplitPlan {
    pub fn new(fractions: Vec<f64>, n_seeds: usize, seed: u64) -> Result<Self> {
        if fractions.is_empty() || n_seeds == 0 {
            return Err(Error::invalid("split plan needs at least one fraction and one seed"));
        }
        if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::invalid(format!("fraction {f} outside (0, 1]")));
        }
        Ok(SplitPlan {
            fractions,
            n_seeds,
            seed,
            splits: Vec::new(),
        })
    }

    pub fn get(&self, fraction: f64, seed: u64) -> Option<&[String]> {
        self.splits
            .iter()
            .find(|s| s.fraction == fraction && s.seed == seed)
            .map(|s| s.frame_ids.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Number of frames a fraction selects: `round(f·n)`, at least one.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}

/// One seeded permutation per split seed; fraction `f` takes its first
/// `round(f·N)` ids, so smaller fractions are prefixes of larger ones.
pub fn make_fraction_splits_ids(ids: &[String], plan: &SplitPlan) -> Result<SplitPlan> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot split an empty training set"));
    }
    let mut out = SplitPlan::new(plan.fractions.clone(), plan.n_seeds, plan.seed)?;
    for s in 0..plan.n_seeds as u64 {
        let mut perm = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(plan.seed, &format!("split/{s}")));
        perm.shuffle(&mut rng);
        for &f in &plan.fractions {
            out.splits.push(FractionSplit {
                fraction: f,
                seed: s,
                frame_ids: perm[..fraction_count(f, perm.len())].to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn make_fraction_splits(train: &DatasetManifest, plan: &SplitPlan) -> Result<SplitPlan> {
    let ids: Vec<String> = train.entries.iter().map(|e| e.frame_id.clone()).collect();
    make_fraction_splits_ids(&ids, plan)
}

/// Stacks the inputs of several frames into one batch.
pub fn stack_inputs<F: Scalar>(frames: &[&PreparedFrame]) -> Tensor<F> {
    let items: Vec<Tensor<F>> = frames.iter().map(|f| f.input.cast()).collect();
    Tensor::stack(&items)
}

/// Pretext forward and backward on one batch; returns the mean pair loss and
/// the pair count. Gradients accumulate into `net`; nothing happens for a
/// batch without pairs.
pub fn pretext_step<F: Scalar>(
    net: &mut Network<F>,
    x: &Tensor<F>,
    pairs: &[&[PairLabel]],
    mode: Mode,
) -> Result<(f64, usize)> {
    let total: usize = pairs.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Ok((0.0, 0));
    }
    let (enc, ec) = net.encode(x, mode)?;
    let (dense, dc) = net.decode(&enc)?;
    let (sum, count, grad) = loss::pretext_dense(&dense, pairs, net.config.sps_size, Some(1.0 / total as f64))?;
    let d_enc = net.decode_backward(&dc, &grad.expect("gradient requested"));
    net.encode_backward(&ec, &d_enc, mode);
    Ok((sum / count as f64, count))
}

/// Summed pretext loss and pair count without gradients (evaluation mode).
pub fn pretext_eval<F: Scalar>(net: &Network<F>, x: &Tensor<F>, pairs: &[&[PairLabel]]) -> Result<(f64, usize)> {
    if pairs.iter().all(|p| p.is_empty()) {
        return Ok((0.0, 0));
    }
    let dense = net.dense_features(x)?;
    let (sum, count, _) = loss::pretext_dense(&dense, pairs, net.config.sps_size, None)?;
    Ok((sum, count))
}

/// Segmentation forward and backward; returns the mean pixel loss.
pub fn segmentation_step<F: Scalar>(net: &mut Network<F>, x: &Tensor<F>, labels: &[u8], mode: Mode) -> Result<f64> {
    let (enc, ec) = net.encode(x, mode)?;
    let (dense, dc) = net.decode(&enc)?;
    let logits = net.seg_logits(&dense);
    let (loss, d_logits, count) = pixel_cross_entropy(&logits, labels)?;
    if count == 0 {
        return Ok(0.0);
    }
    let d_dense = net.seg_logits_backward(&dense, &d_logits);
    let d_enc = net.decode_backward(&dc, &d_dense);
    net.encode_backward(&ec, &d_enc, mode);
    Ok(loss)
}

/// Classification forward and backward; returns the mean loss.
pub fn classification_step<F: Scalar>(
    net: &mut Network<F>,
    x: &Tensor<F>,
    targets: &[usize],
    mode: Mode,
) -> Result<f64> {
    let (enc, ec) = net.encode(x, mode)?;
    let logits = net.cls_logits(&enc);
    let (loss, d_logits) = cross_entropy(&logits, targets)?;
    let d_enc = net.cls_logits_backward(&enc, &d_logits);
    net.encode_backward(&ec, &d_enc, mode);
    Ok(loss)
}
