//! Downstream fine-tuning from scratch or from a pretext checkpoint.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classification_step, derive_seed, segmentation_step, stack_inputs, BestTracker, MetricsRecord, Optimizer, PreparedFrame, TrainConfig};
use crate::depthio::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::eval::{map_score, ConfusionMatrix, RankedPredictions};
use crate::model::{checkpoint, Mode, ModelConfig, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Classification => "classification",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Segmentation => "miou",
            Task::Classification => "map",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(Task::Segmentation),
            "cls" | "classification" => Ok(Task::Classification),
            other => Err(Error::invalid(format!("unknown task `{other}` (expected seg|cls)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Scratch => "scratch",
            Init::Checkpoint(_) => "pretrained",
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;

    /// `scratch`, or a checkpoint path.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" => Err(Error::invalid("empty --init")),
            "scratch" => Ok(Init::Scratch),
            path => Ok(Init::Checkpoint(PathBuf::from(path))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub record: MetricsRecord,
    pub history: Vec<FinetuneEpoch>,
    /// Weights of the selected epoch.
    pub network: Network<f32>,
}

/// Fresh seeded weights, with the encoder (and for segmentation the decoder)
/// replaced by the checkpoint's when `init` names one.
pub fn initial_network(model: &ModelConfig, task: Task, init: &Init, seed: u64) -> Result<Network<f32>> {
    let mut net = Network::<f32>::new(model.clone(), seed)?;
    if let Init::Checkpoint(path) = init {
        let (pre, _) = checkpoint::load::<f32>(path)?;
        if pre.config != *model {
            return Err(Error::invalid(format!(
                "checkpoint {} was trained with a different model configuration",
                path.display()
            )));
        }
        net.encoder = pre.encoder;
        if task == Task::Segmentation {
            net.decoder = pre.decoder;
        }
    }
    Ok(net)
}

fn check_targets(frames: &[PreparedFrame], task: Task, model: &ModelConfig, role: &str) -> Result<()> {
    for f in frames {
        match task {
            Task::Segmentation => {
                let labels = f
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("{role} frame {} has no label mask", f.frame_id)))?;
                if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= model.num_seg_classes) {
                    return Err(Error::invalid(format!(
                        "{role} frame {}: class id {bad} out of range for {} classes",
                        f.frame_id, model.num_seg_classes
                    )));
                }
            }
            Task::Classification => {
                let a = f
                    .activity
                    .ok_or_else(|| Error::invalid(format!("{role} frame {} has no activity label", f.frame_id)))?;
                if a as usize >= model.num_activity_classes {
                    return Err(Error::invalid(format!(
                        "{role} frame {}: activity {a} out of range for {} classes",
                        f.frame_id, model.num_activity_classes
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Per-pixel argmax confusion over non-ignored pixels of labeled frames.
pub fn evaluate_segmentation(net: &Network<f32>, frames: &[PreparedFrame]) -> Result<ConfusionMatrix> {
    let k = net.config.num_seg_classes;
    let parts: Vec<ConfusionMatrix> = frames
        .par_iter()
        .map(|f| {
            let labels = f
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("frame {} has no label mask", f.frame_id)))?;
            let logits = net.forward_segmentation(&f.input)?;
            let hw = logits.shape[2] * logits.shape[3];
            let mut cm = ConfusionMatrix::new(k);
            for (px, &truth) in labels.iter().enumerate() {
                if truth == IGNORE_LABEL {
                    continue;
                }
                let mut best = 0;
                for c in 1..k {
                    if logits.data[c * hw + px] > logits.data[best * hw + px] {
                        best = c;
                    }
                }
                cm.add(truth as usize, best);
            }
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(k);
    for cm in &parts {
        total.merge(cm);
    }
    Ok(total)
}

/// Softmax scores ranked per activity class, over classes with at least
/// one positive among `frames`.
pub fn classification_rankings(net: &Network<f32>, frames: &[PreparedFrame]) -> Result<RankedPredictions> {
    let k = net.config.num_activity_classes;
    let scored: Vec<(usize, Vec<f64>)> = frames
        .par_iter()
        .map(|f| {
            let truth = f
                .activity
                .ok_or_else(|| Error::invalid(format!("frame {} has no activity label", f.frame_id)))?;
            let logits = net.forward_classification(&f.input)?;
            let z: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            Ok((truth as usize, e.iter().map(|v| v / s).collect()))
        })
        .collect::<Result<_>>()?;
    let mut per_class = Vec::new();
    for c in 0..k {
        if scored.iter().any(|(t, _)| *t == c) {
            per_class.push(scored.iter().map(|(t, p)| (p[c], *t == c)).collect());
        }
    }
    Ok(RankedPredictions { per_class })
}

pub fn evaluate(net: &Network<f32>, task: Task, frames: &[PreparedFrame]) -> Result<f64> {
    match task {
        Task::Segmentation => evaluate_segmentation(net, frames)?.miou(),
        Task::Classification => map_score(&classification_rankings(net, frames)?),
    }
}

/// Fine-tunes all layers on `train` and reports the test metric of the
/// epoch with the strictly best validation metric.
///
/// `split_seed` identifies the label-fraction split and, with the run seed,
/// determines initialization and batch order.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &TrainConfig,
    model: &ModelConfig,
    task: Task,
    init: &Init,
    fraction: f64,
    split_seed: u64,
    train: &[PreparedFrame],
    val: &[PreparedFrame],
    test: &[PreparedFrame],
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::invalid("fine-tuning needs non-empty train, validation and test sets"));
    }
    check_targets(train, task, model, "train")?;
    check_targets(val, task, model, "validation")?;
    check_targets(test, task, model, "test")?;

    let tag = format!("finetune/{}/{split_seed}", task.name());
    let mut net = initial_network(model, task, init, derive_seed(cfg.seed, &format!("{tag}/init")))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("{tag}/order")));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = BestTracker::higher_is_better();
    let mut best_net = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let frames: Vec<&PreparedFrame> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack_inputs(&frames);
            net.zero_grad();
            let loss = match task {
                Task::Segmentation => {
                    let labels: Vec<u8> = frames.iter().flat_map(|f| f.labels.as_ref().unwrap().iter().copied()).collect();
                    segmentation_step(&mut net, &x, &labels, Mode::Train)?
                }
                Task::Classification => {
                    let targets: Vec<usize> = frames.iter().map(|f| f.activity.unwrap() as usize).collect();
                    classification_step(&mut net, &x, &targets, Mode::Train)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::invalid(format!("{} loss diverged at epoch {epoch}", task.name())));
            }
            opt.step(&mut net);
            loss_sum += loss;
            steps += 1;
        }
        let val_metric = evaluate(&net, task, val)?;
        if best.offer(epoch, val_metric) {
            best_net = Some(net.clone());
        }
        log::info!(
            "finetune {} init={} f={fraction} s={split_seed} epoch {epoch}/{}: loss {:.6} val {} {val_metric:.6}",
            task.name(),
            init.name(),
            cfg.epochs,
            loss_sum / steps as f64,
            task.metric_name()
        );
        history.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_metric,
        });
    }
    let (best_epoch, val_metric) = best
        .best()
        .ok_or_else(|| Error::invalid("validation metric was never finite"))?;
    let network = best_net.expect("best state recorded with best epoch");
    let test_metric = evaluate(&network, task, test)?;
    Ok(FinetuneOutcome {
        record: MetricsRecord {
            task: task.name().into(),
            init: init.name().into(),
            fraction,
            seed: split_seed,
            metric_name: task.metric_name().into(),
            best_epoch,
            val_metric,
            test_metric,
            n_train_frames: train.len(),
        },
        history,
        network,
    })
}
