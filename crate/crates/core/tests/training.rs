use std::path::Path;

use spdist_core::depthio::DEFAULT_UNIT_SCALE;
use spdist_core::geometry::LabelingConfig;
use spdist_core::model::layers::Visit;
use spdist_core::model::{checkpoint, ModelConfig, Profile};
use spdist_core::synth::{build_dataset, SynthConfig};
use spdist_core::train::data::compute_pair_labels;
use spdist_core::train::finetune::{evaluate_segmentation, initial_network};
use spdist_core::train::pretext::pretext_validation_loss;
use spdist_core::train::{finetune, prepare_frames, train_pretext, Init, PairIndex, PreparedFrame, Task, TrainConfig};

fn frames(dir: &Path, n_scenes: usize) -> (Vec<PreparedFrame>, Vec<PreparedFrame>) {
    let cfg = SynthConfig {
        n_scenes,
        width: 96,
        height: 96,
        ..SynthConfig::default()
    };
    let ds = build_dataset(&cfg, dir, 11).unwrap();
    let mut index = PairIndex::new();
    for m in [&ds.train, &ds.val] {
        for (e, p) in m.entries.iter().zip(compute_pair_labels(m, &LabelingConfig::default(), 11, DEFAULT_UNIT_SCALE).unwrap()) {
            index.insert(e.frame_id.clone(), p);
        }
    }
    let n = ModelConfig::tiny().input_size;
    (
        prepare_frames(&ds.train, n, DEFAULT_UNIT_SCALE, Some(&index)).unwrap(),
        prepare_frames(&ds.val, n, DEFAULT_UNIT_SCALE, Some(&index)).unwrap(),
    )
}

fn tiny_cfg(epochs: usize, lr: f64, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: batch,
        seed: 5,
        profile: Profile::Tiny,
        ..TrainConfig::default()
    }
}

#[test]
fn pretext_overfits_a_single_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = frames(&dir.path().join("data"), 3);
    let one = vec![train.into_iter().find(|f| f.pairs.len() >= 8).unwrap()];
    let out = train_pretext(&tiny_cfg(150, 1e-3, 1), &ModelConfig::tiny(), &one, &one, &dir.path().join("run")).unwrap();
    let first = out.history[0].train_loss;
    let best = out.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.1 * first, "loss {first} -> {best}");
}

#[test]
fn pretext_is_deterministic_and_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = frames(&dir.path().join("data"), 5);
    let model = ModelConfig::tiny();
    let cfg = tiny_cfg(3, 1e-3, 2);
    let a = train_pretext(&cfg, &model, &train, &val, &dir.path().join("a")).unwrap();
    let b = train_pretext(&cfg, &model, &train, &val, &dir.path().join("b")).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());

    let (net, meta) = checkpoint::load::<f32>(&a.checkpoint).unwrap();
    let best = a.history.iter().rev().find(|h| h.saved).unwrap();
    assert_eq!(meta.epoch, best.epoch);
    let reloaded = pretext_validation_loss(&net, &val).unwrap();
    assert!((reloaded - best.val_loss).abs() <= 1e-7, "{reloaded} vs {}", best.val_loss);
    assert_eq!(net.state_vector(), a.network.state_vector());
}

#[test]
fn pretrained_init_restores_encoder_and_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = frames(&dir.path().join("data"), 3);
    let model = ModelConfig::tiny();
    let out = train_pretext(&tiny_cfg(1, 1e-3, 4), &model, &train, &val, &dir.path().join("run")).unwrap();
    let init = Init::Checkpoint(out.checkpoint.clone());
    let enc = |n: &spdist_core::model::Network<f32>| {
        let mut v = Vec::new();
        n.encoder.visit(&mut |p, _| v.extend_from_slice(&p.value));
        v
    };
    let dec = |n: &spdist_core::model::Network<f32>| {
        let mut v = Vec::new();
        n.decoder.visit(&mut |p, _| v.extend_from_slice(&p.value));
        v
    };
    let seg = initial_network(&model, Task::Segmentation, &init, 77).unwrap();
    assert_eq!(enc(&seg), enc(&out.network));
    assert_eq!(dec(&seg), dec(&out.network));
    let cls = initial_network(&model, Task::Classification, &init, 77).unwrap();
    assert_eq!(enc(&cls), enc(&out.network));
    let scratch = initial_network(&model, Task::Segmentation, &Init::Scratch, 77).unwrap();
    assert_ne!(enc(&scratch), enc(&out.network));

    let mut other = model.clone();
    other.decoder_channels = 8;
    assert!(initial_network(&other, Task::Segmentation, &init, 77).is_err());
}

#[test]
fn segmentation_overfits_a_single_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = frames(&dir.path().join("data"), 3);
    let one = vec![train[0].clone()];
    let out = finetune(&tiny_cfg(300, 3e-3, 1), &ModelConfig::tiny(), Task::Segmentation, &Init::Scratch, 1.0, 0, &one, &one, &one).unwrap();
    let acc = evaluate_segmentation(&out.network, &one).unwrap().pixel_accuracy().unwrap();
    assert!(acc >= 0.99, "pixel accuracy {acc}");
}

#[test]
fn finetune_is_deterministic_per_split_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = frames(&dir.path().join("data"), 5);
    let model = ModelConfig::tiny();
    let cfg = tiny_cfg(2, 1e-3, 4);
    let run = |s| finetune(&cfg, &model, Task::Segmentation, &Init::Scratch, 1.0, s, &train, &val, &val).unwrap();
    let (a, b, c) = (run(0), run(0), run(1));
    assert_eq!(a.record, b.record);
    assert_eq!(a.history, b.history);
    assert_ne!(a.history, c.history);
    assert_eq!(a.record.init, "scratch");
    assert_eq!(a.record.n_train_frames, train.len());
}
