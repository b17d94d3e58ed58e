mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spdist_core::depthio::{load_manifest, DatasetManifest};
use spdist_core::eval::{export_embeddings, format_significance_table, significance};
use spdist_core::model::Profile;
use spdist_core::synth::build_dataset;
use spdist_core::train::data::{compute_pair_labels, read_pair_labels, write_pair_labels};
use spdist_core::train::{
    append_result, finetune, make_fraction_splits, prepare_frames, read_results, train_pretext, Init, PairIndex, SplitPlan, Task,
};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input data.
    User(String),
    Internal(String),
}

impl From<spdist_core::Error> for CliError {
    fn from(e: spdist_core::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spdist", version, about = "Depth-only self-supervised pretraining by superpixel distance regression")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed every random stream derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for frame-parallel stages.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `tiny` or `full` network profile.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: spdist_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic depth dataset with masks and activity labels.
    GenData(GenDataArgs),
    /// Segment frames, filter clusters and cache sampled pair labels.
    LabelPairs(LabelPairsArgs),
    /// Train the encoder-decoder on the pair-distance task.
    Pretrain(PretrainArgs),
    /// Fine-tune on a label fraction and append the result record.
    Finetune(FinetuneArgs),
    /// Statistics over result files.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Write cluster embeddings and a 2-D projection for a checkpoint.
    ExportEmbeddings(ExportArgs),
    /// Draw nested label-fraction splits of a training manifest.
    Splits(SplitsArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Debug, Args)]
struct LabelPairsArgs {
    /// One or more manifests; frames are labeled in the order given.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    /// JSON-lines output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Cached pair labels; computed on the fly when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// seg or cls.
    #[arg(long)]
    task: Task,
    /// `scratch` or a checkpoint path.
    #[arg(long)]
    init: Init,
    #[arg(long)]
    fraction: f64,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Split plan from `splits`; drawn from the config when absent.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Results file the record is appended to.
    #[arg(long)]
    results: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Paired Wilcoxon tests of pretrained vs scratch with Holm correction.
    Significance {
        #[arg(long)]
        results: PathBuf,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitsArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::User(format!("{}: {e}", path.display()))
}

fn apply_overrides(cfg: &mut spdist_core::train::TrainConfig, o: &TrainOverrides) {
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
}

fn load_labeled_manifest(path: &Path) -> CliResult<DatasetManifest> {
    Ok(load_manifest(path)?)
}

fn gen_data(cfg: &mut RunConfig, a: &GenDataArgs) -> CliResult {
    let s = &mut cfg.synth;
    s.n_templates = a.templates.unwrap_or(s.n_templates);
    s.n_scenes = a.scenes.unwrap_or(s.n_scenes);
    s.views_per_scene = a.views.unwrap_or(s.views_per_scene);
    s.noise_std = a.noise_std.unwrap_or(s.noise_std);
    s.dropout_frac = a.dropout.unwrap_or(s.dropout_frac);
    s.width = a.width.unwrap_or(s.width);
    s.height = a.height.unwrap_or(s.height);
    s.validate()?;
    let ds = build_dataset(&cfg.synth, &a.out, cfg.seed)?;
    log::info!(
        "wrote {} frames ({} train / {} val / {} test) to {}",
        ds.all.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn label_pairs(cfg: &RunConfig, a: &LabelPairsArgs) -> CliResult {
    let labeling = cfg.labeling();
    let mut all = Vec::new();
    for path in &a.manifest {
        let m = load_labeled_manifest(path)?;
        let per_frame = compute_pair_labels(&m, &labeling, cfg.seed, cfg.depthio.unit_scale)?;
        let n: usize = per_frame.iter().map(Vec::len).sum();
        log::info!("{}: {} frames, {n} pairs", path.display(), m.len());
        all.extend(per_frame.into_iter().flatten());
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let n = write_pair_labels(&a.out, &all)?;
    log::info!("wrote {n} pair labels to {}", a.out.display());
    Ok(())
}

fn pair_index(cfg: &RunConfig, cached: Option<&Path>, manifests: &[&DatasetManifest]) -> CliResult<PairIndex> {
    if let Some(p) = cached {
        return Ok(read_pair_labels(p)?);
    }
    let labeling = cfg.labeling();
    let mut index = PairIndex::new();
    for m in manifests {
        let per_frame = compute_pair_labels(m, &labeling, cfg.seed, cfg.depthio.unit_scale)?;
        for (e, pairs) in m.entries.iter().zip(per_frame) {
            index.insert(e.frame_id.clone(), pairs);
        }
    }
    Ok(index)
}

fn pretrain(cfg: &mut RunConfig, a: &PretrainArgs) -> CliResult {
    apply_overrides(&mut cfg.train, &a.overrides);
    cfg.train.validate()?;
    let model = cfg.model_config();
    let train = load_labeled_manifest(&a.train)?;
    let val = load_labeled_manifest(&a.val)?;
    if train.is_empty() || val.is_empty() {
        return Err(CliError::User("pretraining needs non-empty train and validation manifests".into()));
    }
    let index = pair_index(cfg, a.pairs.as_deref(), &[&train, &val])?;
    let unit = cfg.depthio.unit_scale;
    let train_frames = prepare_frames(&train, model.input_size, unit, Some(&index))?;
    let val_frames = prepare_frames(&val, model.input_size, unit, Some(&index))?;
    let out = train_pretext(&cfg.train, &model, &train_frames, &val_frames, &a.out)?;
    log::info!(
        "best checkpoint {} (epoch {}, {} {:.6})",
        out.checkpoint.display(),
        out.meta.epoch,
        out.meta.metric_name,
        out.meta.metric
    );
    Ok(())
}

fn finetune_cmd(cfg: &mut RunConfig, a: &FinetuneArgs) -> CliResult {
    apply_overrides(&mut cfg.finetune, &a.overrides);
    cfg.finetune.validate()?;
    let model = cfg.model_config();
    let train = load_labeled_manifest(&a.train)?;
    let plan = match &a.splits {
        Some(p) => SplitPlan::load(p)?,
        None => {
            let base = SplitPlan::new(cfg.splits.fractions.clone(), cfg.splits.n_seeds, cfg.seed)?;
            make_fraction_splits(&train, &base)?
        }
    };
    // The global seed selects the split and seeds initialization and batch order.
    let split_seed = cfg.seed;
    let ids = plan
        .splits
        .iter()
        .find(|s| (s.fraction - a.fraction).abs() < 1e-12 && s.seed == split_seed)
        .map(|s| s.frame_ids.clone())
        .ok_or_else(|| {
            CliError::User(format!(
                "split plan has no entry for fraction {} and seed {split_seed} (fractions {:?}, seeds 0..{})",
                a.fraction, plan.fractions, plan.n_seeds
            ))
        })?;
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    let subset = DatasetManifest {
        entries: train.entries.iter().filter(|e| wanted.contains(e.frame_id.as_str())).cloned().collect(),
        split_tag: train.split_tag,
        root: train.root.clone(),
    };
    if subset.len() != ids.len() {
        return Err(CliError::User(format!(
            "split references {} frames but only {} are in {}",
            ids.len(),
            subset.len(),
            a.train.display()
        )));
    }
    let val = load_labeled_manifest(&a.val)?;
    let test = load_labeled_manifest(&a.test)?;
    let unit = cfg.depthio.unit_scale;
    let n = model.input_size;
    let tr = prepare_frames(&subset, n, unit, None)?;
    let va = prepare_frames(&val, n, unit, None)?;
    let te = prepare_frames(&test, n, unit, None)?;
    let out = finetune(&cfg.finetune, &model, a.task, &a.init, a.fraction, split_seed, &tr, &va, &te)?;
    if let Some(dir) = a.results.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    append_result(&a.results, &out.record)?;
    log::info!(
        "{} {} f={} seed={}: test {} {:.6} (best epoch {})",
        out.record.task,
        out.record.init,
        out.record.fraction,
        out.record.seed,
        out.record.metric_name,
        out.record.test_metric,
        out.record.best_epoch
    );
    Ok(())
}

fn eval_cmd(c: &EvalCommand) -> CliResult {
    match c {
        EvalCommand::Significance { results, out } => {
            let records = read_results(results)?;
            let rows = significance(&records)?;
            print!("{}", format_significance_table(&rows));
            if let Some(path) = out {
                let json = serde_json::to_vec_pretty(&rows).map_err(|e| CliError::Internal(e.to_string()))?;
                std::fs::write(path, json).map_err(|e| io_err(path, e))?;
            }
            Ok(())
        }
    }
}

fn export_cmd(cfg: &RunConfig, a: &ExportArgs) -> CliResult {
    let m = load_labeled_manifest(&a.manifest)?;
    let out = export_embeddings(&a.checkpoint, &m, &cfg.labeling(), cfg.depthio.unit_scale, cfg.seed, &a.out)?;
    log::info!("exported {} embeddings to {}", out.rows, a.out.display());
    Ok(())
}

fn splits_cmd(cfg: &RunConfig, a: &SplitsArgs) -> CliResult {
    let train = load_labeled_manifest(&a.train)?;
    let fractions = a.fractions.clone().unwrap_or_else(|| cfg.splits.fractions.clone());
    let base = SplitPlan::new(fractions, a.seeds.unwrap_or(cfg.splits.n_seeds), cfg.seed)?;
    let plan = make_fraction_splits(&train, &base)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    plan.save(&a.out)?;
    log::info!("wrote {} splits to {}", plan.splits.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_globals(cli.seed, cli.profile);
    cfg.validate()?;
    let workers = match cli.workers {
        Some(0) => return Err(CliError::User("--workers must be >= 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(&mut cfg, a),
        Command::LabelPairs(a) => label_pairs(&cfg, a),
        Command::Pretrain(a) => pretrain(&mut cfg, a),
        Command::Finetune(a) => finetune_cmd(&mut cfg, a),
        Command::Eval { command } => eval_cmd(command),
        Command::ExportEmbeddings(a) => export_cmd(&cfg, a),
        Command::Splits(a) => splits_cmd(&cfg, a),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
