//! stsx: refine noisy frame-level action segmentations with a segment
//! transformer head. Subcommands cover synthetic dataset generation,
//! training, single-video refinement, split evaluation, and ablation runs.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use stsx_core::data::{make_synthetic_dataset, ClassMap, DatasetLayout, SynthSpec, VideoData};
use stsx_core::metrics::{CorpusEval, EvalReport, MetricRow, MetricsConfig};
use stsx_core::model::{Model, ModelConfig};
use stsx_core::segments::extract_segments;
use stsx_core::train::{train, TrainVideo};

use config::{echo_config, global_seed, load_config, FileConfig};

#[derive(Parser)]
#[command(name = "stsx", version, about = "Segment-transformer refinement of action segmentations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a corrupted backbone.
    Synth(SynthArgs),
    /// Train the refinement head on a dataset split.
    Train(TrainArgs),
    /// Refine one video and emit its per-frame labels.
    Refine(RefineArgs),
    /// Evaluate initial vs refined predictions over a split.
    Eval(EvalArgs),
    /// Train and evaluate one configuration per value along an ablation axis.
    Ablate(AblateArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

// ── shared helpers ───────────────────────────────────────────────────

fn load_split_videos(
    layout: &DatasetLayout,
    map: &ClassMap,
    split: &str,
) -> Result<Vec<VideoData>> {
    let ids = layout.read_split(split)?;
    ids.iter().map(|id| Ok(layout.load_video(id, map)?)).collect()
}

fn to_train_videos(videos: &[VideoData]) -> Result<Vec<TrainVideo>> {
    videos
        .iter()
        .map(|v| {
            let init = v
                .init
                .as_ref()
                .ok_or_else(|| anyhow!("video {} has no backbone prediction file", v.id))?;
            Ok(TrainVideo {
                id: v.id.clone(),
                features: v.features.clone(),
                init_pred: init.labels.clone(),
                gt: v.gt.clone(),
            })
        })
        .collect()
}

/// Initial and refined corpus evaluations over a set of videos.
fn evaluate_videos(model: &Model, videos: &[TrainVideo]) -> Result<(EvalReport, EvalReport)> {
    let mut initial = CorpusEval::new(MetricsConfig::default());
    let mut refined = CorpusEval::new(MetricsConfig::default());
    for v in videos {
        initial.add_video(&v.id, &v.init_pred, &v.gt)?;
        let out = model.infer(&v.features, &v.init_pred)?;
        refined.add_video(&v.id, &out.labels, &v.gt)?;
    }
    Ok((initial.report(), refined.report()))
}

#[derive(Serialize)]
struct ComparisonReport {
    initial: EvalReport,
    refined: EvalReport,
}

fn comparison_tsv(initial: &MetricRow, refined: &MetricRow) -> String {
    format!(
        "row\t{}\ninitial\t{}\nrefined\t{}\n",
        MetricRow::tsv_header(),
        initial.to_tsv(),
        refined.to_tsv()
    )
}

fn print_comparison(initial: &MetricRow, refined: &MetricRow) {
    println!("row      \t{}", MetricRow::tsv_header());
    println!("initial  \t{}", initial.to_tsv());
    println!("refined  \t{}", refined.to_tsv());
}

/// Dataset-derived model dimensions: classes from the mapping, frame width
/// from the feature files.
fn bind_model_to_data(
    model_cfg: &mut ModelConfig,
    map: &ClassMap,
    videos: &[VideoData],
) -> Result<()> {
    model_cfg.num_classes = map.len();
    let dims: Vec<usize> = videos.iter().map(|v| v.features.cols()).collect();
    let first = *dims.first().ok_or_else(|| anyhow!("empty split"))?;
    if dims.iter().any(|&d| d != first) {
        bail!("videos disagree on feature width: {dims:?}");
    }
    model_cfg.frame_dim = first;
    Ok(())
}

// ── synth ────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    videos: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Frame-count range per video, as LO:HI.
    #[arg(long, default_value = "280:320", value_parser = parse_range)]
    frames: (usize, usize),
    /// Mean ground-truth segment length in frames.
    #[arg(long, default_value_t = 30)]
    seg_len: usize,
    /// Boundary jitter sigma (fraction of segment length).
    #[arg(long, default_value_t = 0.15)]
    jitter: f64,
    /// Per-segment label flip probability.
    #[arg(long, default_value_t = 0.15)]
    flip: f64,
    /// Per-segment over-segmentation probability.
    #[arg(long, default_value_t = 0.0)]
    split: f64,
    /// Per-boundary merge probability.
    #[arg(long, default_value_t = 0.0)]
    merge: f64,
    /// Probability mass on the backbone's own prediction.
    #[arg(long, default_value_t = 0.8)]
    confidence: f64,
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_sigma: f64,
    /// Fraction of videos in the train split (the rest go to test).
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.parse().map_err(|_| "bad LO")?;
    let hi = hi.parse().map_err(|_| "bad HI")?;
    Ok((lo, hi))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = global_seed(args.seed)?.unwrap_or(0);
    let spec = SynthSpec {
        n_videos: args.videos,
        frames_lo: args.frames.0,
        frames_hi: args.frames.1,
        classes: args.classes,
        mean_segment_len: args.seg_len,
        train_fraction: args.train_fraction,
        corruption: stsx_core::data::CorruptionConfig {
            boundary_jitter: args.jitter,
            label_flip: args.flip,
            split_prob: args.split,
            merge_prob: args.merge,
            label_confidence: args.confidence,
            feature_dim: args.feature_dim,
            feature_sigma: args.feature_sigma,
            seed,
        },
    };
    let layout = make_synthetic_dataset(&spec, &args.out)?;
    let text = toml::to_string_pretty(&spec).context("serializing synth spec")?;
    std::fs::write(args.out.join("effective_config.toml"), text)?;

    // Summary over the generated corpus, via the same loaders users get.
    let map = layout.class_map()?;
    let videos = load_split_videos(&layout, &map, "all")?;
    let mut eval = CorpusEval::new(MetricsConfig::default());
    let mut frames = 0usize;
    let mut segments = 0usize;
    for v in &videos {
        let init = v.init.as_ref().expect("generator writes predictions");
        eval.add_video(&v.id, &init.labels, &v.gt)?;
        frames += v.gt.len();
        segments += extract_segments(&init.labels).len();
    }
    let row = eval.corpus_row();
    println!("dataset: {}", args.out.display());
    println!("videos\tmean_frames\tmean_segments\t{}", MetricRow::tsv_header());
    println!(
        "{}\t{:.1}\t{:.1}\t{}",
        videos.len(),
        frames as f64 / videos.len() as f64,
        segments as f64 / videos.len() as f64,
        row.to_tsv()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split name (train/test/all) or path to a split file.
    #[arg(long, default_value = "train")]
    split: String,
    /// Optional validation split for best-edit checkpointing.
    #[arg(long)]
    val_split: Option<String>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log TSV path (default: <out>.log.tsv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// TOML config file with [model]/[train]/[corruption] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_ce: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Tap layers for a decoder depth: the last `layers` frame-encoder outputs.
fn taps_for_depth(frame_layers: usize, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 || layers > frame_layers {
        bail!("decoder needs 1..={frame_layers} layers, got {layers}");
    }
    Ok((frame_layers - layers..frame_layers).collect())
}

fn merge_train_flags(cfg: &mut FileConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = args.lambda_ce {
        cfg.train.lambda_ce = v;
    }
    if let Some(v) = args.lambda_reg {
        cfg.train.lambda_reg = v;
    }
    if let Some(v) = args.decoder_layers {
        cfg.model.decoder_layers = v;
        cfg.model.tap_layers = taps_for_depth(cfg.model.frame_layers, v)?;
    }
    if let Some(v) = args.window {
        cfg.model.window = v;
    }
    if let Some(v) = args.heads {
        cfg.model.attention_heads = v;
    }
    if let Some(seed) = global_seed(args.seed)? {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
fn run_training(
    cfg: &FileConfig,
    layout: &DatasetLayout,
    map: &ClassMap,
    split: &str,
    val_split: Option<&str>,
) -> Result<(Model, stsx_core::train::TrainOutcome, Vec<TrainVideo>, Option<Vec<TrainVideo>>)> {
    let videos = load_split_videos(layout, map, split)?;
    let train_videos = to_train_videos(&videos)?;
    let val_videos = match val_split {
        Some(s) => Some(to_train_videos(&load_split_videos(layout, map, s)?)?),
        None => None,
    };
    let mut model_cfg = cfg.model.clone();
    bind_model_to_data(&mut model_cfg, map, &videos)?;
    model_cfg.validate()?;
    cfg.train.validate()?;
    let mut model = Model::new(model_cfg)?;
    let outcome = train(&mut model, &train_videos, &cfg.train, val_videos.as_deref())?;
    Ok((model, outcome, train_videos, val_videos))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    merge_train_flags(&mut cfg, &args)?;
    let layout = DatasetLayout::new(&args.data);
    let map = layout.class_map()?;

    let (model, outcome, train_videos, val_videos) =
        run_training(&cfg, &layout, &map, &args.split, args.val_split.as_deref())?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
        let mut effective = cfg.clone();
        effective.model = model.config.clone();
        echo_config(&effective, parent)?;
    }
    model.save_checkpoint(&args.out)?;
    let log_path = args
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.tsv", args.out.display())));
    std::fs::write(&log_path, &outcome.log)?;

    println!(
        "trained {} epochs on {} videos; final mean loss {:.6}",
        outcome.epochs_run,
        train_videos.len(),
        outcome.final_epoch_mean_loss
    );
    if let (Some(epoch), Some(edit)) = (outcome.best_epoch, outcome.best_validation_edit) {
        println!("kept epoch {epoch} (validation edit {edit:.4})");
    }
    let (initial, refined) = evaluate_videos(&model, &train_videos)?;
    println!("train split:");
    print_comparison(&initial.corpus, &refined.corpus);
    if let Some(val) = val_videos {
        let (initial, refined) = evaluate_videos(&model, &val)?;
        println!("validation split:");
        print_comparison(&initial.corpus, &refined.corpus);
    }
    println!("checkpoint: {}", args.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

// ── refine ───────────────────────────────────────────────────────────

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    video: String,
    /// Refined per-frame labels, one action name per line (stdout if unset).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready timeline TSV: track (gt/initial/refined), start, end, label.
    #[arg(long)]
    emit_timeline: Option<PathBuf>,
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let layout = DatasetLayout::new(&args.data);
    let map = layout.class_map()?;
    let model = Model::load_checkpoint(&args.ckpt)?;
    let video = layout.load_video(&args.video, &map)?;
    let init = video
        .init
        .as_ref()
        .ok_or_else(|| anyhow!("video {} has no backbone prediction file", args.video))?;
    let refined = model.infer(&video.features, &init.labels)?;

    let mut lines = String::new();
    for &l in refined.labels.labels() {
        let name = map.name_of(l).ok_or_else(|| anyhow!("label {l} has no name"))?;
        lines.push_str(name);
        lines.push('\n');
    }
    match &args.out {
        Some(path) => std::fs::write(path, lines)?,
        None => print!("{lines}"),
    }

    if let Some(path) = &args.emit_timeline {
        let mut tsv = String::from("track\tstart\tend\tlabel\n");
        for (track, labels) in
            [("gt", &video.gt), ("initial", &init.labels), ("refined", &refined.labels)]
        {
            for seg in extract_segments(labels) {
                let name = map
                    .name_of(seg.label)
                    .ok_or_else(|| anyhow!("label {} has no name", seg.label))?;
                tsv.push_str(&format!("{track}\t{}\t{}\t{name}\n", seg.start, seg.end));
            }
        }
        std::fs::write(path, tsv)?;
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report TSV path; a .json twin is written next to it.
    #[arg(long)]
    report: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let layout = DatasetLayout::new(&args.data);
    let map = layout.class_map()?;
    let model = Model::load_checkpoint(&args.ckpt)?;
    let videos = to_train_videos(&load_split_videos(&layout, &map, &args.split)?)?;
    let (initial, refined) = evaluate_videos(&model, &videos)?;

    let tsv = comparison_tsv(&initial.corpus, &refined.corpus);
    std::fs::write(&args.report, &tsv)?;
    let json_path = args.report.with_extension("json");
    let comparison = ComparisonReport { initial, refined };
    std::fs::write(&json_path, serde_json::to_string_pretty(&comparison)?)?;

    println!("split {} ({} videos):", args.split, videos.len());
    print_comparison(&comparison.initial.corpus, &comparison.refined.corpus);
    println!("report: {} (+ {})", args.report.display(), json_path.display());
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationAxis {
    /// Decoder layer count.
    Layers,
    /// Segment-frame attention window size.
    Window,
    /// Segment-encoder embedding variant (both/feature/category).
    EncoderEmbedding,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    axis: AblationAxis,
    /// Comma-separated values: integers for layers/window,
    /// both|feature|category for encoder-embedding.
    #[arg(long)]
    values: String,
    /// Output directory for the ablation table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value = "test")]
    eval_split: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn apply_axis_value(cfg: &mut FileConfig, axis: AblationAxis, value: &str) -> Result<()> {
    match axis {
        AblationAxis::Layers => {
            let layers: usize =
                value.parse().with_context(|| format!("bad layer count {value:?}"))?;
            cfg.model.decoder_layers = layers;
            cfg.model.tap_layers = taps_for_depth(cfg.model.frame_layers, layers)?;
        }
        AblationAxis::Window => {
            let window: usize =
                value.parse().with_context(|| format!("bad window {value:?}"))?;
            cfg.model.window = window;
        }
        AblationAxis::EncoderEmbedding => {
            let (frame, category) = match value {
                "both" => (true, true),
                "feature" => (true, false),
                "category" => (false, true),
                other => bail!("unknown embedding variant {other:?} (both|feature|category)"),
            };
            cfg.model.use_frame_embedding = frame;
            cfg.model.use_category_embedding = category;
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = {
        let mut cfg = load_config(args.config.as_deref())?;
        if let Some(epochs) = args.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(seed) = global_seed(args.seed)? {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
        }
        cfg
    };
    let layout = DatasetLayout::new(&args.data);
    let map = layout.class_map()?;
    std::fs::create_dir_all(&args.out)?;
    echo_config(&base, &args.out)?;

    let axis_name = match args.axis {
        AblationAxis::Layers => "layers",
        AblationAxis::Window => "window",
        AblationAxis::EncoderEmbedding => "encoder-embedding",
    };
    let mut table = format!("{axis_name}\t{}\n", MetricRow::tsv_header());
    println!("{axis_name}\t{}", MetricRow::tsv_header());
    for value in args.values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut cfg = base.clone();
        apply_axis_value(&mut cfg, args.axis, value)?;
        let (model, _, _, _) = run_training(&cfg, &layout, &map, &args.split, None)?;
        let eval_videos = to_train_videos(&load_split_videos(&layout, &map, &args.eval_split)?)?;
        let (_, refined) = evaluate_videos(&model, &eval_videos)?;
        let row = refined.corpus;
        table.push_str(&format!("{value}\t{}\n", row.to_tsv()));
        println!("{value}\t{}", row.to_tsv());
    }
    let table_path = args.out.join(format!("ablation_{axis_name}.tsv"));
    std::fs::write(&table_path, table)?;
    println!("table: {}", table_path.display());
    Ok(())
}
