//! Command-line driver wiring corpus synthesis, training, evaluation and
//! activation analysis into reproducible runs. Every run directory receives
//! the fully resolved configuration; all randomness flows from one seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emocascade::checkpoint::{self, Checkpoint};
use emocascade::data::{
    build_training_samples, compute_accuracy, generate_synthetic_corpus, preprocess,
    DatasetManifest, Split,
};
use emocascade::explain::{render_overlay, run_overlap_analysis, OverlapOptions, ReferenceShape};
use emocascade::geometry::CanonicalShape;
use emocascade::network::{ArchConfig, ModelState};
use emocascade::training::train_stage;
use emocascade::types::{
    ContemptPolicy, EmotionLabel, EmotionScheme, Frame, LandmarkSet, Point, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "emocascade",
    version,
    about = "Cascaded face alignment with joint emotion recognition: training, evaluation and activation analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a synthetic cartoon-face corpus with exact landmark ground truth
    Synth(SynthArgs),
    /// Train the cascade stage by stage on a manifest
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint: per-dataset accuracy and confusion matrices
    Eval(EvalArgs),
    /// Per-emotion activation maps, top-k landmarks and the overlap report
    Explain(ExplainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (images under images/, manifest.csv alongside)
    #[arg(long)]
    out: PathBuf,
    /// Number of faces to generate
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label scheme the class rotation covers: "seven" or "three"
    #[arg(long, default_value = "seven")]
    scheme: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV; may also come from the config file
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory for checkpoint, logs and the resolved config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value config file; command-line flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    max_lr: Option<f64>,
    /// Half-cycle of the triangular schedule in iterations; 0 = two epochs
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum epochs per stage
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
    /// Fate of contempt labels in seven-class training: "drop" or "happiness"
    #[arg(long)]
    contempt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    test_frac: Option<f64>,
    /// Network input side; the full-size profile uses 224
    #[arg(long)]
    input_size: Option<usize>,
    /// Comma-separated channel widths of the four conv blocks, e.g. 64,128,256,512
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    fc1_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Records to evaluate: all, train, val or test
    #[arg(long, default_value = "all")]
    split: String,
    /// Seed reproducing the training run's split assignment
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    test_frac: f64,
    /// When given, must match the checkpoint's scheme
    #[arg(long)]
    scheme: Option<String>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Eye-corner threshold (px) of the frontal subset
    #[arg(long, default_value_t = 11.2)]
    epsilon: f64,
    /// Shape the mean maps are sampled at: "mean" or "per-image"
    #[arg(long, default_value = "mean")]
    reference: String,
    /// Records to analyze: all, train, val or test
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    test_frac: f64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Commands::Synth(args) => cmd_synth(args),
        Commands::Train(args) => cmd_train(*args),
        Commands::Eval(args) => cmd_eval(args),
        Commands::Explain(args) => cmd_explain(args),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let scheme = EmotionScheme::parse(&args.scheme)?;
    let manifest = generate_synthetic_corpus(args.count, args.seed, scheme, &args.out)?;
    println!(
        "wrote {} images and manifest.csv to {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Fully resolved training run: defaults, then config file, then flags.
struct ResolvedTrain {
    manifest: PathBuf,
    out: PathBuf,
    cfg: TrainConfig,
    arch: ArchConfig,
    seed: u64,
    val_frac: f64,
    test_frac: f64,
}

fn parse_channels(s: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("channels must list four comma-separated widths, got {s:?}");
    }
    let mut out = [0usize; 4];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .with_context(|| format!("bad channel width {p:?}"))?;
    }
    Ok(out)
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let mut cfg = TrainConfig::default();
    let mut arch = ArchConfig::full();
    let mut seed = 0u64;
    let mut val_frac = 0.15f64;
    let mut test_frac = 0.15f64;
    let mut manifest: Option<PathBuf> = None;
    let mut out: Option<PathBuf> = None;

    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {} is not key = value", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let ctx = || format!("config line {} ({key})", lineno + 1);
            match key {
                "alpha" => cfg.alpha = value.parse().with_context(ctx)?,
                "beta" => cfg.beta = value.parse().with_context(ctx)?,
                "base_lr" => cfg.base_lr = value.parse().with_context(ctx)?,
                "max_lr" => cfg.max_lr = value.parse().with_context(ctx)?,
                "step_size" => cfg.step_size = value.parse().with_context(ctx)?,
                "dropout_p" => cfg.dropout_p = value.parse().with_context(ctx)?,
                "stages" => cfg.stages = value.parse().with_context(ctx)?,
                "emotion_scheme" => cfg.emotion_scheme = EmotionScheme::parse(value)?,
                "momentum" => cfg.momentum = value.parse().with_context(ctx)?,
                "batch_size" => cfg.batch_size = value.parse().with_context(ctx)?,
                "epochs" => cfg.epochs = value.parse().with_context(ctx)?,
                "patience" => cfg.patience = value.parse().with_context(ctx)?,
                "min_delta" => cfg.min_delta = value.parse().with_context(ctx)?,
                "contempt_policy" => cfg.contempt_policy = ContemptPolicy::parse(value)?,
                "input_size" => arch.input_size = value.parse().with_context(ctx)?,
                "channels" => arch.channels = parse_channels(value)?,
                "fc1_size" => arch.fc1_size = value.parse().with_context(ctx)?,
                "seed" => seed = value.parse().with_context(ctx)?,
                "val_frac" => val_frac = value.parse().with_context(ctx)?,
                "test_frac" => test_frac = value.parse().with_context(ctx)?,
                "manifest" => manifest = Some(PathBuf::from(value)),
                "out" => out = Some(PathBuf::from(value)),
                other => bail!("config line {}: unknown key {other:?}", lineno + 1),
            }
        }
    }

    // Flags override the config file.
    if let Some(v) = &args.scheme {
        cfg.emotion_scheme = EmotionScheme::parse(v)?;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.max_lr {
        cfg.max_lr = v;
    }
    if let Some(v) = args.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout_p = v;
    }
    if let Some(v) = args.stages {
        cfg.stages = v;
    }
    if let Some(v) = args.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.min_delta {
        cfg.min_delta = v;
    }
    if let Some(v) = &args.contempt {
        cfg.contempt_policy = ContemptPolicy::parse(v)?;
    }
    if let Some(v) = args.seed {
        seed = v;
    }
    if let Some(v) = args.val_frac {
        val_frac = v;
    }
    if let Some(v) = args.test_frac {
        test_frac = v;
    }
    if let Some(v) = args.input_size {
        arch.input_size = v;
    }
    if let Some(v) = &args.channels {
        arch.channels = parse_channels(v)?;
    }
    if let Some(v) = args.fc1_size {
        arch.fc1_size = v;
    }
    if let Some(v) = &args.manifest {
        manifest = Some(v.clone());
    }
    if let Some(v) = &args.out {
        out = Some(v.clone());
    }

    cfg.validate()?;
    arch.validate()?;
    Ok(ResolvedTrain {
        manifest: manifest.context("no manifest given (flag --manifest or config key)")?,
        out: out.context("no output directory given (flag --out or config key)")?,
        cfg,
        arch,
        seed,
        val_frac,
        test_frac,
    })
}

fn write_resolved_config(r: &ResolvedTrain, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "manifest = {}", r.manifest.display())?;
    writeln!(f, "out = {}", r.out.display())?;
    writeln!(f, "seed = {}", r.seed)?;
    writeln!(f, "val_frac = {}", r.val_frac)?;
    writeln!(f, "test_frac = {}", r.test_frac)?;
    writeln!(f, "emotion_scheme = {}", r.cfg.emotion_scheme.as_str())?;
    writeln!(f, "alpha = {}", r.cfg.alpha)?;
    writeln!(f, "beta = {}", r.cfg.beta)?;
    writeln!(f, "base_lr = {}", r.cfg.base_lr)?;
    writeln!(f, "max_lr = {}", r.cfg.max_lr)?;
    writeln!(f, "step_size = {}", r.cfg.step_size)?;
    writeln!(f, "dropout_p = {}", r.cfg.dropout_p)?;
    writeln!(f, "stages = {}", r.cfg.stages)?;
    writeln!(f, "momentum = {}", r.cfg.momentum)?;
    writeln!(f, "batch_size = {}", r.cfg.batch_size)?;
    writeln!(f, "epochs = {}", r.cfg.epochs)?;
    writeln!(f, "patience = {}", r.cfg.patience)?;
    writeln!(f, "min_delta = {}", r.cfg.min_delta)?;
    writeln!(f, "contempt_policy = {}", r.cfg.contempt_policy.as_str())?;
    writeln!(f, "input_size = {}", r.arch.input_size)?;
    writeln!(
        f,
        "channels = {},{},{},{}",
        r.arch.channels[0], r.arch.channels[1], r.arch.channels[2], r.arch.channels[3]
    )?;
    writeln!(f, "fc1_size = {}", r.arch.fc1_size)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let run = resolve_train(&args)?;
    fs::create_dir_all(&run.out)?;

    let loaded = DatasetManifest::load(&run.manifest)?;
    if loaded.rejected_missing_landmarks > 0 {
        println!(
            "skipped {} records without landmark annotations",
            loaded.rejected_missing_landmarks
        );
    }
    let mut manifest = loaded.manifest;
    manifest.assign_splits(run.val_frac, run.test_frac, run.seed)?;
    let stats = manifest.compute_stats()?;

    let scheme = run.cfg.emotion_scheme;
    let policy = run.cfg.contempt_policy;
    let (train_samples, skipped_train) =
        build_training_samples(&manifest, Split::Train, &stats, scheme, policy)?;
    let (val_samples, skipped_val) =
        build_training_samples(&manifest, Split::Val, &stats, scheme, policy)?;
    if skipped_train + skipped_val > 0 {
        println!(
            "excluded {} samples whose labels do not map into the {} scheme",
            skipped_train + skipped_val,
            scheme.as_str()
        );
    }
    if train_samples.is_empty() || val_samples.is_empty() {
        bail!(
            "need non-empty train and validation splits after label mapping \
             (train {}, val {})",
            train_samples.len(),
            val_samples.len()
        );
    }

    let shapes: Vec<LandmarkSet> = train_samples.iter().map(|s| s.landmarks.clone()).collect();
    let canonical = CanonicalShape::from_training_shapes(&shapes, run.arch.input_size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut model = ModelState::new(
        run.arch,
        scheme,
        run.cfg.stages,
        canonical.landmarks().clone(),
        &mut rng,
    )?;

    for stage in 0..run.cfg.stages {
        let log = train_stage(
            &mut model,
            stage,
            &train_samples,
            &val_samples,
            &run.cfg,
            &mut rng,
        )?;
        let path = run.out.join(format!("training_log_stage{}.csv", stage + 1));
        let file = fs::File::create(&path)
            .with_context(|| format!("cannot write training log {}", path.display()))?;
        log.write_csv(file)?;
        let last = log.records.last().expect("at least one epoch");
        println!(
            "stage {}: {} epochs, best val loss {:.6} at epoch {}, final val accuracy {:.3}{}",
            stage + 1,
            log.records.len(),
            log.best_val_total,
            log.best_epoch,
            last.val_accuracy,
            if log.stopped_early {
                " (early stop)"
            } else {
                ""
            }
        );
    }

    let ckpt = Checkpoint {
        model,
        train_config: run.cfg.clone(),
        norm_stats: stats,
    };
    let ckpt_path = run.out.join("checkpoint.npz");
    checkpoint::save(&ckpt, &ckpt_path)?;
    write_resolved_config(&run, &run.out.join("resolved_config.txt"))?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn select_records(
    manifest: &mut DatasetManifest,
    split: &str,
    seed: u64,
    val_frac: f64,
    test_frac: f64,
) -> Result<Vec<usize>> {
    if split == "all" {
        return Ok((0..manifest.records.len()).collect());
    }
    let split = Split::parse(split)?;
    manifest.assign_splits(val_frac, test_frac, seed)?;
    Ok(manifest.indices_of(split))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    if let Some(s) = &args.scheme {
        let requested = EmotionScheme::parse(s)?;
        if requested != ckpt.model.scheme {
            bail!(
                "scheme mismatch: checkpoint was trained with {:?}, run requests {:?}",
                ckpt.model.scheme,
                requested
            );
        }
    }
    fs::create_dir_all(&args.out)?;

    let mut manifest = DatasetManifest::load(&args.manifest)?.manifest;
    let indices = select_records(
        &mut manifest,
        &args.split,
        args.seed,
        args.val_frac,
        args.test_frac,
    )?;
    if indices.is_empty() {
        bail!(
            "no records in the {:?} split of {}",
            args.split,
            args.manifest.display()
        );
    }

    // Predictions grouped by dataset tag, one report row per tag.
    let scheme = ckpt.model.scheme;
    let policy = ckpt.train_config.contempt_policy;
    let mut by_tag: BTreeMap<String, (Vec<EmotionLabel>, Vec<EmotionLabel>)> = BTreeMap::new();
    let mut skipped = 0usize;
    for &i in &indices {
        let rec = &manifest.records[i];
        let Some(gt) = rec.label.map_to_scheme(scheme, policy) else {
            skipped += 1;
            continue;
        };
        let (image, _) = preprocess(rec, &ckpt.norm_stats, &manifest.root)?;
        let outputs = ckpt.model.forward(&image)?;
        let (_, dist) = outputs.last().expect("at least one stage");
        let pred = EmotionLabel::new(dist.argmax(), scheme)?;
        let entry = by_tag.entry(rec.dataset.clone()).or_default();
        entry.0.push(pred);
        entry.1.push(gt);
    }
    if skipped > 0 {
        println!(
            "excluded {skipped} samples whose labels do not map into the {} scheme",
            scheme.as_str()
        );
    }
    if by_tag.is_empty() {
        bail!("no evaluable samples after label mapping");
    }

    let mut report = String::from("dataset,n_samples,accuracy\n");
    for (tag, (preds, gts)) in &by_tag {
        let (acc, confusion) = compute_accuracy(preds, gts)?;
        report.push_str(&format!("{tag},{},{acc:.6}\n", preds.len()));
        let file = fs::File::create(args.out.join(format!("confusion_{tag}.csv")))?;
        confusion.write_csv(file)?;
        println!("{tag}: accuracy {acc:.4} over {} samples", preds.len());
    }
    fs::write(args.out.join("accuracy.csv"), report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// explain
// ---------------------------------------------------------------------------

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    if ckpt.model.scheme != EmotionScheme::Seven {
        bail!("activation analysis needs a seven-class checkpoint; this one is three-class");
    }
    fs::create_dir_all(&args.out)?;

    let reference = match args.reference.as_str() {
        "mean" => ReferenceShape::MeanFrontal,
        "per-image" => ReferenceShape::PerImage,
        other => bail!("unknown reference {other:?} (expected \"mean\" or \"per-image\")"),
    };

    let mut manifest = DatasetManifest::load(&args.manifest)?.manifest;
    let indices = select_records(
        &mut manifest,
        &args.split,
        args.seed,
        args.val_frac,
        args.test_frac,
    )?;

    let policy = ckpt.train_config.contempt_policy;
    let mut samples = Vec::new();
    for &i in &indices {
        let rec = &manifest.records[i];
        let Some(label) = rec.label.map_to_scheme(EmotionScheme::Seven, policy) else {
            continue;
        };
        let (image, landmarks) = preprocess(rec, &ckpt.norm_stats, &manifest.root)?;
        samples.push((image, landmarks, label));
    }

    let opts = OverlapOptions {
        epsilon: args.epsilon,
        reference,
    };
    let report = run_overlap_analysis(&ckpt.model, &samples, &opts)?;

    let mut csv = String::from("emotion,layer,k,overlap,n_images\n");
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            row.emotion,
            row.layer.as_str(),
            row.k,
            row.overlap,
            row.n_images
        ));
    }
    for (layer, avg) in &report.layer_averages {
        csv.push_str(&format!("average,{},,{avg:.6},\n", layer.as_str()));
    }
    fs::write(args.out.join("overlap_report.csv"), &csv)?;

    for overlay in &report.overlays {
        // Mark only the top-k landmarks: the rest are parked off-canvas and
        // skipped by the renderer's bounds check.
        let marks = LandmarkSet::new(
            overlay
                .reference
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if overlay.top_k.contains(&i) {
                        *p
                    } else {
                        Point::new(-100.0, -100.0)
                    }
                })
                .collect(),
            Frame::Image,
        )?;
        let path = args.out.join(format!(
            "overlay_{}_{}.png",
            overlay.emotion,
            overlay.layer.as_str()
        ));
        render_overlay(&overlay.mean_image, &overlay.mean_map, Some(&marks), &path)?;
    }

    println!(
        "analyzed {} frontal samples; report and {} overlays written to {}",
        report.frontal_size,
        report.overlays.len(),
        args.out.display()
    );
    for (layer, avg) in &report.layer_averages {
        println!("{} average overlap: {avg:.4}", layer.as_str());
    }
    Ok(())
}
