//! `stego`: one entry point for building datasets, training translation
//! models, translating images, and running the evaluation suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every
//! subcommand records its effective configuration, seed, and version in a
//! `run.json` under its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};

use stego_core::cycle::{predict_mask, translate, translate_reverse};
use stego_core::data::{
    build_ratio_dataset, build_synthetic, derive_toponym_mask, detect_glyph_pixels,
    detect_highway_pixels, label_mri_slice, list_images, load_mask, load_raw_image, save_mask,
    save_raw_image, SyntheticWorldConfig,
};
use stego_core::domain::{denormalize_image, normalize_image, DatasetManifest, Domain, ImageTensor};
use stego_core::eval::{
    accuracy_at, aggregate_mask_quality, false_positive_rates, fid_kid, mask_quality, rmse,
    steganography_probe, unmatchable_footprint, DeskEmbedder, DEFAULT_MIN_INSTANCE_PX,
};
use stego_core::networks::{rebuild_networks, NetworkSet};
use stego_core::objectives::GanMode;
use stego_core::training::{
    load_checkpoint, resume, train, Checkpoint, LrSchedule, ModelKind, TrainConfig,
};

/// The CLI runs in single precision.
type S = f32;

#[derive(Parser)]
#[command(
    name = "stego",
    version,
    about = "Unpaired image translation with unmatchable-feature routing",
    subcommand_required = true,
    arg_required_else_help = false
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Construct datasets: synthetic benchmark, ratio-controlled map
    /// selections, toponym masks, or tumor-slice labels.
    #[command(subcommand)]
    BuildDataset(BuildDataset),
    /// Train a model (or resume a checkpoint) on a training manifest.
    Train(TrainArgs),
    /// Translate every image in a directory with a trained model.
    Translate(TranslateArgs),
    /// Compute metrics between generated and reference image directories.
    Evaluate(EvaluateArgs),
    /// Measure reconstruction sensitivity to perturbation of the
    /// intermediate translation.
    ProbeStego(ProbeArgs),
    /// Write predicted unmatchability masks and consistency weights as
    /// grayscale images.
    ExportMasks(ExportMasksArgs),
}

#[derive(Subcommand)]
enum BuildDataset {
    /// Generate the synthetic two-domain benchmark with controllable
    /// unmatchable content.
    Synthetic(SyntheticArgs),
    /// Select a target set with an exact fraction of highway-bearing maps.
    Ratio(RatioArgs),
    /// Derive dilated text masks from aligned map variants with and
    /// without labels.
    ToponymMask(ToponymArgs),
    /// Label tumor-mask slices as tumorous, healthy, or excluded.
    MriLabel(MriLabelArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset(BuildDataset::Synthetic(a)) => cmd_synthetic(a),
        Command::BuildDataset(BuildDataset::Ratio(a)) => cmd_ratio(a),
        Command::BuildDataset(BuildDataset::ToponymMask(a)) => cmd_toponym(a),
        Command::BuildDataset(BuildDataset::MriLabel(a)) => cmd_mri_label(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::ProbeStego(a) => cmd_probe(a),
        Command::ExportMasks(a) => cmd_export_masks(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

/// Write the reproducibility record every command leaves behind.
fn write_run_record(out_dir: &Path, command: &str, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "deterministic": true,
        "config": config,
    });
    let path = out_dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Seed fallback chain for commands whose seed is a plain flag: the flag,
/// then `STEGO_SEED`, then the given default.
fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("STEGO_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .with_context(|| format!("STEGO_SEED must be an unsigned integer, got {text:?}")),
        Err(_) => Ok(default),
    }
}

/// Load every image of a directory, sorted by file name.
fn load_dir(dir: &Path) -> Result<Vec<(String, Array3<u8>)>> {
    let mut out = Vec::new();
    for path in list_images(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = path
            .file_name()
            .expect("listed file has a name")
            .to_string_lossy()
            .into_owned();
        let img = load_raw_image(&path)?;
        out.push((name, img));
    }
    if out.is_empty() {
        bail!("no images found in {}", dir.display());
    }
    Ok(out)
}

/// Pair two listings by file name; every name must appear in both.
fn pair_by_name(
    preds: &[(String, Array3<u8>)],
    targets: &[(String, Array3<u8>)],
) -> Result<Vec<(Array3<u8>, Array3<u8>)>> {
    let mut pairs = Vec::new();
    for (name, p) in preds {
        let Some((_, t)) = targets.iter().find(|(n, _)| n == name) else {
            bail!("no counterpart for {name} in the target directory");
        };
        pairs.push((p.clone(), t.clone()));
    }
    Ok(pairs)
}

fn load_networks(ckpt_path: &Path) -> Result<(NetworkSet<S>, Checkpoint<S>)> {
    let ckpt = load_checkpoint::<S>(ckpt_path)?;
    let nets = rebuild_networks(&ckpt.net_config, ckpt.store.clone())?;
    Ok((nets, ckpt))
}

fn load_image_tensor_checked(
    raw: &Array3<u8>,
    name: &str,
    domain: Domain,
    want_channels: usize,
) -> Result<ImageTensor<S>> {
    if raw.dim().0 != want_channels {
        bail!(
            "{name} has {} channels, the checkpoint was trained on {want_channels}",
            raw.dim().0
        );
    }
    Ok(normalize_image::<S>(raw, domain)?)
}

// ---------------------------------------------------------------------------
// build-dataset.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SyntheticArgs {
    /// Output directory for images and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Square image side in pixels (multiple of 4).
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Training images per domain.
    #[arg(long, default_value_t = 300)]
    train_per_domain: usize,
    /// Aligned glyph-free test pairs.
    #[arg(long, default_value_t = 50)]
    test_pairs: usize,
    /// Fraction of target training images carrying glyphs.
    #[arg(long, default_value_t = 0.4)]
    ratio: f64,
    /// Glyphs per glyph-bearing image.
    #[arg(long, default_value_t = 3)]
    glyph_density: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_synthetic(a: SyntheticArgs) -> Result<()> {
    let cfg = SyntheticWorldConfig {
        resolution: a.resolution,
        n_train_per_domain: a.train_per_domain,
        n_test_pairs: a.test_pairs,
        unmatchable_ratio: a.ratio,
        glyph_density: a.glyph_density,
        seed: resolve_seed(a.seed, SyntheticWorldConfig::default().seed)?,
    };
    let out = build_synthetic(&cfg, &a.out)?;
    write_run_record(
        &a.out,
        "build-dataset synthetic",
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
    )?;
    println!(
        "wrote {} train images per domain ({} with glyphs) and {} test pairs under {}",
        cfg.n_train_per_domain,
        out.glyph_image_count,
        cfg.n_test_pairs,
        a.out.display()
    );
    println!("train manifest: {}", out.train_manifest_path.display());
    println!("test manifest: {}", out.test_manifest_path.display());
    Ok(())
}

#[derive(Args)]
struct RatioArgs {
    /// Directory of source-domain images.
    #[arg(long)]
    source: PathBuf,
    /// Directory of target-domain images to select from.
    #[arg(long)]
    target: PathBuf,
    /// Fraction of selected target images that must contain highways.
    #[arg(long)]
    ratio: f64,
    /// Total target images to select.
    #[arg(long)]
    total: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the manifest.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_ratio(a: RatioArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let manifest = build_ratio_dataset(&a.source, &a.target, a.ratio, a.total, seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("train.manifest");
    manifest.save(&path)?;
    write_run_record(
        &a.out,
        "build-dataset ratio",
        Some(seed),
        serde_json::json!({
            "source": a.source,
            "target": a.target,
            "ratio": a.ratio,
            "total": a.total,
            "achieved_ratio": manifest.unmatchable_ratio,
        }),
    )?;
    println!(
        "selected {} target images ({} highway-bearing), {} source images",
        manifest.target_ids().len(),
        (manifest.unmatchable_ratio * a.total as f64).round() as usize,
        manifest.source_ids().len()
    );
    println!("manifest: {}", path.display());
    Ok(())
}

#[derive(Args)]
struct ToponymArgs {
    /// Maps with text labels.
    #[arg(long)]
    with_text: PathBuf,
    /// The same maps without text labels (same file names).
    #[arg(long)]
    without_text: PathBuf,
    /// Output directory for the mask images.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_toponym(a: ToponymArgs) -> Result<()> {
    let with_text = load_dir(&a.with_text)?;
    let mut written = 0usize;
    for (name, labeled) in &with_text {
        let plain_path = a.without_text.join(name);
        let plain = load_raw_image(&plain_path)
            .with_context(|| format!("no unlabeled counterpart for {name}"))?;
        let mask = derive_toponym_mask(&labeled.view(), &plain.view())?;
        save_mask(&mask.view(), &a.out.join(name))?;
        written += 1;
    }
    write_run_record(
        &a.out,
        "build-dataset toponym-mask",
        None,
        serde_json::json!({
            "with_text": a.with_text,
            "without_text": a.without_text,
            "masks_written": written,
        }),
    )?;
    println!("wrote {written} masks under {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct MriLabelArgs {
    /// Directory of binary tumor masks (grayscale images).
    #[arg(long)]
    masks: PathBuf,
    /// Output directory for `labels.txt`.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_mri_label(a: MriLabelArgs) -> Result<()> {
    let mut lines = Vec::new();
    for path in list_images(&a.masks)? {
        let name = path.file_name().expect("named file").to_string_lossy().into_owned();
        let mask = load_mask(&path)?;
        lines.push(format!("{name}\t{}", label_mri_slice(&mask.view())));
    }
    if lines.is_empty() {
        bail!("no mask images found in {}", a.masks.display());
    }
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("labels.txt");
    fs::write(&path, lines.join("\n") + "\n")?;
    write_run_record(
        &a.out,
        "build-dataset mri-label",
        None,
        serde_json::json!({ "masks": a.masks, "slices": lines.len() }),
    )?;
    println!("labeled {} slices: {}", lines.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, loss log, and run record.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accepted for compatibility; execution is always deterministic.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    gan_mode: Option<GanMode>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    encoder_depth: Option<i32>,
    #[arg(long)]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    lambda_id: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_match: Option<f64>,
    /// Perturbation noise amplitude.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    adv_on_clean: Option<bool>,
}

/// Flags override file values override defaults; `STEGO_SEED` slots in
/// below an explicit seed from either source.
fn effective_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let file_text = a
        .config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let mut cfg = match &file_text {
        Some(text) => TrainConfig::from_toml_str(text)?,
        None => TrainConfig::default(),
    };
    let file_sets_seed = file_text
        .as_deref()
        .and_then(|t| t.parse::<toml::Value>().ok())
        .map(|v| v.get("seed").is_some())
        .unwrap_or(false);
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !file_sets_seed {
        cfg.seed = resolve_seed(None, cfg.seed)?;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(cfg.hp.epochs, a.epochs);
    set!(cfg.model, a.model);
    set!(cfg.gan_mode, a.gan_mode);
    set!(cfg.hp.batch_size, a.batch_size);
    set!(cfg.hp.base_width, a.base_width);
    set!(cfg.hp.encoder_depth, a.encoder_depth);
    set!(cfg.hp.lambda_cyc, a.lambda_cyc);
    set!(cfg.hp.lambda_id, a.lambda_id);
    set!(cfg.hp.lambda_reg, a.lambda_reg);
    set!(cfg.hp.lambda_match, a.lambda_match);
    set!(cfg.hp.epsilon_amplitude, a.epsilon);
    set!(cfg.hp.learning_rate, a.learning_rate);
    set!(cfg.pool_size, a.pool_size);
    set!(cfg.checkpoint_every, a.checkpoint_every);
    set!(cfg.lr_schedule, a.lr_schedule);
    set!(cfg.adv_on_clean, a.adv_on_clean);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = effective_train_config(&a)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let manifest_dir = a.data.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_run_record(&a.out, "train", Some(cfg.seed), serde_json::to_value(&cfg)?)?;
    let outcome = match &a.resume {
        Some(ckpt) => resume::<S>(ckpt, &manifest, &manifest_dir, &cfg, &a.out)?,
        None => train::<S>(&manifest, &manifest_dir, &cfg, &a.out)?,
    };
    println!(
        "ran {} iterations; checkpoint: {}",
        outcome.iterations_run,
        outcome.checkpoint_path.display()
    );
    println!("loss log: {}", outcome.log_path.display());
    if let Some(report) = outcome.final_report {
        println!("final losses: gen {:.6}, disc {:.6}", report.total_gen, report.total_disc);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// translate.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TranslateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of input images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; file names are preserved.
    #[arg(long)]
    out: PathBuf,
    /// Translate target-domain images back to the source domain.
    #[arg(long)]
    reverse: bool,
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let (nets, ckpt) = load_networks(&a.ckpt)?;
    let images = load_dir(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let (in_domain, want_channels) = if a.reverse {
        (Domain::Y, ckpt.net_config.y_channels)
    } else {
        (Domain::X, ckpt.net_config.x_channels)
    };
    for (name, raw) in &images {
        let tensor = load_image_tensor_checked(raw, name, in_domain, want_channels)?;
        let translated = if a.reverse {
            translate_reverse(&nets, &tensor)
        } else {
            translate(&nets, &tensor)
        };
        save_raw_image(&denormalize_image(&translated).view(), &a.out.join(name))?;
    }
    write_run_record(
        &a.out,
        "translate",
        Some(ckpt.config.seed),
        serde_json::json!({
            "ckpt": a.ckpt,
            "reverse": a.reverse,
            "images": images.len(),
            "model": serde_json::to_value(ckpt.config.model)?,
        }),
    )?;
    println!("translated {} images into {}", images.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of generated images.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference images.
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated list from rmse,acc,fpr,fid,kid,mask.
    #[arg(long, default_value = "rmse,acc,fpr,fid,kid")]
    metrics: String,
    /// Output directory for the report and run record.
    #[arg(long)]
    out: PathBuf,
    /// Report file (defaults to `<out>/report.txt`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accuracy thresholds.
    #[arg(long, default_value_t = 5.0)]
    sigma1: f64,
    #[arg(long, default_value_t = 10.0)]
    sigma2: f64,
    /// Pixel rule for false positives: glyph or highway.
    #[arg(long, default_value = "glyph")]
    detector: String,
    /// Minimum component area for an instance-level false positive.
    #[arg(long, default_value_t = DEFAULT_MIN_INSTANCE_PX)]
    min_instance_px: usize,
    /// Checkpoint for the mask metric.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Ground-truth mask directory for the mask metric (file names match
    /// the target directory).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Seed for the kernel-distance subsets and the feature embedder.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let metrics: Vec<&str> = a.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    for m in &metrics {
        if !["rmse", "acc", "fpr", "fid", "kid", "mask"].contains(m) {
            bail!("unknown metric {m:?} (expected rmse,acc,fpr,fid,kid,mask)");
        }
    }
    if metrics.is_empty() {
        bail!("no metrics requested");
    }
    let seed = resolve_seed(a.seed, 0)?;
    let preds = load_dir(&a.pred)?;
    let targets = load_dir(&a.target)?;
    let mut lines: Vec<String> = Vec::new();

    let needs_pairs = metrics.iter().any(|m| ["rmse", "acc"].contains(m));
    let pairs = if needs_pairs { pair_by_name(&preds, &targets)? } else { Vec::new() };
    let pred_set: Vec<Array3<u8>> = pairs.iter().map(|(p, _)| p.clone()).collect();
    let target_set: Vec<Array3<u8>> = pairs.iter().map(|(_, t)| t.clone()).collect();

    for metric in &metrics {
        match *metric {
            "rmse" => {
                lines.push(format!("rmse={:.6}", rmse(&pred_set, &target_set)?));
            }
            "acc" => {
                lines.push(format!(
                    "acc_sigma1={:.6}",
                    accuracy_at(&pred_set, &target_set, a.sigma1)?
                ));
                lines.push(format!(
                    "acc_sigma2={:.6}",
                    accuracy_at(&pred_set, &target_set, a.sigma2)?
                ));
            }
            "fpr" => {
                let all_preds: Vec<Array3<u8>> =
                    preds.iter().map(|(_, p)| p.clone()).collect();
                let detector = match a.detector.as_str() {
                    "glyph" => detect_glyph_pixels,
                    "highway" => detect_highway_pixels,
                    other => bail!("unknown detector {other:?} (expected glyph|highway)"),
                };
                let fpr = false_positive_rates(
                    &all_preds,
                    |img| detector(img).map_err(|e| e.to_string()),
                    a.min_instance_px,
                )?;
                lines.push(format!("pfpr={:.6}", fpr.p_fpr));
                lines.push(format!("ifpr={:.6}", fpr.i_fpr));
            }
            "fid" | "kid" => {
                // Computed together once.
                if lines.iter().any(|l| l.starts_with("fid=") || l.starts_with("kid=")) {
                    continue;
                }
                let all_preds: Vec<Array3<u8>> =
                    preds.iter().map(|(_, p)| p.clone()).collect();
                let all_targets: Vec<Array3<u8>> =
                    targets.iter().map(|(_, t)| t.clone()).collect();
                let channels = all_targets[0].dim().0;
                let embedder = DeskEmbedder::new(channels, seed);
                let d = fid_kid(&all_targets, &all_preds, &embedder, seed)?;
                if metrics.contains(&"fid") {
                    lines.push(format!("fid={:.6}", d.fid));
                }
                if metrics.contains(&"kid") {
                    lines.push(format!("kid={:.6}", d.kid_x1000));
                }
            }
            "mask" => {
                let (Some(ckpt_path), Some(mask_dir)) = (&a.ckpt, &a.masks) else {
                    bail!("the mask metric needs --ckpt and --masks");
                };
                let (nets, ckpt) = load_networks(ckpt_path)?;
                let mut qualities = Vec::new();
                for (name, raw) in &targets {
                    let gt = load_mask(&mask_dir.join(name))
                        .with_context(|| format!("no ground-truth mask for {name}"))?;
                    let y = load_image_tensor_checked(
                        raw,
                        name,
                        Domain::Y,
                        ckpt.net_config.y_channels,
                    )?;
                    let m = predict_mask(&nets, &y);
                    let footprint = unmatchable_footprint(&m, gt.dim())?;
                    qualities.push(mask_quality(&footprint.view(), &gt.view())?);
                }
                let agg = aggregate_mask_quality(&qualities)?;
                let fmt_opt = |v: Option<f64>| {
                    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
                };
                lines.push(format!("miou={:.6}", agg.iou));
                lines.push(format!("precision={}", fmt_opt(agg.precision)));
                lines.push(format!("recall={}", fmt_opt(agg.recall)));
            }
            _ => unreachable!("validated above"),
        }
    }

    fs::create_dir_all(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.out.join("report.txt"));
    fs::write(&report_path, lines.join("\n") + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    write_run_record(
        &a.out,
        "evaluate",
        Some(seed),
        serde_json::json!({
            "pred": a.pred,
            "target": a.target,
            "metrics": metrics,
            "sigma1": a.sigma1,
            "sigma2": a.sigma2,
            "detector": a.detector,
            "min_instance_px": a.min_instance_px,
            "report": report_path,
        }),
    )?;
    for line in &lines {
        println!("{line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// probe-stego.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ProbeArgs {
    /// Trained checkpoint (the probe runs in its training mode).
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of target-domain images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of ground-truth unmatchable masks (same file names).
    #[arg(long)]
    masks: PathBuf,
    /// Comma-separated perturbation amplitudes.
    #[arg(long, default_value = "0,0.005,0.01,0.02")]
    amplitudes: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let amplitudes: Vec<f64> = a
        .amplitudes
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad amplitude {s:?}")))
        .collect::<Result<_>>()?;
    let seed = resolve_seed(a.seed, 0)?;
    let (nets, ckpt) = load_networks(&a.ckpt)?;
    let mut ys = Vec::new();
    let mut gts = Vec::new();
    for (name, raw) in &load_dir(&a.images)? {
        let gt = load_mask(&a.masks.join(name))
            .with_context(|| format!("no mask for {name}"))?;
        ys.push(load_image_tensor_checked(raw, name, Domain::Y, ckpt.net_config.y_channels)?);
        gts.push(gt);
    }
    let rows = steganography_probe(
        &nets,
        ckpt.config.model.cycle_mode(),
        &ys,
        &gts,
        &amplitudes,
        seed,
    )?;
    let mut table = String::from("amplitude unmatchable_error matchable_error\n");
    for r in &rows {
        table.push_str(&format!(
            "{:.6} {:.6} {:.6}\n",
            r.amplitude, r.unmatchable_error, r.matchable_error
        ));
    }
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("probe.txt");
    fs::write(&path, &table)?;
    write_run_record(
        &a.out,
        "probe-stego",
        Some(seed),
        serde_json::json!({
            "ckpt": a.ckpt,
            "images": a.images,
            "masks": a.masks,
            "amplitudes": amplitudes,
            "model": serde_json::to_value(ckpt.config.model)?,
        }),
    )?;
    print!("{table}");
    println!("table: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// export-masks.
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ExportMasksArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of target-domain images.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory; writes `<stem>_mask.png` (unmatchable footprint)
    /// and `<stem>_consistency.png` per input.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_export_masks(a: ExportMasksArgs) -> Result<()> {
    let (nets, ckpt) = load_networks(&a.ckpt)?;
    let images = load_dir(&a.input)?;
    fs::create_dir_all(&a.out)?;
    for (name, raw) in &images {
        let y = load_image_tensor_checked(raw, name, Domain::Y, ckpt.net_config.y_channels)?;
        let (_, h, w) = y.data.dim();
        let m = predict_mask(&nets, &y);
        let footprint = unmatchable_footprint(&m, (h, w))?;
        let to_gray = |plane: &Array2<f64>| {
            Array3::from_shape_fn((1, h, w), |(_, i, j)| {
                (plane[[i, j]].clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
            })
        };
        let consistency = footprint.mapv(|v| 1.0 - v);
        let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
        save_raw_image(&to_gray(&footprint).view(), &a.out.join(format!("{stem}_mask.png")))?;
        save_raw_image(
            &to_gray(&consistency).view(),
            &a.out.join(format!("{stem}_consistency.png")),
        )?;
    }
    write_run_record(
        &a.out,
        "export-masks",
        Some(ckpt.config.seed),
        serde_json::json!({ "ckpt": a.ckpt, "images": images.len() }),
    )?;
    println!("exported masks for {} images into {}", images.len(), a.out.display());
    Ok(())
}
