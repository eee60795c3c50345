//! `mmvit`: feature extraction, training, evaluation, schedule
//! inspection, checkpoint transfer, and augmentation previews from one
//! binary. Exit codes: 0 success, 1 data error, 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmvit::augment::{augment_batch, LabeledExample, MixEvent};
use mmvit::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use mmvit::config::{Config, Task};
use mmvit::frontend::fbank::logmel_fbank;
use mmvit::frontend::ntc::write_ntc;
use mmvit::frontend::wav::parse_wav;
use mmvit::frontend::{N_MELS, SAMPLE_RATE_HZ, SHIFT_MS, TARGET_FRAMES, WINDOW_MS};
use mmvit::model::{build_schedule, count_params, estimate_flops, Model};
use mmvit::train::{
    evaluate, make_synthetic, read_state, train, Dataset, BEST_CKPT, LAST_CKPT, METRICS_CSV,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── error → exit code plumbing ───────────────────────────────────────

struct CliError {
    exit: u8,
    source: anyhow::Error,
}

type Result<T> = std::result::Result<T, CliError>;

fn usage<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError { exit: 2, source: e.into() }
}

fn data<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError { exit: 1, source: e.into() }
}

impl From<mmvit::config::ConfigError> for CliError {
    fn from(e: mmvit::config::ConfigError) -> Self {
        usage(e)
    }
}

impl From<mmvit::train::TrainError> for CliError {
    fn from(e: mmvit::train::TrainError) -> Self {
        match e {
            mmvit::train::TrainError::Config(c) => usage(c),
            other => data(other),
        }
    }
}

impl From<mmvit::train::DatasetError> for CliError {
    fn from(e: mmvit::train::DatasetError) -> Self {
        data(e)
    }
}

impl From<mmvit::checkpoint::CheckpointError> for CliError {
    fn from(e: mmvit::checkpoint::CheckpointError) -> Self {
        match e {
            mmvit::checkpoint::CheckpointError::Config(c) => usage(c),
            other => data(other),
        }
    }
}

impl From<mmvit::TensorError> for CliError {
    fn from(e: mmvit::TensorError) -> Self {
        data(e)
    }
}

impl From<mmvit::transfer::TransferError> for CliError {
    fn from(e: mmvit::transfer::TransferError) -> Self {
        match e {
            mmvit::transfer::TransferError::Config(c) => usage(c),
            other => data(other),
        }
    }
}

impl From<mmvit::augment::AugmentError> for CliError {
    fn from(e: mmvit::augment::AugmentError) -> Self {
        data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        data(e)
    }
}

/// A user-supplied path that must already exist; missing → usage error.
fn require_file(p: &Path, what: &str) -> Result<()> {
    if !p.is_file() {
        return Err(usage(anyhow::anyhow!("{what} not found: {}", p.display())));
    }
    Ok(())
}

// ── argument shapes ──────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "mmvit", version, about = "Multiscale multiview audio/vision transformer kit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Shared config resolution: preset → optional file → `--set` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset: audio, image, or tiny.
    #[arg(long, default_value = "audio")]
    preset: String,
    /// key=value config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline override, repeatable: --set model.embed_dim=96
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::preset(&self.preset)?;
        if let Some(path) = &self.config {
            require_file(path, "config file")?;
            let text = std::fs::read_to_string(path).map_err(usage)?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_config(cfg: &Config) {
    println!("# resolved config");
    print!("{}", cfg.canonical());
}

#[derive(Subcommand)]
enum Cmd {
    /// Decode WAVs into 1024×128 log-mel NTC tensors.
    ExtractFeatures {
        /// One input file.
        #[arg(long, conflicts_with = "wav_dir")]
        wav: Option<PathBuf>,
        /// Directory scanned for *.wav.
        #[arg(long)]
        wav_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics.csv, and state.txt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (manifest.tsv + classes.txt + features).
        #[arg(long)]
        data: PathBuf,
        /// Held-out set for the per-epoch metric; defaults to --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Run directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Continue from state.txt/last.ckpt in --out.
        #[arg(long)]
        resume: bool,
        /// Ablation: leave the cutmix half of each batch unaltered.
        #[arg(long)]
        no_cutmix: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sample scores as JSON lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the layer schedule, parameter count, and FLOP estimate.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Map an image checkpoint onto an audio config.
    Transfer {
        /// Source checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Target config: preset name or key=value file.
        #[arg(long)]
        to_config: String,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the re-initialized head.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one augmentation batch and write before/after tensors.
    AugmentPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Batch size of the preview.
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_cutmix: bool,
    },
    /// Generate a synthetic labeled dataset for smoke tests.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = TARGET_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = N_MELS)]
        mels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmvit: {:#}", e.source);
            ExitCode::from(e.exit)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::ExtractFeatures { wav, wav_dir, out } => extract_features(wav, wav_dir, &out),
        Cmd::Train { cfg, data, eval_data, out, epochs, seed, resume, no_cutmix } => {
            cmd_train(cfg, &data, eval_data.as_deref(), &out, epochs, seed, resume, no_cutmix)
        }
        Cmd::Eval { cfg, ckpt, data, report } => cmd_eval(cfg, &ckpt, &data, report.as_deref()),
        Cmd::Inspect { cfg } => cmd_inspect(cfg),
        Cmd::Transfer { from, to_config, out, seed } => {
            cmd_transfer(&from, &to_config, &out, seed)
        }
        Cmd::AugmentPreview { cfg, data, count, out, seed, no_cutmix } => {
            cmd_augment_preview(cfg, &data, count, &out, seed, no_cutmix)
        }
        Cmd::MakeSynth { out, count, classes, frames, mels, seed } => {
            make_synthetic(&out, count, classes, frames, mels, seed)?;
            println!(
                "wrote {count} samples ({classes} classes, {frames}x{mels}) to {}",
                out.display()
            );
            Ok(())
        }
    }
}

// ── extract-features ─────────────────────────────────────────────────

fn extract_features(wav: Option<PathBuf>, wav_dir: Option<PathBuf>, out: &Path) -> Result<()> {
    println!("# front-end: sample_rate={SAMPLE_RATE_HZ} window_ms={WINDOW_MS} shift_ms={SHIFT_MS} mels={N_MELS} frames={TARGET_FRAMES}");
    let files: Vec<PathBuf> = match (wav, wav_dir) {
        (Some(f), None) => {
            require_file(&f, "wav file")?;
            vec![f]
        }
        (None, Some(dir)) => {
            if !dir.is_dir() {
                return Err(usage(anyhow::anyhow!("not a directory: {}", dir.display())));
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(data)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .map(|x| x.eq_ignore_ascii_case("wav"))
                        .unwrap_or(false)
                })
                .collect();
            files.sort();
            files
        }
        _ => return Err(usage(anyhow::anyhow!("pass exactly one of --wav or --wav-dir"))),
    };
    if files.is_empty() {
        eprintln!("warning: no wav files found");
        return Ok(());
    }
    std::fs::create_dir_all(out)?;
    let mut failures = 0usize;
    for path in &files {
        match extract_one(path, out) {
            Ok(dest) => println!("{} -> {}", path.display(), dest.display()),
            Err(e) => {
                eprintln!("error: {}: {:#}", path.display(), e);
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(data(anyhow::anyhow!("{failures} of {} files failed", files.len())));
    }
    Ok(())
}

fn extract_one(path: &Path, out: &Path) -> anyhow::Result<PathBuf> {
    let bytes = std::fs::read(path)?;
    let wave = parse_wav(&bytes)?.resampled(SAMPLE_RATE_HZ);
    let spec = logmel_fbank(&wave)?.fit_length(TARGET_FRAMES);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("clip");
    let dest = out.join(format!("{stem}.ntc"));
    write_ntc(&dest, &spec.frames)?;
    Ok(dest)
}

// ── train ────────────────────────────────────────────────────────────

fn check_task(cfg: &Config, ds: &Dataset) -> Result<()> {
    if cfg.model.task == Task::SingleLabel {
        if let Some((i, item)) = ds.items.iter().enumerate().find(|(_, it)| it.labels.len() > 1) {
            return Err(usage(anyhow::anyhow!(
                "model.task is single_label but sample {i} ({}) carries {} labels; \
                 set model.task=multilabel",
                item.path,
                item.labels.len()
            )));
        }
    }
    if cfg.model.num_classes < ds.classes.len() {
        return Err(usage(anyhow::anyhow!(
            "model.num_classes={} but the dataset defines {} classes",
            cfg.model.num_classes,
            ds.classes.len()
        )));
    }
    Ok(())
}

fn note_workers() {
    if let Ok(v) = std::env::var("MMVIT_NUM_WORKERS") {
        if v.trim() != "1" && !v.trim().is_empty() {
            eprintln!(
                "note: MMVIT_NUM_WORKERS={v} requested; the loader runs single-threaded, \
                 which is the only mode with reproducibility guarantees"
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: ConfigArgs,
    dir: &Path,
    eval_dir: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    seed: u64,
    resume: bool,
    no_cutmix: bool,
) -> Result<()> {
    let mut cfg = cfg.resolve()?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if no_cutmix {
        cfg.augment.cutmix = false;
    }
    print_config(&cfg);
    note_workers();

    let dataset = Dataset::open(dir)?;
    let eval_set = Dataset::open(eval_dir.unwrap_or(dir))?;
    check_task(&cfg, &dataset)?;

    let (mut model, start) = if resume {
        let state = read_state(out).ok_or_else(|| {
            usage(anyhow::anyhow!("--resume: no readable state.txt under {}", out.display()))
        })?;
        let model = load_model::<f32>(&cfg, &out.join(LAST_CKPT))?;
        println!(
            "resuming after epoch {} (step {}, best {})",
            state.epochs_done, state.step, state.best
        );
        (model, Some(state))
    } else {
        (Model::<f32>::init(&cfg, seed)?, None)
    };

    let outcome = train(&mut model, &dataset, &eval_set, out, seed, start)?;
    println!(
        "done: {} epochs, {} steps, final loss {:.6}, best metric {:.6}{}",
        outcome.epochs_run,
        outcome.steps,
        outcome.final_loss,
        outcome.best_metric,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    println!(
        "artifacts: {} {} {}",
        out.join(BEST_CKPT).display(),
        out.join(LAST_CKPT).display(),
        out.join(METRICS_CSV).display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn cmd_eval(cfg: ConfigArgs, ckpt: &Path, dir: &Path, report_path: Option<&Path>) -> Result<()> {
    let cfg = cfg.resolve()?;
    print_config(&cfg);
    require_file(ckpt, "checkpoint")?;
    let dataset = Dataset::open(dir)?;
    check_task(&cfg, &dataset)?;
    let model = load_model::<f32>(&cfg, ckpt)?;
    let (report, scores) = evaluate(&model, &dataset)?;

    match (report.map, report.top1) {
        (Some(map), _) => {
            let present = report.per_class_ap.iter().flatten().count();
            println!(
                "mAP={map:.6} over {present}/{} classes with positives, {} samples",
                report.per_class_ap.len(),
                report.samples
            );
        }
        (None, Some(top1)) => println!("top1={top1:.6}, {} samples", report.samples),
        _ => unreachable!("evaluate always fills one metric"),
    }

    if let Some(path) = report_path {
        let mut lines = String::new();
        for (i, row) in scores.iter().enumerate() {
            let rec = serde_json::json!({
                "index": i,
                "path": dataset.items[i].path,
                "labels": dataset.items[i].labels,
                "scores": row,
            });
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
        let summary = match report.map {
            Some(m) => serde_json::json!({"samples": report.samples, "map": m}),
            None => serde_json::json!({"samples": report.samples, "top1": report.top1}),
        };
        lines.push_str(&summary.to_string());
        lines.push('\n');
        std::fs::write(path, lines)?;
        println!("report: {}", path.display());
    }
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────

fn cmd_inspect(cfg: ConfigArgs) -> Result<()> {
    let cfg = cfg.resolve()?;
    print_config(&cfg);
    let sched = build_schedule(&cfg)?;
    println!();
    println!("layer  kind    stage  width      heads  view grids (h x w)          tokens");
    for lp in &sched.layers {
        let grids = lp
            .grids_out
            .iter()
            .map(|(h, w)| format!("{h}x{w}"))
            .collect::<Vec<_>>()
            .join("  ");
        let tokens = (0..lp.grids_out.len())
            .map(|v| lp.tokens_out(v).to_string())
            .collect::<Vec<_>>()
            .join("/");
        println!(
            "{:>5}  {:<6}  {:>5}  {:>4}->{:<4}  {:>5}  {:<26}  {}",
            lp.index,
            lp.kind.label(),
            lp.stage,
            lp.channels_in,
            lp.channels_out,
            lp.heads,
            grids,
            tokens
        );
    }
    println!();
    println!("parameters: {}", count_params(&cfg)?);
    println!("flops/sample (forward, 2*madds): {}", estimate_flops(&cfg)?);
    Ok(())
}

// ── transfer ─────────────────────────────────────────────────────────

fn cmd_transfer(from: &Path, to_config: &str, out: &Path, seed: u64) -> Result<()> {
    require_file(from, "source checkpoint")?;
    let target_path = Path::new(to_config);
    let cfg = if target_path.is_file() {
        let mut cfg = Config::audio();
        cfg.apply_text(&std::fs::read_to_string(target_path).map_err(usage)?)?;
        cfg.validate()?;
        cfg
    } else {
        Config::preset(to_config)?
    };
    print_config(&cfg);
    let raw = load_checkpoint(from)?;
    let (params, plan) = mmvit::transfer::apply_transfer(&raw, &cfg, seed)?;
    print!("{}", plan.render());
    save_checkpoint(&cfg, &params, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

// ── augment-preview ──────────────────────────────────────────────────

fn cmd_augment_preview(
    cfg: ConfigArgs,
    dir: &Path,
    count: usize,
    out: &Path,
    seed: u64,
    no_cutmix: bool,
) -> Result<()> {
    let mut cfg = cfg.resolve()?;
    if no_cutmix {
        cfg.augment.cutmix = false;
    }
    print_config(&cfg);
    let dataset = Dataset::open(dir)?;
    let n = count.min(dataset.len());
    if n == 0 {
        return Err(data(anyhow::anyhow!("dataset is empty")));
    }
    std::fs::create_dir_all(out)?;
    let mut batch: Vec<LabeledExample> = (0..n)
        .map(|i| {
            Ok(LabeledExample { features: dataset.features(i)?, label: dataset.multi_hot(i) })
        })
        .collect::<Result<_>>()?;
    for (i, ex) in batch.iter().enumerate() {
        write_ntc(&out.join(format!("before_{i:02}.ntc")), &ex.features).map_err(data)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = augment_batch(&mut batch, &cfg.augment, &mut rng)?;
    for (i, (ex, ev)) in batch.iter().zip(&events).enumerate() {
        write_ntc(&out.join(format!("after_{i:02}.ntc")), &ex.features).map_err(data)?;
        match ev {
            MixEvent::Mixup { partner, lambda } => {
                println!("sample {i}: mixup with {partner}, lambda={lambda}")
            }
            MixEvent::CutMix { partner, lambda } => {
                println!("sample {i}: cutmix with {partner}, lambda={lambda}")
            }
            MixEvent::Untouched => println!("sample {i}: untouched"),
        }
    }
    println!("wrote {n} before/after pairs to {}", out.display());
    Ok(())
}
