//! Command-line entry point: dataset synthesis, training, tiled inference,
//! evaluation, score arithmetic, and gradient checking.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numeric failure.

use clap::{ArgAction, Parser, Subcommand};
use lrnet::config::{Ablation, RunConfig};
use lrnet::data::{
    load_samples, read_image_pgm, read_mask_pgm, read_manifest, synth_generate, write_dataset,
    write_mask_pgm, ManifestEntry, Split,
};
use lrnet::error::{Error, Result};
use lrnet::gradcheck::{run_suite, worst_result, VERIFIED_SEEDS};
use lrnet::infer::{sliding_infer, threshold_mask};
use lrnet::metrics::{score, EvalReport, MetricAccumulator};
use lrnet::model::{LrNet, WeightStore};
use lrnet::train::train;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "lrnet",
    version,
    about = "Lightweight infrared small-target segmentation",
    disable_help_subcommand = true
)]
struct Cli {
    /// Flat `key = value` configuration file; flags override file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// RNG seed for synthesis, initialization, and training.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for tiled inference (1 = serial).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Window side in pixels: the inference tile and training crop
    /// (multiple of 32).
    #[arg(long, global = true, value_name = "N")]
    window: Option<usize>,

    /// Stage width multiplier: 0.5, 1, 2, or 4.
    #[arg(long = "channel-mult", global = true, value_name = "M")]
    channel_mult: Option<f64>,

    /// Disable one module class (repeatable):
    /// no-lfea, no-lfd, no-rft, no-sbam.
    #[arg(long, global = true, value_name = "VARIANT", action = ArgAction::Append,
          value_parser = Ablation::from_str)]
    ablate: Vec<Ablation>,

    /// Binarization threshold on predicted probabilities, in [0, 1].
    #[arg(long, global = true, value_name = "F")]
    tau: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/test manifest.
    Synth {
        /// Dataset directory to write.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Number of samples to generate.
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Train on the manifest's train split; writes weights and a loss log.
    Train {
        /// Dataset directory (as written by `synth`).
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Directory for weights and the log.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Warm-start from an earlier weight file.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Override the configured epoch count.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Override the configured batch size.
        #[arg(long = "batch-size", value_name = "N")]
        batch_size: Option<usize>,
    },
    /// Segment dataset images by sliding-window inference; writes binary
    /// masks named like the ground-truth files.
    Infer {
        /// Weight file to load.
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Dataset directory holding the images to segment.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Directory for predicted masks.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Manifest split to process: train, test, or all.
        #[arg(long, value_name = "WHICH", default_value = "all")]
        split: String,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of predicted masks (paired with ground truth by file
        /// name; defaults to the output directory).
        #[arg(long, value_name = "DIR")]
        pred_dir: Option<PathBuf>,
        /// Dataset directory holding the ground-truth masks.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Manifest split to evaluate: train, test, or all.
        #[arg(long, value_name = "WHICH", default_value = "all")]
        split: String,
    },
    /// Challenge score from IoU %, Pd %, params (millions), FLOPs (billions).
    Score { iou: f64, pd: f64, params: f64, flops: f64 },
    /// Finite-difference verification of every backward pass.
    Gradcheck {
        /// How many verified seeds to run (1..=10).
        #[arg(long, value_name = "N", default_value_t = 2)]
        seeds: usize,
        /// Skip the (slow) composed-network check.
        #[arg(long)]
        layers_only: bool,
        /// Deliberately falsify one result to prove failures are caught.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.threads {
        cfg.threads = v;
    }
    if let Some(v) = cli.window {
        cfg.window = v;
    }
    if let Some(v) = cli.channel_mult {
        cfg.channel_mult = v;
    }
    if !cli.ablate.is_empty() {
        cfg.ablate = cli.ablate.clone();
    }
    if let Some(v) = cli.tau {
        cfg.tau = v;
    }
    if cfg.threads == 0 {
        return Err(Error::Config("threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::Synth { data_dir, count } => {
            if let Some(dir) = data_dir {
                cfg.data_dir = dir;
            }
            if let Some(n) = count {
                cfg.count = n;
            }
            cmd_synth(&cfg)
        }
        Command::Train { data_dir, out_dir, resume, epochs, batch_size } => {
            if let Some(dir) = data_dir {
                cfg.data_dir = dir;
            }
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            if let Some(n) = epochs {
                cfg.epochs = n;
            }
            if let Some(n) = batch_size {
                cfg.batch_size = n;
            }
            cmd_train(&cfg, resume.as_deref())
        }
        Command::Infer { weights, data_dir, out_dir, split } => {
            if let Some(path) = weights {
                cfg.weights = path;
            }
            if let Some(dir) = data_dir {
                cfg.data_dir = dir;
            }
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            cmd_infer(&cfg, parse_split(&split)?)
        }
        Command::Eval { pred_dir, data_dir, split } => {
            if let Some(dir) = data_dir {
                cfg.data_dir = dir;
            }
            let pred_dir = pred_dir.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_eval(&cfg, &pred_dir, parse_split(&split)?)
        }
        Command::Score { iou, pd, params, flops } => cmd_score(iou, pd, params, flops),
        Command::Gradcheck { seeds, layers_only, corrupt } => {
            cmd_gradcheck(seeds, layers_only, corrupt)
        }
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "all" => Ok(None),
        other => other
            .parse::<Split>()
            .map(Some)
            .map_err(|_| Error::Config(format!("split must be train, test, or all, got {other:?}"))),
    }
}

fn in_split(entry: &ManifestEntry, split: Option<Split>) -> bool {
    split.is_none_or(|s| entry.split == s)
}

fn create_dir(dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let samples = synth_generate(&cfg.synth_config())?;
    create_dir(&cfg.data_dir)?;
    let entries = write_dataset(&cfg.data_dir, &samples)?;
    let train = entries.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "wrote {} samples to {} ({} train / {} test)",
        entries.len(),
        cfg.data_dir.display(),
        train,
        entries.len() - train
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&std::path::Path>) -> Result<()> {
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let train_set = load_samples(&cfg.data_dir, Some(Split::Train))?;
    let val_set = load_samples(&cfg.data_dir, Some(Split::Test))?;
    if train_set.is_empty() {
        return Err(Error::Data(format!(
            "no training samples under '{}'",
            cfg.data_dir.display()
        )));
    }
    let initial = resume.map(WeightStore::load).transpose()?;
    create_dir(&cfg.out_dir)?;

    let mut log_lines = Vec::with_capacity(train_cfg.epochs);
    let outcome =
        train(&model_cfg, &train_cfg, &train_set, &val_set, initial.as_ref(), |r| {
            let line = format!(
                "epoch {} train {:.6} val {:.6}",
                r.epoch, r.train_loss, r.val_loss
            );
            println!("{line}");
            log_lines.push(line);
        })?;

    let last_path = cfg.out_dir.join("weights-last.lrnw");
    let best_path = cfg.out_dir.join("weights-best.lrnw");
    let log_path = cfg.out_dir.join("train-log.txt");
    outcome.last.save(&last_path)?;
    outcome.best.save(&best_path)?;
    let mut log_text = log_lines.join("\n");
    log_text.push('\n');
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;
    println!(
        "best epoch {} (val loss {:.6}); wrote {}, {}, {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch - 1].val_loss,
        best_path.display(),
        last_path.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, split: Option<Split>) -> Result<()> {
    if !(cfg.tau.is_finite() && (0.0..=1.0).contains(&cfg.tau)) {
        return Err(Error::Config(format!("tau must be in [0, 1], got {}", cfg.tau)));
    }
    let mut model = LrNet::<f32>::init(cfg.model_config(), 0)?;
    model.load_store(&WeightStore::load(&cfg.weights)?)?;
    let entries = read_manifest(&cfg.data_dir)?;
    let wanted: Vec<&ManifestEntry> =
        entries.iter().filter(|e| in_split(e, split)).collect();
    create_dir(&cfg.out_dir)?;
    for entry in &wanted {
        let image = read_image_pgm(&cfg.data_dir.join(&entry.image))?;
        let prob = sliding_infer(&model, &image)?;
        let mask = threshold_mask(&prob, cfg.tau as f32);
        write_mask_pgm(&cfg.out_dir.join(&entry.mask), &mask)?;
    }
    println!("wrote {} masks to {}", wanted.len(), cfg.out_dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, pred_dir: &std::path::Path, split: Option<Split>) -> Result<()> {
    let entries = read_manifest(&cfg.data_dir)?;
    let wanted: Vec<&ManifestEntry> =
        entries.iter().filter(|e| in_split(e, split)).collect();
    if wanted.is_empty() {
        return Err(Error::Data(format!(
            "nothing to evaluate: no manifest entries for this split under '{}'",
            cfg.data_dir.display()
        )));
    }

    // Pair predictions with ground truth by file name, and fail with the
    // full lists when either side has strays.
    let expected: BTreeSet<&str> = wanted.iter().map(|e| e.mask.as_str()).collect();
    let mut present = BTreeSet::new();
    for entry in std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))? {
        let entry = entry.map_err(|e| Error::io(pred_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            present.insert(name);
        }
    }
    let missing: Vec<&str> =
        expected.iter().copied().filter(|n| !present.contains(*n)).collect();
    let stray: Vec<&str> = present
        .iter()
        .map(String::as_str)
        .filter(|n| !expected.contains(n))
        .collect();
    if !missing.is_empty() || !stray.is_empty() {
        return Err(Error::Data(format!(
            "predictions and ground truth do not pair up: missing predictions [{}]; \
             predictions without ground truth [{}]",
            missing.join(", "),
            stray.join(", ")
        )));
    }

    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mut acc = MetricAccumulator::new();
    let mut flops_total: u64 = 0;
    for entry in &wanted {
        let gt = read_mask_pgm(&cfg.data_dir.join(&entry.mask))?;
        let pred = read_mask_pgm(&pred_dir.join(&entry.mask))?;
        acc.update(&pred, &gt).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", entry.mask)),
            other => other,
        })?;
        flops_total += model_cfg.count_flops(gt.h(), gt.w());
    }
    // FLOPs are reported per image (mean over the actual input extents).
    let flops = (flops_total as f64 / wanted.len() as f64).round() as u64;
    let report = EvalReport::new(&acc, model_cfg.count_params(), flops)?;

    println!("{}", report.human_table());
    println!("{}", report.record_line());
    let record_path = pred_dir.join("eval-record.txt");
    std::fs::write(&record_path, report.record_line() + "\n")
        .map_err(|e| Error::io(&record_path, e))?;
    Ok(())
}

fn cmd_score(iou: f64, pd: f64, params: f64, flops: f64) -> Result<()> {
    let s = score(iou, pd, params, flops)?;
    println!("S_p  = {:.2}", s.s_p);
    println!("S_e  = {:.2}", s.s_e);
    println!("S_pe = {:.2}", s.s_pe);
    Ok(())
}

fn cmd_gradcheck(seeds: usize, layers_only: bool, corrupt: bool) -> Result<()> {
    if seeds == 0 || seeds > VERIFIED_SEEDS.len() {
        return Err(Error::Config(format!(
            "--seeds must be between 1 and {}",
            VERIFIED_SEEDS.len()
        )));
    }
    let results = run_suite(&VERIFIED_SEEDS[..seeds], !layers_only, corrupt);
    for r in &results {
        println!(
            "{:<20} seed {:>2}  rel-err {:>9.2e}  tol {:>5.0e}  {}",
            r.name,
            r.seed,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(w) = worst_result(&results) {
        println!(
            "worst component: {} at {} (seed {}), rel err {:.2e}",
            w.name, w.worst, w.seed, w.max_rel_err
        );
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} checks passed", results.len());
    if passed < results.len() {
        return Err(Error::Numeric(format!(
            "{} gradient check(s) failed",
            results.len() - passed
        )));
    }
    Ok(())
}
