//! The `lca` command line: train, evaluate, gradient-check, generate data, inspect.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use lca_core::checkpoint::{load_checkpoint, Checkpoint, VERSION};
use lca_core::config::{DataFormat, RunConfig};
use lca_core::data::{load_feature_file, load_image_dir, synth_glyphs, write_image_dir, MAX_CLASSES};
use lca_core::gradcheck::run_suite;
use lca_core::train::{evaluate, run_training, SystemClock};
use lca_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

const GRADCHECK_SEEDS: u64 = 10;

#[derive(Debug, Parser)]
#[command(name = "lca", version, about = "Local-concept accumulation classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ppm")]
        format: DataFormat,
    },
    /// Run the finite-difference gradient suite in f64.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic glyph dataset as train/ and test/ PPM trees.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        test_per_class: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print a checkpoint's header and parameter table.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::EmptyKernelSet { .. } => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

/// Runs a parsed command, printing results to stdout and errors to stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Eval { ckpt, data, format } => cmd_eval(&ckpt, &data, format),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Synth {
            out,
            classes,
            per_class,
            test_per_class,
            seed,
        } => cmd_synth(&out, classes, per_class, test_per_class, seed),
        Command::Inspect { ckpt } => cmd_inspect(&ckpt),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> lca_core::Result<i32> {
    let cfg = RunConfig::from_file(config)?;
    let clock = SystemClock::start();
    let trainer = run_training(&cfg, resume, &clock)?;
    println!(
        "trained {} epochs; metrics in {}, checkpoint at {}",
        trainer.epoch,
        cfg.log_csv.display(),
        cfg.ckpt_out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(ckpt: &Path, data: &Path, format: DataFormat) -> lca_core::Result<i32> {
    let ckpt = load_checkpoint(ckpt)?;
    let model = &ckpt.model;
    let dataset = match format {
        DataFormat::Ppm => load_image_dir(data, model.config().backbone.input_size)?,
        DataFormat::Lcaf => load_feature_file(data)?,
    };
    let ev = evaluate(model, &dataset, 64)?;
    let mut out = format!("accuracy={:.1}%\n", ev.accuracy());
    let width = dataset.class_names.iter().map(|n| n.len()).max().unwrap_or(0).max(5);
    writeln!(out, "{:<width$}  correct  total  accuracy", "class").unwrap();
    for (i, (correct, total)) in ev.per_class.iter().enumerate() {
        if *total == 0 {
            continue;
        }
        let name = dataset.class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let acc = 100.0 * *correct as f64 / *total as f64;
        writeln!(out, "{name:<width$}  {correct:>7}  {total:>5}  {acc:>7.1}%").unwrap();
    }
    print!("{out}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(seed: u64) -> lca_core::Result<i32> {
    let results = run_suite(seed, GRADCHECK_SEEDS)?;
    println!("{:<26} {:>12} {:>10}", "check", "max_rel_err", "threshold");
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<26} {:>12.3e} {:>10.0e}  {verdict}", r.name, r.max_rel_err, r.threshold);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed over seeds {seed}..{}", results.len(), seed + GRADCHECK_SEEDS);
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

fn cmd_synth(out: &Path, k: usize, n_train: usize, n_test: usize, seed: u64) -> lca_core::Result<i32> {
    if !(2..=MAX_CLASSES).contains(&k) {
        return Err(Error::Config {
            key: "--classes".into(),
            msg: format!("must lie in 2..={MAX_CLASSES}, got {k}"),
        });
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config {
            key: "--per-class".into(),
            msg: "train and test counts must be at least 1".into(),
        });
    }
    let (train, test) = synth_glyphs(k, n_train, n_test, seed)?;
    let a = write_image_dir(&train, &out.join("train"))?;
    let b = write_image_dir(&test, &out.join("test"))?;
    println!("wrote {a} train and {b} test images for {k} classes to {}", out.display());
    Ok(EXIT_OK)
}

/// Human-readable checkpoint summary.
pub fn describe_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    let cfg = ckpt.model.config();
    writeln!(out, "version={VERSION}").unwrap();
    writeln!(out, "epoch={}", ckpt.epoch).unwrap();
    writeln!(
        out,
        "model: backbone={} head={} classes={} lr={}",
        cfg.backbone.kind, cfg.head, cfg.num_classes, ckpt.optim.lr
    )
    .unwrap();
    let mut total = 0;
    for p in ckpt.model.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let n = p.value.numel();
        total += n;
        let frozen = if p.trainable { "" } else { "  (frozen)" };
        writeln!(out, "{:<24} {:<14} {n:>8}{frozen}", p.name, dims.join("x")).unwrap();
    }
    writeln!(out, "total_params={total}").unwrap();
    out
}

fn cmd_inspect(ckpt: &Path) -> lca_core::Result<i32> {
    print!("{}", describe_checkpoint(&load_checkpoint(ckpt)?));
    Ok(EXIT_OK)
}
