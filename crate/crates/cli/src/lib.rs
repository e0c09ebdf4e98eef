//! Command-line front end for the `umc` crate.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, bad config, data that
//! does not fit the model), 2 runtime failure (I/O, corrupt files, non-finite
//! training, failed gradient checks).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use umc::checkpoint::Checkpoint;
use umc::data::{gen_synthetic, load_dataset, save_dataset, DataConfig};
use umc::gradcheck::{
    model_grad_check, run_cases, standard_cases, tiny_check_config, CaseResult, OpCase, DEFAULT_EPSILON,
    MODEL_TOLERANCE, OP_TOLERANCE,
};
use umc::metrics::{psnr, CSV_HEADER};
use umc::model::{breakdown_csv, breakdown_text, shape_check};
use umc::train::{evaluate_checkpoint, predict, InputSource, Target, TaskBindings, TrainConfig};
use umc::{Connectivity, Error, NormStats, Task, UmcConfig, UpsampleMode};

#[derive(Debug, Parser)]
#[command(name = "umc", version, about = "U-Net multi-task cascades: describe, check, generate, train, evaluate")]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer parameter table and rounded total for a model config.
    Describe {
        #[arg(long)]
        config: PathBuf,
        /// Emit the layer table as CSV.
        #[arg(long)]
        csv: bool,
        /// Also trace activation shapes for an input of this size (HxW).
        #[arg(long, value_name = "HxW")]
        shapes: Option<String>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradMode::Ops)]
        mode: GradMode,
        /// Random input draws per op (ops mode).
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        categories: usize,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write a checkpoint plus a CSV run log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Exact number of steps, overriding --epochs.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.003)]
        lr: f64,
        /// Network input.
        #[arg(long, value_enum, default_value_t = InputArg::Noisy)]
        input: InputArg,
        /// Supervision for a pathway, e.g. `seg=fine` (targets: clean, fine,
        /// coarse, category, coarse_category). Unbound pathways are inferred
        /// from their names.
        #[arg(long = "bind", value_name = "PATHWAY=TARGET")]
        bind: Vec<String>,
        /// Disable random flips (and random crops).
        #[arg(long)]
        no_augment: bool,
        #[arg(long)]
        out: PathBuf,
        /// Run log path (default: `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; prints metrics CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Run a checkpoint on one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_prefix: String,
        /// Clean reference image; prints PSNR of input and output against it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradMode {
    /// Every op on random inputs.
    Ops,
    /// End-to-end on the tiny two-pathway model, each connectivity.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputArg {
    Noisy,
    Clean,
}

/// A failed invocation and its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Shape(_) | Error::Invalid(_) | Error::ConfigMismatch(_) | Error::Json(_) => {
                Failure::Usage(e.to_string())
            }
            Error::Graph(_) | Error::NonFinite(_) | Error::Format(_) | Error::Io(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Parse argv and run; returns the process exit code. Output goes to `out`.
pub fn main_with_args<I, S>(args: I, out: &mut String) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                out.push_str(&rendered);
            } else {
                eprint!("{rendered}");
            }
            return code;
        }
    };
    // UMC_THREADS is read and ignored: kernels are single-threaded.
    let _threads = std::env::var("UMC_THREADS").ok();
    match run(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn load_config(path: &Path) -> Result<UmcConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    UmcConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_hw(s: &str) -> Result<[usize; 2], Failure> {
    let bad = || usage(format!("expected HxW, got '{s}'"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok([h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?])
}

/// Run a parsed command; `Ok` carries the exit code.
pub fn run(cli: &Cli, out: &mut String) -> Result<i32, Failure> {
    writeln!(out, "seed: {}", cli.seed).unwrap();
    match &cli.command {
        Command::Describe { config, csv, shapes } => {
            let cfg = load_config(config)?;
            if *csv {
                out.push_str(&breakdown_csv(&cfg)?);
            } else {
                out.push_str(&breakdown_text(&cfg)?);
            }
            if let Some(hw) = shapes {
                let [h, w] = parse_hw(hw)?;
                writeln!(out, "\nshapes for input [1, {}, {h}, {w}]:", cfg.in_channels).unwrap();
                for row in shape_check(&cfg, &[1, cfg.in_channels, h, w])? {
                    writeln!(out, "  {:<28} {:?}", row.label, row.shape).unwrap();
                }
            }
            Ok(0)
        }
        Command::Gradcheck { mode, seeds, epsilon } => match mode {
            GradMode::Ops => Ok(report_ops(&standard_cases(), cli.seed, *seeds, *epsilon, out)?),
            GradMode::Tiny => Ok(report_tiny(cli.seed, *epsilon, out)?),
        },
        Command::GenData {
            out: dir,
            n,
            size,
            classes,
            categories,
            sigma,
            force,
        } => {
            if dir.exists() {
                let non_empty = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
                if non_empty && !force {
                    return Err(usage(format!(
                        "{} exists and is not empty (use --force to write into it)",
                        dir.display()
                    )));
                }
            }
            let cfg = DataConfig::new(*n, *size, *classes, *categories, cli.seed, *sigma);
            let ds = gen_synthetic(&cfg)?;
            let meta = save_dataset(dir, &ds)?;
            writeln!(out, "wrote {} samples ({size}x{size}, sigma {sigma}) to {}", ds.len(), dir.display()).unwrap();
            let total: u64 = meta.class_histogram.iter().sum();
            writeln!(out, "class,pixels,fraction").unwrap();
            for (c, &px) in meta.class_histogram.iter().enumerate() {
                let frac = if total == 0 { 0.0 } else { px as f64 / total as f64 };
                writeln!(out, "{c},{px},{frac:.4}").unwrap();
            }
            Ok(0)
        }
        Command::Train {
            config,
            data,
            epochs,
            steps,
            batch_size,
            lr,
            input,
            bind,
            no_augment,
            out: ckpt_path,
            log,
        } => {
            let cfg = load_config(config)?;
            let ds = load_dataset(data)?;
            let mut bindings = TaskBindings::infer(&cfg);
            bindings.input = match input {
                InputArg::Noisy => InputSource::Noisy,
                InputArg::Clean => InputSource::Clean,
            };
            for b in bind {
                let (name, target) = b
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--bind expects PATHWAY=TARGET, got '{b}'")))?;
                if cfg.pathway(name).is_none() {
                    return Err(usage(format!("--bind names unknown pathway '{name}'")));
                }
                bindings.targets.insert(name.to_string(), target.parse::<Target>()?);
            }
            let tc = TrainConfig {
                epochs: *epochs,
                max_steps: *steps,
                batch_size: *batch_size,
                lr: *lr,
                seed: cli.seed,
                eval_every: 0,
                augment: !no_augment,
            };
            let result = umc::train(&cfg, &tc, &bindings, &ds)?;
            result.checkpoint().save(ckpt_path)?;
            let log_path = log.clone().unwrap_or_else(|| {
                let mut p = ckpt_path.clone().into_os_string();
                p.push(".log.csv");
                PathBuf::from(p)
            });
            std::fs::write(&log_path, result.log.to_csv()).map_err(|e| io_err(&log_path, e))?;
            let first = result.log.steps.first().map_or(f64::NAN, |r| r.total);
            let last = result.log.steps.last().map_or(f64::NAN, |r| r.total);
            writeln!(
                out,
                "trained {} steps; joint loss {first:.6} -> {last:.6}\ncheckpoint: {}\nlog: {}",
                result.log.steps.len(),
                ckpt_path.display(),
                log_path.display()
            )
            .unwrap();
            Ok(0)
        }
        Command::Eval { ckpt, data, run_id } => {
            let ck = Checkpoint::load(ckpt)?;
            let ds = load_dataset(data)?;
            let reports = evaluate_checkpoint(&ck, &ds)?;
            let id = run_id.clone().unwrap_or_else(|| {
                ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            });
            writeln!(out, "{CSV_HEADER}").unwrap();
            for (name, r) in &reports {
                writeln!(out, "{}", r.csv_row(&id, ds.config.sigma, ck.config.connectivity.as_str(), name)).unwrap();
            }
            Ok(0)
        }
        Command::Infer {
            ckpt,
            image,
            out_prefix,
            reference,
        } => {
            let ck = Checkpoint::load(ckpt)?;
            let img = umc::data::load_ppm(image)?;
            let mut model = ck.to_model()?;
            let norm = ck.normalization.unwrap_or(NormStats::IDENTITY);
            let outputs = predict(&mut model, &norm, &img)?;
            let n_regression = ck.config.pathways.iter().filter(|p| p.task == Task::Regression).count();
            let reference = reference.as_ref().map(umc::data::load_ppm).transpose()?;
            for (p, t) in ck.config.pathways.iter().zip(&outputs) {
                match p.task {
                    Task::Regression => {
                        let path = if n_regression == 1 {
                            format!("{out_prefix}_denoised.ppm")
                        } else {
                            format!("{out_prefix}_{}_denoised.ppm", p.name)
                        };
                        umc::data::save_ppm(&path, t)?;
                        writeln!(out, "{}: {path}", p.name).unwrap();
                        if let Some(clean) = &reference {
                            let before = psnr(&img, clean, 255.0)?;
                            let after = psnr(&t.map(|v| v.round()), clean, 255.0)?;
                            writeln!(out, "psnr input {before:.3} dB, output {after:.3} dB").unwrap();
                        }
                    }
                    Task::Classification => {
                        let path = format!("{out_prefix}_{}_labels.pgm", p.name);
                        let labels = umc::train::argmax_channels(t)?;
                        let s = t.shape();
                        umc::data::save_pgm(&path, &umc::data::LabelMap::new(s[1], s[2], labels)?)?;
                        writeln!(out, "{}: {path}", p.name).unwrap();
                    }
                }
            }
            Ok(0)
        }
    }
}

/// Per-op table; exit code 2 if any op breaches `OP_TOLERANCE`.
pub fn report_ops(cases: &[OpCase], seed: u64, seeds: usize, epsilon: f64, out: &mut String) -> Result<i32, Failure> {
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let results = run_cases(cases, seed, seeds, epsilon, OP_TOLERANCE)?;
    Ok(write_case_table(&results, epsilon, out))
}

fn write_case_table(results: &[CaseResult], epsilon: f64, out: &mut String) -> i32 {
    writeln!(out, "op                        seeds  max_rel_error  (eps {epsilon:e}, tol {OP_TOLERANCE:e})").unwrap();
    for r in results {
        writeln!(
            out,
            "{:<25} {:>5}  {:>13.3e}  {}",
            r.name,
            r.seeds,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} of {} ops pass", results.len() - failed, results.len()).unwrap();
    if failed > 0 {
        2
    } else {
        0
    }
}

/// End-to-end checks of the tiny model in each connectivity and upsampling mode.
pub fn report_tiny(seed: u64, epsilon: f64, out: &mut String) -> Result<i32, Failure> {
    writeln!(out, "model                       max_rel_error  probes  kink_skips  (tol {MODEL_TOLERANCE:e})").unwrap();
    let mut failed = 0;
    let mut worst: BTreeMap<String, String> = BTreeMap::new();
    for c in Connectivity::ALL {
        for up in [UpsampleMode::Bilinear, UpsampleMode::Transposed2x2] {
            let r = model_grad_check(&tiny_check_config(c, up), 16, seed, epsilon, 3)?;
            let ok = r.passes(MODEL_TOLERANCE);
            failed += usize::from(!ok);
            writeln!(
                out,
                "{:<27} {:>13.3e}  {:>6}  {:>10}  {}",
                r.label,
                r.max_rel_error,
                r.probes,
                r.skipped_kinks,
                if ok { "PASS" } else { "FAIL" }
            )
            .unwrap();
            worst.insert(r.label.clone(), r.worst_param.clone());
        }
    }
    if failed > 0 {
        writeln!(out, "{failed} model checks FAILED; worst parameters: {worst:?}").unwrap();
        Ok(2)
    } else {
        writeln!(out, "all model checks pass").unwrap();
        Ok(0)
    }
}
