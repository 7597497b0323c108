mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use eegvit::data::{subject_split, synth_trials, Split, SplitSpec, SynthSpec, TrialSet};
use eegvit::gradcheck::{run_suite, GradcheckConfig};
use eegvit::metrics::{label_mean, linear_baseline, naive_baseline, Metrics};
use eegvit::train::{evaluate_set, train, TrainConfig};
use eegvit::weights::{read_archive, read_manifest, ImportPolicy};
use eegvit::{EEGViTModel, Error, ModelConfig, ModelVariant};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "eegvit", version, about = "EEG gaze regression with a hybrid vision transformer")]
#[command(args_override_self = true)]
struct Cli {
    /// UTF-8 file of key=value lines (# comments); flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic EVTD dataset.
    Synth(SynthArgs),
    /// Split by subject, train, evaluate on the test subjects.
    Train(TrainArgs),
    /// Score a model on the test subjects, optionally beside a baseline.
    Eval(EvalArgs),
    /// Finite-difference check of every operator and a two-layer encoder.
    Gradcheck(GradcheckArgs),
    /// List the tensors of an EVTW archive.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 27)]
    subjects: usize,
    /// Screen size in pixels, WIDTHxHEIGHT.
    #[arg(long, default_value = "800x600", value_parser = parse_screen)]
    screen: (f32, f32),
    /// Gaussian noise per sample, in µV.
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true, value_parser = non_negative)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    /// 12 layers, hidden 768, 12 heads.
    Base,
    /// 2 layers, hidden 64, 4 heads.
    Reduced,
}

#[derive(clap::Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// vit | vit-pre | eegvit | eegvit-pre
    #[arg(long, default_value = "eegvit")]
    variant: ModelVariant,
    /// Encoder archive; required for the pretrained variants only.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "base")]
    arch: Arch,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    head_dropout: f64,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Report destination; printed to standard output either way.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Naive,
    Linear,
    Ridge,
    None,
}

#[derive(clap::Args)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    baseline: Baseline,
    /// Must match the split used for training.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = non_negative)]
    ridge_lambda: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    Real64,
}

#[derive(clap::Args)]
#[command(args_override_self = true)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only real64: single-precision differences cannot resolve 1e-4.
    #[arg(long, value_enum, default_value = "real64")]
    dtype: Dtype,
    /// Corrupt the analytic gradient of one case.
    #[arg(long, hide = true, value_name = "OP")]
    inject_fault: Option<String>,
}

#[derive(clap::Args)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
}

fn parse_screen(s: &str) -> Result<(f32, f32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{s}` is not WIDTHxHEIGHT"))?;
    let dim = |v: &str| match v.trim().parse::<f32>() {
        Ok(d) if d > 0.0 && d.is_finite() => Ok(d),
        _ => Err(format!("bad screen extent `{v}`")),
    };
    Ok((dim(w)?, dim(h)?))
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} must be a finite value ≥ 0")),
        Err(e) => Err(e.to_string()),
    }
}

/// A failed command and the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalAbort { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cmd = Cli::command();
    let args = match config::merge(&cmd, std::env::args_os().collect::<Vec<OsString>>()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.0);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let matches = match cmd.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => e.exit(),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(f) = init_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    eprint!("{}", config::echo(&cmd, &matches));

    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Honour `EEGVIT_THREADS` as a cap on the rayon pool.
fn init_threads() -> Outcome {
    let Ok(v) = std::env::var("EEGVIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| usage(format!("EEGVIT_THREADS=`{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn synth(a: &SynthArgs) -> Outcome {
    let spec = SynthSpec {
        screen: a.screen,
        channels: a.channels,
        samples: a.samples,
        ..SynthSpec::new(a.n, a.subjects, a.noise_std, a.seed)
    };
    let set = synth_trials(&spec)?;
    set.save(&a.out)?;
    let [mx, my] = label_mean(&set);
    println!(
        "wrote {} N={} subjects={} channels={} samples={} label_mean=({mx:.2}, {my:.2})",
        a.out.display(),
        set.len(),
        set.subject_ids().len(),
        set.channels(),
        set.samples()
    );
    Ok(())
}

fn load_split(data: &Path, split_seed: u64) -> Result<Split, Failure> {
    let set = TrialSet::load(data)?;
    let split = subject_split(&set, &SplitSpec::new(split_seed))?;
    println!(
        "data N={} subjects={}; split trials train/val/test = {}/{}/{}, subjects {}/{}/{}",
        set.len(),
        set.subject_ids().len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.train.subject_ids().len(),
        split.val.subject_ids().len(),
        split.test.subject_ids().len()
    );
    Ok(split)
}

fn run_train(a: &TrainArgs) -> Outcome {
    let v = a.variant;
    match (&a.weights, v.pretrained) {
        (None, true) => {
            return Err(usage(format!(
                "variant `{v}` fine-tunes imported encoder weights and needs --weights; \
                 train `{}` from scratch instead",
                ModelVariant::new(v.patcher, false)
            )))
        }
        (Some(_), false) => {
            return Err(usage(format!(
                "variant `{v}` trains from scratch and takes no --weights; use `{}`",
                ModelVariant::new(v.patcher, true)
            )))
        }
        _ => {}
    }
    let split = load_split(&a.data, a.split_seed)?;
    let model_config = ModelConfig {
        head_dropout: a.head_dropout,
        ..match a.arch {
            Arch::Base => ModelConfig::vit_base(v.patcher),
            Arch::Reduced => ModelConfig::reduced(v.patcher),
        }
    };
    let mut model = EEGViTModel::init_fresh(model_config, a.seed)?;
    if let Some(w) = &a.weights {
        let archive = read_archive(w)?;
        let manifest = model.load_pretrained(&archive, &ImportPolicy::default(), a.seed)?;
        println!(
            "imported {} tensors from {}, {} fresh",
            manifest.loaded.len(),
            w.display(),
            manifest.fresh.len()
        );
    }
    println!("{} parameters", model.count_parameters());
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr0: a.lr,
        grad_clip: a.grad_clip,
        ..TrainConfig::new(v, a.seed)
    };
    let (model, mut report) = train(model, &split.train, &split.val, &config)?;
    report.test = Some(evaluate_set(&model, &split.test, a.batch)?);
    let text = report.to_text();
    print!("{text}");
    eprintln!("wall time {:.1} s", report.wall_time.as_secs_f64());
    if let Some(p) = &a.report {
        std::fs::write(p, &text).map_err(|e| Failure::from(Error::Io { context: p.clone(), source: e }))?;
    }
    if let Some(p) = &a.out_model {
        model.save(p)?;
    }
    Ok(())
}

fn row(name: &str, m: &Metrics) {
    println!(
        "{name:<16} {:>12.4} {:>12.4} {:>14.4} {:>14.4}",
        m.rmse_px,
        m.rmse_mm(),
        m.mean_dist_px,
        m.mean_dist_mm()
    );
}

fn eval(a: &EvalArgs) -> Outcome {
    let model = EEGViTModel::load(&a.model)?;
    let split = load_split(&a.data, a.split_seed)?;
    let m = evaluate_set(&model, &split.test, a.batch)?;
    println!(
        "{:<16} {:>12} {:>12} {:>14} {:>14}",
        "row", "rmse_px", "rmse_mm", "meandist_px", "meandist_mm"
    );
    row("model", &m);
    let baseline = match a.baseline {
        Baseline::None => None,
        Baseline::Naive => Some(("naive", naive_baseline(&split.train, &split.test)?)),
        Baseline::Linear => Some(("linear", linear_baseline(&split.train, &split.test, 0.0)?)),
        Baseline::Ridge => Some(("ridge", linear_baseline(&split.train, &split.test, a.ridge_lambda)?)),
    };
    if let Some((name, b)) = baseline {
        row(name, &b);
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Outcome {
    let Dtype::Real64 = a.dtype;
    let cfg = GradcheckConfig {
        seed: a.seed,
        fault: a.inject_fault.clone(),
        ..GradcheckConfig::default()
    };
    let reports = run_suite(&cfg)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(cfg.tolerance);
        println!(
            "{:<16} max_rel_error={:.3e} checked={:<6} {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} cases below {:e}", reports.len(), cfg.tolerance);
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("gradient check failed for: {}", failed.join(", ")),
        })
    }
}

fn inspect(a: &InspectArgs) -> Outcome {
    let entries = read_manifest(&a.weights)?;
    let mut total = 0usize;
    for e in &entries {
        println!("{:<48} {:<20} {:>12}", e.name, format!("{:?}", e.dims), e.length);
        // Bookkeeping entries and batch-norm running statistics are not trained.
        if !e.name.starts_with("meta.") && !e.name.contains(".running_") {
            total += e.numel();
        }
    }
    println!("{} tensors, {total} parameters", entries.len());
    Ok(())
}
