//! Command-line front end: dataset generation, training, single attacks,
//! sweeps and curve comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pdr_core::attacks::{self, AttackConfig, AttackResult, KernelKind, KernelSpec, Method};
use pdr_core::classifier::{default_architecture, load_model, save_model, train, Model, TrainConfig};
use pdr_core::harness::{
    emit_curve_csv, emit_samples_csv, gen_dataset, load_curve_csv, load_dataset, pareto_compare, save_dataset, sweep,
    CurvePoint, DatasetSpec, MethodSpec, SweepConfig, Vary,
};
use pdr_core::pdr::{pdr_attack, LambdaMode, OptimizerKind, PdrConfig, Termination, TraceRecord};
use pdr_core::{Error, Result};

/// Accepts plain numbers and fractions such as `16/255`.
fn number(s: &str) -> std::result::Result<f64, String> {
    let parse = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number or fraction a/b"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let d = parse(b)?;
            if d == 0.0 {
                return Err(format!("`{s}` divides by zero"));
            }
            parse(a)? / d
        }
        None => parse(s)?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn named<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Parser)]
#[command(name = "pdr", version, about = "Adversarial attacks with a perceptual-distortion penalty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic K-class dataset to a file.
    GenData(GenData),
    /// Train the default classifier and write a model file.
    Train(TrainArgs),
    /// Attack one test sample and write the result as JSON.
    Attack(AttackArgs),
    /// Run methods over a hyperparameter grid and write curve CSVs.
    Sweep(SweepArgs),
    /// Compare a baseline curve with a PDR curve at matched ASR.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of classes K.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.04, value_parser = number)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate, value_parser = number)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
}

/// Settings shared by `attack` and `sweep`.
#[derive(Args)]
struct AttackFlags {
    /// Source model file; repeat for an ensemble (the first one decides success).
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Baseline iteration count.
    #[arg(long)]
    iters: Option<usize>,
    /// Baseline step size (default max(eps/10, 1/255)).
    #[arg(long, value_parser = number)]
    alpha: Option<f64>,
    #[arg(long, value_parser = number)]
    momentum: Option<f64>,
    /// Input-diversity probability.
    #[arg(long, value_parser = number)]
    p: Option<f64>,
    /// Translation kernel size; `--delta-kernel` swaps the Gaussian for a delta.
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long, value_parser = number)]
    kernel_sigma: Option<f64>,
    #[arg(long)]
    delta_kernel: bool,
    /// Layer read by the ILA losses.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, value_parser = number)]
    ila_c: Option<f64>,
    #[arg(long, value_parser = number)]
    lr_lambda: Option<f64>,
    /// PDR iteration cap.
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_parser = named::<LambdaMode>)]
    lambda_mode: Option<LambdaMode>,
    #[arg(long, value_parser = named::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = named::<Termination>)]
    termination: Option<Termination>,
    /// Adam step size.
    #[arg(long, value_parser = number)]
    adam_lr: Option<f64>,
    #[arg(long, value_parser = number)]
    sgd_lr: Option<f64>,
    /// Stop baselines at the first misclassification.
    #[arg(long)]
    early_stop: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    flags: AttackFlags,
    #[arg(long, value_parser = named::<MethodSpec>)]
    method: MethodSpec,
    /// Test sample index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_parser = number)]
    eps: Option<f64>,
    #[arg(long = "T", value_parser = number)]
    threshold: Option<f64>,
    #[arg(long, value_parser = number)]
    lambda0: Option<f64>,
    /// JSON output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: AttackFlags,
    /// Method to sweep; repeat for several.
    #[arg(long = "method", required = true, value_parser = named::<MethodSpec>)]
    methods: Vec<MethodSpec>,
    /// Grid variable; inferred from the repeated grid flag when omitted.
    #[arg(long, value_parser = named::<Vary>)]
    vary: Option<Vary>,
    #[arg(long, value_parser = number)]
    eps: Vec<f64>,
    #[arg(long = "T", value_parser = number)]
    threshold: Vec<f64>,
    #[arg(long, value_parser = number)]
    lambda0: Vec<f64>,
    /// Score success on this model instead of the first source model.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Evaluate on the first N test samples.
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    sequential: bool,
    /// Curve CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Per-sample CSV path.
    #[arg(long)]
    samples_out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    baseline: PathBuf,
    pdr: PathBuf,
    /// Restrict the baseline CSV to this method.
    #[arg(long)]
    baseline_method: Option<String>,
    #[arg(long)]
    pdr_method: Option<String>,
    #[arg(long, default_value_t = 0.0, value_parser = number)]
    asr_tolerance: f64,
}

/// A usage error exits with 1, anything that failed while running with 2.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths.iter().map(load_model).collect()
}

impl AttackFlags {
    fn attack_template(&self, method: Method, eps: f64) -> AttackConfig {
        let mut cfg = AttackConfig::new(method, eps);
        cfg.seed = self.seed;
        cfg.early_stop = self.early_stop;
        if let Some(v) = self.iters {
            cfg.iters = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.p {
            cfg.p = v;
        }
        cfg.kernel = self.kernel();
        if let Some(v) = &self.layer {
            cfg.layer = v.clone();
        }
        if let Some(v) = self.ila_c {
            cfg.ila_c = v;
        }
        cfg
    }

    fn kernel(&self) -> KernelSpec {
        let mut k = KernelSpec::default();
        if let Some(v) = self.kernel_size {
            k.size = v;
        }
        if let Some(v) = self.kernel_sigma {
            k.sigma = v;
        }
        if self.delta_kernel {
            k.kind = KernelKind::Delta;
        }
        k
    }

    fn pdr_template(&self) -> PdrConfig {
        let mut cfg = PdrConfig { seed: self.seed, kernel: self.kernel(), ..PdrConfig::default() };
        if let Some(v) = self.p {
            cfg.p = v;
        }
        if let Some(v) = &self.layer {
            cfg.layer = v.clone();
        }
        if let Some(v) = self.ila_c {
            cfg.ila_c = v;
        }
        if let Some(v) = self.lr_lambda {
            cfg.lr_lambda = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.iters {
            cfg.reference_iters = v;
        }
        if let Some(v) = self.lambda_mode {
            cfg.lambda_mode = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = v;
        }
        if let Some(v) = self.termination {
            cfg.termination = v;
        }
        if let Some(v) = self.adam_lr {
            cfg.adam.alpha = v;
        }
        if let Some(v) = self.sgd_lr {
            cfg.sgd_lr = v;
        }
        cfg
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenData) -> Outcome<()> {
    let spec = DatasetSpec {
        seed: a.seed,
        classes: a.classes,
        n_train: a.n_train,
        n_test: a.n_test,
        shape: [a.channels, a.size, a.size],
        noise: a.noise,
    };
    let d = gen_dataset(&spec)?;
    save_dataset(&d, &a.out)?;
    println!("wrote {} train / {} test samples to {}", d.train.len(), d.test.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome<()> {
    let d = load_dataset(&a.data)?;
    let cfg = TrainConfig { epochs: a.epochs, batch_size: a.batch_size, learning_rate: a.lr, seed: a.seed };
    let (model, report) = train(&d.train, &d.test, default_architecture(d.spec.shape, d.spec.classes), &cfg)?;
    save_model(&model, &a.out)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}  loss {l:.4}", i + 1);
    }
    println!("train accuracy {:.4}", report.train_accuracy);
    if let Some(t) = report.test_accuracy {
        println!("test accuracy {t:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackOutput<'a> {
    method: &'a str,
    index: usize,
    label: usize,
    clean_prediction: usize,
    result: AttackResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<Vec<TraceRecord>>,
}

fn attack_cmd(a: AttackArgs) -> Outcome<()> {
    let models = load_models(&a.flags.model)?;
    let d = load_dataset(&a.flags.data)?;
    let sample = d.test.get(a.index).ok_or_else(|| {
        Error::invalid("attack", format!("index {} out of range ({} test samples)", a.index, d.test.len()))
    })?;
    let eps = a.eps.unwrap_or(16.0 / 255.0);
    let (result, trace) = match a.method {
        MethodSpec::Baseline(m) => {
            let cfg = a.flags.attack_template(m, eps);
            cfg.validate().map_err(usage)?;
            (attacks::run(&models, &sample.image, sample.label, &cfg)?, None)
        }
        MethodSpec::Pdr(_) => {
            let mut cfg = a.flags.pdr_template();
            cfg.mis = a.method.mis_kind(models.len()).expect("pdr method");
            cfg.eps = eps;
            if let Some(t) = a.threshold {
                cfg.threshold = t;
            }
            if let Some(l) = a.lambda0 {
                cfg.lambda0 = l;
            }
            cfg.validate().map_err(usage)?;
            let (r, t) = pdr_attack(&models, &sample.image, sample.label, &cfg)?;
            (r, Some(t.records))
        }
    };
    let out = AttackOutput {
        method: a.method.name(),
        index: a.index,
        label: sample.label,
        clean_prediction: models[0].predict(&sample.image)?,
        result,
        trace,
    };
    let json = serde_json::to_string_pretty(&out).map_err(|e| Error::Config(e.to_string()))?;
    match &a.out {
        Some(p) => Ok(write_text(p, &(json + "\n"))?),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn infer_vary(a: &SweepArgs) -> Outcome<Vary> {
    if let Some(v) = a.vary {
        return Ok(v);
    }
    let repeated: Vec<Vary> =
        [(Vary::Eps, a.eps.len()), (Vary::Threshold, a.threshold.len()), (Vary::Lambda0, a.lambda0.len())]
            .into_iter()
            .filter(|&(_, n)| n > 1)
            .map(|(v, _)| v)
            .collect();
    match repeated.as_slice() {
        [v] => Ok(*v),
        [] if a.methods.iter().all(|m| m.is_pdr()) && !a.threshold.is_empty() => Ok(Vary::Threshold),
        [] => Ok(Vary::Eps),
        _ => Err(Failure::Usage("several grid flags are repeated; pick one with --vary".into())),
    }
}

fn single(values: &[f64], name: &str) -> Outcome<Option<f64>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(Failure::Usage(format!("--{name} is repeated but the sweep varies another parameter"))),
    }
}

fn sweep_cmd(a: SweepArgs) -> Outcome<()> {
    let models = load_models(&a.flags.model)?;
    let target = a.target.as_ref().map(load_model).transpose()?;
    let d = load_dataset(&a.flags.data)?;
    let vary = infer_vary(&a)?;

    let mut pdr = a.flags.pdr_template();
    let mut attack = a.flags.attack_template(Method::Ifgsm, pdr.eps);
    let grid = match vary {
        Vary::Eps => {
            if let Some(t) = single(&a.threshold, "T")? {
                pdr.threshold = t;
            }
            if let Some(l) = single(&a.lambda0, "lambda0")? {
                pdr.lambda0 = l;
            }
            if a.eps.is_empty() {
                [2.0, 4.0, 8.0, 16.0].iter().map(|v| v / 255.0).collect()
            } else {
                a.eps.clone()
            }
        }
        Vary::Threshold => {
            if let Some(e) = single(&a.eps, "eps")? {
                pdr.eps = e;
                attack.eps = e;
            }
            if let Some(l) = single(&a.lambda0, "lambda0")? {
                pdr.lambda0 = l;
            }
            if a.threshold.is_empty() {
                vec![0.92, 0.96, 0.98, 0.999]
            } else {
                a.threshold.clone()
            }
        }
        Vary::Lambda0 => {
            if let Some(e) = single(&a.eps, "eps")? {
                pdr.eps = e;
            }
            if let Some(t) = single(&a.threshold, "T")? {
                pdr.threshold = t;
            }
            if a.lambda0.is_empty() {
                vec![400.0, 800.0, 1200.0, 1600.0, 2400.0, 3200.0, 5000.0, 9999.0]
            } else {
                a.lambda0.clone()
            }
        }
    };
    let cfg = SweepConfig {
        methods: a.methods.clone(),
        vary,
        grid,
        seed: a.flags.seed,
        attack,
        alpha: a.flags.alpha,
        pdr,
        n_eval: a.n_eval,
        parallel: !a.sequential,
    };
    cfg.validate().map_err(usage)?;
    for &h in &cfg.grid {
        let mut p = cfg.pdr.clone();
        match vary {
            Vary::Eps => {
                p.eps = h;
                AttackConfig { eps: h, ..cfg.attack.clone() }.validate().map_err(usage)?;
            }
            Vary::Threshold => p.threshold = h,
            Vary::Lambda0 => p.lambda0 = h,
        }
        p.validate().map_err(usage)?;
    }
    let report = sweep(&models, target.as_ref(), &d.test, &cfg)?;
    emit_curve_csv(&report.points, &a.out)?;
    if let Some(p) = &a.samples_out {
        emit_samples_csv(&report.records, p)?;
    }
    for p in &report.points {
        println!("{:<12} {}={:<10.6} asr {:.4}  ssim {:.4}  n {}", p.method, p.vary, p.hyper, p.asr, p.mean_ssim, p.n);
    }
    for e in &report.errors {
        eprintln!("sample {} ({} at {}): {}", e.sample_id, e.method, e.hyper, e.message);
    }
    Ok(())
}

fn curve(path: &Path, method: &Option<String>) -> Result<Vec<CurvePoint>> {
    let points = load_curve_csv(path)?;
    let points: Vec<CurvePoint> = match method {
        Some(m) => points.into_iter().filter(|p| &p.method == m).collect(),
        None => points,
    };
    if points.is_empty() {
        return Err(Error::Config(format!("{} has no matching curve points", path.display())));
    }
    Ok(points)
}

fn compare_cmd(a: CompareArgs) -> Outcome<()> {
    let (baseline, pdr) = (curve(&a.baseline, &a.baseline_method)?, curve(&a.pdr, &a.pdr_method)?);
    let cmp = pareto_compare(&baseline, &pdr, a.asr_tolerance)?;
    println!("{cmp}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
