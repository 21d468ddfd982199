//! Command-line front end. Exit status: 0 success, 1 usage or configuration
//! error, 2 I/O or format error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    generate_dataset, read_pfm, read_png, resize, write_pfm, write_png, Dataset, DatasetSpec, GenOptions, LightSpec,
    Resample,
};
use crate::error::{Error, Result};
use crate::evaluate::{enhance_depth, evaluate_dataset, Predictions, ShadingSpec};
use crate::grad_suite;
use crate::model::Mode;
use crate::tensor::Tensor;
use crate::trainer::{format_log, Checkpoint, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const THREADS_ENV: &str = "CROSSNORM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "crossnorm", version, about = "Cross-modal face normal estimation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory with a manifest.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Predict a normal map from one image.
    Predict(PredictArgs),
    /// Write an angular-error report for a dataset.
    Evaluate(EvaluateArgs),
    /// Shade a depth map with its own and with predicted normals.
    Enhance(EnhanceArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    paired: usize,
    #[arg(long, default_value_t = 256)]
    image_only: usize,
    #[arg(long, default_value_t = 256)]
    normal_only: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Gaussian bumps per surface.
    #[arg(long, default_value_t = DatasetSpec::default().n_bumps)]
    bumps: usize,
    /// Rotate each surface in the image plane.
    #[arg(long)]
    rotate: bool,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Dataset directory; overrides `data` in the config file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON file with TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path; the log and resolved config are written beside it.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output PFM of unit normals.
    #[arg(long)]
    out: PathBuf,
    /// Optional colour-coded PNG, `(n + 1) / 2` per channel.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    ckpt: Option<PathBuf>,
    /// Directory of `<sample_id>.pred.pfm` files, instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Writes PREFIX.txt and PREFIX.csv.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EnhanceArgs {
    #[arg(long)]
    normals: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    /// Light direction `X,Y,Z`; normalized before use.
    #[arg(long, value_parser = parse_direction, allow_hyphen_values = true)]
    light: [f64; 3],
    #[arg(long, default_value_t = 1.0)]
    intensity: f64,
    #[arg(long, default_value_t = ShadingSpec::DEFAULT_AMBIENT)]
    ambient: f64,
    /// Optional mask PNG; defaults to every pixel.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Writes PREFIX.baseline.png and PREFIX.enhanced.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GradCheckArgs {
    #[arg(long, default_value_t = grad_suite::DEFAULT_TOLERANCE)]
    tol: f64,
}

fn parse_direction(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [x, y, z]: [f64; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated numbers".to_string())?;
    let len = (x * x + y * y + z * z).sqrt();
    if !(len > 0.0 && len.is_finite()) {
        return Err("direction must be a non-zero finite vector".into());
    }
    Ok([x / len, y / len, z / len])
}

/// Maps an error to the process status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::MissingGradient(_) => EXIT_NUMERICAL,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

/// Adds a suffix to the full file name: `a/b.ckpt` + `.log.csv` -> `a/b.ckpt.log.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn gen_data(args: &GenDataArgs) -> Result<i32> {
    let spec = DatasetSpec {
        seed: args.seed,
        resolution: args.res,
        n_bumps: args.bumps,
        paired: args.paired,
        image_only: args.image_only,
        normal_only: args.normal_only,
        options: GenOptions {
            rotate_in_plane: args.rotate,
        },
    };
    let manifest = generate_dataset(&spec, &args.out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), args.out.display());
    Ok(EXIT_OK)
}

/// Defaults, then the config file, then flags.
fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
        cfg.epochs = None;
    }
    if args.epochs.is_some() {
        cfg.epochs = args.epochs;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.data.is_none() {
        return Err(Error::Config("no dataset: pass --data or set `data` in the config".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs) -> Result<i32> {
    let cfg = resolve_train_config(args)?;
    ensure_parent(&args.out)?;
    write_json(&sibling(&args.out, ".config.json"), &cfg)?;
    let data = cfg.data.clone().expect("resolved");
    let samples = Dataset::open(&data)?.load_all()?;
    let mut trainer = Trainer::new(cfg, samples)?;
    let total = trainer.planned_steps();
    let every = (total / 20).max(1);
    trainer.run(|step, rec| {
        if step % every == 0 || step == total {
            let losses: Vec<String> = rec
                .phases
                .iter()
                .map(|p| match p.loss() {
                    Some(l) => format!("{}={l:.4}", p.phase.as_str()),
                    None => format!("{}=skipped", p.phase.as_str()),
                })
                .collect();
            log::info!("step {step}/{total} {} {}", rec.kind.as_str(), losses.join(" "));
        }
    })?;
    trainer.checkpoint().save(&args.out)?;
    let log_path = sibling(&args.out, ".log.csv");
    std::fs::write(&log_path, format_log(&trainer.log)).map_err(|e| Error::io(&log_path, e))?;
    println!("wrote {} after {} steps", args.out.display(), trainer.step);
    Ok(EXIT_OK)
}

/// Normalizes each pixel's vector; degenerate ones become zero.
fn unit_normals(t: &Tensor) -> Result<Tensor> {
    let [b, _, h, w] = t.dims4("unit_normals")?;
    let hw = h * w;
    let mut out = t.clone();
    let d = out.data_mut();
    for bi in 0..b {
        for s in 0..hw {
            let idx = [0, 1, 2].map(|c| bi * 3 * hw + c * hw + s);
            let len = idx.iter().map(|&i| (d[i] as f64).powi(2)).sum::<f64>().sqrt();
            for i in idx {
                d[i] = if len > 1e-8 { (d[i] as f64 / len) as f32 } else { 0.0 };
            }
        }
    }
    Ok(out)
}

fn predict(args: &PredictArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.model;
    let res = model.config().input_resolution;
    let mut image = read_png(&args.image)?;
    if image.shape()[1] == 1 {
        let plane = image.data().to_vec();
        let [_, _, h, w] = image.dims4("predict")?;
        image = Tensor::from_vec(&[1, 3, h, w], plane.repeat(3))?;
    }
    let [_, _, h, w] = image.dims4("predict")?;
    if (h, w) != (res, res) {
        log::warn!("resizing {}x{} input to the model's {res}x{res}", w, h);
        image = resize(&image, res, res, Resample::Bilinear)?;
    }
    let normals = unit_normals(&model.infer(&image, Mode::ImageToNormal)?)?;
    ensure_parent(&args.out)?;
    write_pfm(&normals, &args.out)?;
    if let Some(png) = &args.png {
        write_png(&normals.map(|v| (v + 1.0) / 2.0), png)?;
    }
    write_json(&sibling(&args.out, ".run.json"), args)?;
    println!("wrote {}", args.out.display());
    Ok(EXIT_OK)
}

fn evaluate(args: &EvaluateArgs) -> Result<i32> {
    let dataset = Dataset::open(&args.data)?;
    let loaded;
    let (source, label) = match (&args.ckpt, &args.predictions) {
        (Some(c), _) => {
            loaded = Checkpoint::load(c)?.model;
            (Predictions::Model(&loaded), c.display().to_string())
        }
        (None, Some(p)) => (Predictions::Directory(p), format!("predictions in {}", p.display())),
        (None, None) => return Err(Error::Config("pass --ckpt or --predictions".into())),
    };
    let mut report = evaluate_dataset(&source, &dataset)?;
    report.checkpoint = label;
    ensure_parent(&args.report)?;
    report.write(&args.report)?;
    write_json(&sibling(&args.report, ".run.json"), args)?;
    println!("{}", report.row());
    if report.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} samples could not be evaluated; see {}.txt", report.failures.len(), args.report.display());
        Ok(EXIT_IO)
    }
}

fn enhance(args: &EnhanceArgs) -> Result<i32> {
    let normals = read_pfm(&args.normals)?;
    let depth = read_pfm(&args.depth)?;
    let [_, _, h, w] = depth.dims4("enhance")?;
    let mask = match &args.mask {
        Some(p) => read_png(p)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
        None => Tensor::full(&[1, 1, h, w], 1.0),
    };
    if !(0.0..=1.0).contains(&args.ambient) {
        return Err(Error::Config(format!("ambient {} outside [0, 1]", args.ambient)));
    }
    let spec = ShadingSpec {
        light: LightSpec::new(args.light, args.intensity).map_err(|e| Error::Config(e.to_string()))?,
        ambient: args.ambient,
    };
    let out = enhance_depth(&depth, &normals, &spec, &mask)?;
    ensure_parent(&args.out)?;
    write_png(&out.baseline, &sibling(&args.out, ".baseline.png"))?;
    write_png(&out.enhanced, &sibling(&args.out, ".enhanced.png"))?;
    write_json(&sibling(&args.out, ".run.json"), args)?;
    if out.excluded_nan > 0 {
        eprintln!("warning: {} masked pixels had NaN depth and were left black", out.excluded_nan);
    }
    println!("wrote {0}.baseline.png and {0}.enhanced.png", args.out.display());
    Ok(EXIT_OK)
}

fn grad_check(args: &GradCheckArgs) -> Result<i32> {
    let reports = grad_suite::run(args.tol)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}

fn configure_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        _ => 0,
    };
    // a pool that already exists (e.g. in tests) is kept as is
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Enhance(a) => enhance(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
