//! `thunder` command line: train, denoise, evaluate, inspect costs, and
//! analyze projection ranks.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use thunder_core::analysis::{analyze_subspace, CostReport, REFERENCE_FLOPS, REFERENCE_PARAMS};
use thunder_core::data::{load_image, load_pairs, save_image, DataError, DatasetConfig};
use thunder_core::loss::{psnr, ssim, LossWeights};
use thunder_core::network::{Ablations, ModelConfig, ThunderModel};
use thunder_core::tensor::{Scalar, Tensor, TensorError};
use thunder_core::train::{load_model, lr_at, TrainConfig, TrainError, Trainer, ValSummary};

#[derive(Parser)]
#[command(
    name = "thunder",
    about = "Lightweight wavelet denoiser",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Architecture switches shared by training and inspection.
#[derive(Args, Clone, Copy, Default)]
struct AblationFlags {
    /// Replace the subspace projection with a gated attention fallback.
    #[arg(long)]
    no_projection: bool,
    /// Disable the refiner; output the thumbnail upsample.
    #[arg(long)]
    no_spr: bool,
    /// Replace the learned upsampler with bilinear interpolation.
    #[arg(long)]
    no_csp: bool,
    /// Disable the global feature stream.
    #[arg(long)]
    no_global: bool,
    /// Drop the thumbnail RMS term from the loss.
    #[arg(long)]
    no_thumbnail_loss: bool,
    /// Add the refiner residual to the noisy input instead of the upsample.
    #[arg(long)]
    end_to_end_residual: bool,
}

impl From<AblationFlags> for Ablations {
    fn from(f: AblationFlags) -> Self {
        Ablations {
            no_projection: f.no_projection,
            no_spr: f.no_spr,
            no_csp: f.no_csp,
            no_global: f.no_global,
            no_thumbnail_loss: f.no_thumbnail_loss,
            end_to_end_residual: f.end_to_end_residual,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; the log stream goes to stdout.
    Train {
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long, default_value = "thunder.ckpt")]
        ckpt: PathBuf,
        /// Validate every N iterations (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        val_every: usize,
        /// Checkpoint every N iterations (0 = only at the end).
        #[arg(long, default_value_t = 0)]
        ckpt_every: usize,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Denoise one PPM image or a directory of them.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM table over clean/noisy pairs matched by basename.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        clean_dir: PathBuf,
        #[arg(long)]
        noisy_dir: PathBuf,
    },
    /// Per-layer parameter and FLOP table for a configuration.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        /// Square input extent for the FLOP column.
        #[arg(long, default_value_t = 256)]
        input_size: usize,
        #[command(flatten)]
        ablations: AblationFlags,
    },
    /// Pre/post-projection feature ranks for one image.
    AnalyzeSubspace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Energy fraction captured by the reported rank.
        #[arg(long, default_value_t = 0.99)]
        energy: f64,
    },
}

enum AppError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Io(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) => write!(f, "usage error: {m}"),
            AppError::Io(m) => write!(f, "i/o error: {m}"),
            AppError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Io(e.to_string())
    }
}

/// Tensor errors escaping a running command are numerical failures; errors
/// caught while validating configuration map to usage instead.
impl From<TensorError> for AppError {
    fn from(e: TensorError) -> Self {
        AppError::Numerical(e.to_string())
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, everything else is a
            // usage error.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), AppError> {
    match cmd {
        Command::Train {
            config,
            resume,
            ckpt,
            val_every,
            ckpt_every,
            ablations,
        } => train(
            &config,
            resume.as_deref(),
            &ckpt,
            val_every,
            ckpt_every,
            ablations.into(),
        ),
        Command::Denoise { ckpt, input, out } => denoise(&ckpt, &input, &out),
        Command::Eval {
            ckpt,
            clean_dir,
            noisy_dir,
        } => eval(&ckpt, &clean_dir, &noisy_dir),
        Command::Inspect {
            config,
            input_size,
            ablations,
        } => inspect(&config, input_size, ablations.into()),
        Command::AnalyzeSubspace {
            ckpt,
            input,
            energy,
        } => subspace(&ckpt, &input, energy),
    }
}

/// Parse the flat `key = value` configuration file. Unknown keys and
/// malformed values are usage errors.
fn parse_config(path: &Path) -> Result<(ModelConfig, TrainConfig, DatasetConfig), AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut data = DatasetConfig::default();
    let mut weights = LossWeights::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err =
            |msg: String| AppError::Usage(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err("expected `key = value`".to_string()))?;
        fn parse<T: std::str::FromStr>(
            value: &str,
            err: &impl Fn(String) -> AppError,
        ) -> Result<T, AppError> {
            value
                .parse()
                .map_err(|_| err(format!("bad value `{value}`")))
        }
        match key {
            "model.k" => model.k = parse(value, &err)?,
            "model.m" => model.m = parse(value, &err)?,
            "model.q" => model.q = parse(value, &err)?,
            "model.nhl_per_spb" => model.nhl_per_spb = parse(value, &err)?,
            "train.lr0" => train.lr0 = parse(value, &err)?,
            "train.batch" => train.batch = parse(value, &err)?,
            "train.iters" => train.iters = parse(value, &err)?,
            "train.decay_every" => train.decay_every = parse(value, &err)?,
            "train.patch" => train.patch = parse(value, &err)?,
            "loss.alpha" => weights.alpha = parse(value, &err)?,
            "loss.beta" => weights.beta = parse(value, &err)?,
            "data.sigma" => data.noise.sigma = parse(value, &err)?,
            "seed" => {
                let seed: u64 = parse(value, &err)?;
                model.seed = seed;
                train.seed = seed;
                data.seed = seed;
            }
            other => return Err(err(format!("unknown config key `{other}`"))),
        }
    }
    train.weights = weights;
    Ok((model, train, data))
}

fn validated(
    mut model: ModelConfig,
    train: &TrainConfig,
    ablations: Ablations,
) -> Result<ModelConfig, AppError> {
    model.ablations = ablations;
    model
        .validate()
        .map_err(|e| AppError::Usage(e.to_string()))?;
    train
        .validate(model.k)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    Ok(model)
}

fn train(
    config: &Path,
    resume: Option<&Path>,
    ckpt: &Path,
    val_every: usize,
    ckpt_every: usize,
    ablations: Ablations,
) -> Result<(), AppError> {
    let (model_cfg, mut train_cfg, data_cfg) = parse_config(config)?;
    train_cfg.val_every = val_every;
    train_cfg.ckpt_every = ckpt_every;
    let model_cfg = validated(model_cfg, &train_cfg, ablations)?;
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::<f32>::load(path, train_cfg, data_cfg)?;
            if *t.model.config() != model_cfg {
                return Err(AppError::Usage(format!(
                    "checkpoint {} was built with a different model configuration",
                    path.display()
                )));
            }
            t
        }
        None => Trainer::new(model_cfg, train_cfg, data_cfg)?,
    };
    let stdout = std::io::stdout();
    let mut log = BufWriter::new(stdout.lock());
    trainer.run(&mut log, Some(ckpt), |iter, v| print_val(iter, v))?;
    log.flush().map_err(|e| AppError::Io(e.to_string()))?;
    if trainer.data_cfg.val_images > 0 {
        print_val(trainer.iter, trainer.validate()?);
    }
    Ok(())
}

fn print_val(iter: usize, v: ValSummary) {
    eprintln!(
        "val\t{iter}\tpsnr\t{:.4}\tssim\t{:.4}\tpsnr_noisy\t{:.4}",
        v.psnr, v.ssim, v.psnr_noisy
    );
}

fn ppm_names(dir: &Path) -> Result<Vec<String>, AppError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(AppError::Io(format!(
            "{}: no .ppm files found",
            dir.display()
        )));
    }
    Ok(names)
}

fn denoise(ckpt: &Path, input: &Path, out: &Path) -> Result<(), AppError> {
    let model = load_model::<f32>(ckpt)?;
    if input.is_dir() {
        std::fs::create_dir_all(out)
            .map_err(|e| AppError::Io(format!("{}: {e}", out.display())))?;
        for name in ppm_names(input)? {
            denoise_one(&model, &input.join(&name), &out.join(&name))?;
        }
        Ok(())
    } else {
        denoise_one(&model, input, out)
    }
}

fn denoise_one(model: &ThunderModel<f32>, input: &Path, out: &Path) -> Result<(), AppError> {
    let noisy = load_image::<f32>(input)?;
    let outputs = model.forward(&noisy)?;
    save_image(&outputs.i_c, out)?;
    Ok(())
}

fn eval(ckpt: &Path, clean_dir: &Path, noisy_dir: &Path) -> Result<(), AppError> {
    let model = load_model::<f32>(ckpt)?;
    let pairs = load_pairs::<f32>(clean_dir, noisy_dir)?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut w = |line: String| writeln!(out, "{line}").map_err(|e| AppError::Io(e.to_string()));
    w("name\tpsnr\tssim".to_string())?;
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    let count = pairs.len();
    for (name, clean, noisy) in pairs {
        let outputs = model.forward(&noisy)?;
        let p = psnr(&outputs.i_c, &clean, 1.0)?;
        let s = ssim(&outputs.i_c, &clean)?.value()?.as_f64();
        w(format!("{name}\t{p}\t{s}"))?;
        p_sum += p;
        s_sum += s;
    }
    w(format!(
        "mean\t{}\t{}",
        p_sum / count as f64,
        s_sum / count as f64
    ))?;
    out.flush().map_err(|e| AppError::Io(e.to_string()))
}

fn inspect(config: &Path, input_size: usize, ablations: Ablations) -> Result<(), AppError> {
    let (model_cfg, train_cfg, _) = parse_config(config)?;
    let model_cfg = validated(model_cfg, &train_cfg, ablations)?;
    let report = CostReport::new(&model_cfg, (input_size, input_size))
        .map_err(|e| AppError::Usage(e.to_string()))?;
    println!("{report}");
    println!(
        "# reference totals for the full-scale configuration: {REFERENCE_PARAMS} params, {REFERENCE_FLOPS} flops@256x256 (diagnostic only)"
    );
    println!(
        "# this configuration: {} params ({:+.1}% vs reference), lr0 {}",
        report.params_total,
        100.0 * (report.params_total as f64 - REFERENCE_PARAMS as f64) / REFERENCE_PARAMS as f64,
        lr_at(&train_cfg, 0),
    );
    Ok(())
}

fn subspace(ckpt: &Path, input: &Path, energy: f64) -> Result<(), AppError> {
    let model = load_model::<f32>(ckpt)?;
    let mut images: Vec<(String, Tensor<f32>)> = vec![];
    if input.is_dir() {
        for name in ppm_names(input)? {
            images.push((name.clone(), load_image(&input.join(&name))?));
        }
    } else {
        images.push((input.display().to_string(), load_image(input)?));
    }
    println!("name\tlevel\tchannels\trank_pre\trank_post");
    for (name, noisy) in images {
        for row in analyze_subspace(&model, &noisy, energy)? {
            println!(
                "{name}\t{}\t{}\t{}\t{}",
                row.level, row.channels, row.rank_pre, row.rank_post
            );
        }
    }
    Ok(())
}
