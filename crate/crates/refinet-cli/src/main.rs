//! `refinet` command line: train, refine, pyramid, gradcheck, eval.
//!
//! Exit codes: 0 success, 1 config/input error, 2 numeric abort (non-finite
//! loss), 3 gradient check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use refinet::config::RunConfig;
use refinet::data::{self, DataError};
use refinet::gradcheck::{run_suite, GradCheckOptions};
use refinet::metrics;
use refinet::models::Variant;
use refinet::training::{self, load_checkpoint, TrainError};

#[derive(Parser)]
#[command(name = "refinet", version, about = "Image-conditioned BEGAN refiner toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a refiner on a directory of PNG images
    Train(TrainArgs),
    /// Refine images with a trained checkpoint
    Refine(RefineArgs),
    /// Write every pyramid level of an image for inspection
    Pyramid(PyramidArgs),
    /// Check backend gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Refine a directory of images and score them against their sources
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Resume from this checkpoint (model and seed come from it; step
    /// budget and schedules from the resolved config)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    lambda_k: Option<f32>,
    #[arg(long)]
    lambda_r: Option<f32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    target_res: Option<usize>,
    #[arg(long)]
    lowest_res: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    convs_per_block: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct PyramidArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    lowest_res: usize,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random cases per op
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Test hook: corrupt one analytic gradient per case to exercise the
    /// failure path
    #[arg(long, hide = true)]
    perturb: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

enum CliError {
    /// Bad config or input: exit 1.
    Config(String),
    /// Non-finite loss during training: exit 2.
    Numeric(String),
    /// Gradient check out of tolerance: exit 3.
    GradCheck(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::GradCheck(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::GradCheck(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::NonFinite { .. } => CliError::Numeric(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

macro_rules! config_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::Config(err.to_string())
            }
        }
    )*};
}
config_error_from!(
    refinet::config::ConfigError,
    refinet::data::DataError,
    refinet::metrics::EvalError,
    refinet::models::ModelError,
    refinet::training::CheckpointError,
    refinet::backend::TensorError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Pyramid(args) => cmd_pyramid(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("REFINET_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("REFINET_SEED is not an integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn resolved_train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.data_dir {
        cfg.data_dir = Some(v.clone());
    }
    if let Some(v) = &args.output_dir {
        cfg.output_dir = Some(v.clone());
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = args.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.lambda_k {
        cfg.lambda_k = v;
    }
    if let Some(v) = args.lambda_r {
        cfg.lambda_r = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.total_steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.target_res {
        cfg.target_res = v;
    }
    if let Some(v) = args.lowest_res {
        cfg.lowest_res = v;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(v) = args.base_filters {
        cfg.base_filters = v;
    }
    if let Some(v) = args.embedding_dim {
        cfg.embedding_dim = v;
    }
    if let Some(v) = args.convs_per_block {
        cfg.convs_per_block = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    cfg.resolve_seed(env_seed()?);
    cfg.to_train_config().validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = resolved_train_config(&args)?;
    let data_dir = cfg.data_dir()?.to_path_buf();
    let output_dir = cfg.output_dir()?.to_path_buf();
    if !data_dir.is_dir() {
        return Err(CliError::Config(format!(
            "data_dir {} is not a directory",
            data_dir.display()
        )));
    }
    let train_config = cfg.to_train_config();
    let dataset = data::load_image_dir(&data_dir, train_config.target_res)?;

    std::fs::create_dir_all(&output_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", output_dir.display())))?;
    cfg.echo_into(&output_dir)?;

    let state = match &cfg.checkpoint {
        Some(ckpt) => {
            let mut state = load_checkpoint(ckpt)?;
            state.config.total_steps = train_config.total_steps;
            state.config.checkpoint_every = train_config.checkpoint_every;
            state.config.log_every = train_config.log_every;
            state
        }
        None => training::TrainState::new(train_config)?,
    };

    let outputs = training::train_from(state, &dataset, &output_dir)?;
    println!(
        "trained to step {} (k = {}); log: {}; checkpoint: {}",
        outputs.state.step,
        outputs.state.k_t,
        outputs.log_path.display(),
        outputs.final_checkpoint.display()
    );
    Ok(())
}

fn decode_exact(path: &Path) -> Result<refinet::backend::Tensor, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| CliError::Config(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    Ok(data::image_to_tensor(&img))
}

fn cmd_refine(args: RefineArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&args.checkpoint)?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let files = metrics::png_files(&args.input)?;
        if files.is_empty() {
            return Err(DataError::EmptyDir(args.input.clone()).into());
        }
        files
    } else {
        vec![args.input.clone()]
    };

    // Decode and refine everything before writing, so a bad input cannot
    // leave a partial output directory behind.
    let mut refined = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let tensor = decode_exact(path)?;
        let out = metrics::refine_image(&state.generator, &tensor).map_err(|e| {
            CliError::Config(format!("{}: {e}", path.display()))
        })?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        refined.push((format!("{stem}_refined.png"), out));
    }

    std::fs::create_dir_all(&args.output_dir).map_err(|e| {
        CliError::Config(format!("cannot create {}: {e}", args.output_dir.display()))
    })?;
    for (name, tensor) in &refined {
        metrics::write_png_atomic(tensor, &args.output_dir.join(name))?;
    }
    println!("refined {} image(s) into {}", refined.len(), args.output_dir.display());
    Ok(())
}

fn cmd_pyramid(args: PyramidArgs) -> Result<(), CliError> {
    let tensor = decode_exact(&args.input)?;
    let s = tensor.shape();
    if s.height != s.width {
        return Err(CliError::Config(format!(
            "{}: pyramid needs a square image, got {}x{}",
            args.input.display(),
            s.width,
            s.height
        )));
    }
    let pyramid = data::make_pyramid(&tensor, args.lowest_res)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.input.display())))?;

    std::fs::create_dir_all(&args.output_dir).map_err(|e| {
        CliError::Config(format!("cannot create {}: {e}", args.output_dir.display()))
    })?;
    let stem = args.input.file_stem().and_then(|v| v.to_str()).unwrap_or("image");
    for level in pyramid.levels() {
        let res = level.shape().height;
        metrics::write_png_atomic(level, &args.output_dir.join(format!("{stem}_{res}.png")))?;
    }
    println!(
        "wrote {} pyramid level(s) into {}",
        pyramid.levels().len(),
        args.output_dir.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let report = run_suite(&GradCheckOptions {
        seed,
        trials: args.trials,
        perturbation: args.perturb,
    });
    print!("{report}");
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!(
            "gradient check failed for: {}",
            report.failing_ops().join(", ")
        )))
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&args.checkpoint)?;
    let records = metrics::evaluate(&state, &args.input_dir, &args.output_dir)?;
    println!(
        "evaluated {} image(s); table: {}",
        records.len(),
        args.output_dir.join("eval.csv").display()
    );
    Ok(())
}
