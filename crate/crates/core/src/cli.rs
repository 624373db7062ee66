//! The `troikit` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or I/O
//! error, 4 failed numeric check.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::TroiNet;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{ablation_grid, ablation_table};
use crate::gradcheck::{check_all, check_op, GradcheckConfig};
use crate::posenc::Direction;
use crate::synth::{
    build_dataset, load_dataset, save_dataset, Corruption, DatasetSpec, SynthClass,
};
use crate::tensor::{Precision, Real};
use crate::train::{evaluate_with, train, worker_pool, TrainState};
use crate::troi::Insertion;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.log";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(
    name = "troikit",
    version,
    about = "Relation blocks over ROI features in video CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset to disk.
    Gen(GenArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally with corrupted boxes.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train every placement and depth combination and print a table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Scene,
    Coord,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Plain CNN without the relation block.
    #[arg(long)]
    no_troi: bool,
    #[arg(long)]
    troi_at: Option<Insertion>,
    #[arg(long)]
    troi_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long)]
    direction: Option<Direction>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.precision {
            c.precision = v;
        }
        if self.no_troi {
            c.troi = false;
        }
        if let Some(v) = self.troi_at {
            c.troi_at = v;
        }
        if let Some(v) = self.troi_layers {
            c.troi_layers = v;
        }
        if let Some(v) = self.heads {
            c.heads = v;
        }
        if let Some(v) = self.direction {
            c.direction = v;
        }
        for v in &self.variant {
            match v {
                Variant::Scene => c.scene_token = true,
                Variant::Coord => c.coord_encoding = true,
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoint, metrics log and resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    corrupt: Option<Corruption>,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single op.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "conv3,conv4,conv5")]
    placements: Vec<Insertion>,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    layers: Vec<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let pool = match worker_pool() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    match pool.install(|| dispatch(cli.command, out)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut (dyn Write + Send)) -> Result<i32> {
    match command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
    }
}

fn cmd_gen(a: &GenArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let spec = DatasetSpec {
        classes: a.classes,
        per_class: a.per_class,
        frames: a.frames,
        size: a.size,
        seed: a.seed,
    };
    if a.out.join(crate::synth::MANIFEST).exists() && !a.force {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!(
                "{} already holds a dataset; pass --force to overwrite",
                a.out.display()
            ),
        )));
    }
    let videos = build_dataset(&spec)?;
    save_dataset(&a.out, &videos, a.force)?;
    writeln!(out, "wrote {} videos to {}", videos.len(), a.out.display())?;
    Ok(EXIT_OK)
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or config key)")))
}

fn cmd_train(a: &TrainArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let mut config = a.model.resolve()?;
    if let Some(d) = &a.data {
        config.train_data = Some(d.clone());
    }
    if let Some(d) = &a.val {
        config.val_data = Some(d.clone());
    }
    config.checkpoint = Some(a.out.join(CHECKPOINT_FILE));
    config.metrics = Some(a.out.join(METRICS_FILE));
    config.validate()?;
    match config.precision {
        Precision::F32 => train_with::<f32>(&config, a.resume, out),
        Precision::F64 => train_with::<f64>(&config, a.resume, out),
    }
}

fn train_with<T: Real>(
    config: &RunConfig,
    resume: bool,
    out: &mut (dyn Write + Send),
) -> Result<i32> {
    let train_set = load_dataset(&required(&config.train_data, "training data")?)?;
    let val_set = match &config.val_data {
        Some(dir) => load_dataset(dir)?,
        None => Vec::new(),
    };
    let ckpt_path = required(&config.checkpoint, "checkpoint path")?;
    let metrics_path = required(&config.metrics, "metrics path")?;
    if let Some(dir) = ckpt_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(ckpt_path.with_file_name(CONFIG_FILE), config.to_text())?;
    let model_text = config.model_text();
    let mut net = TroiNet::<T>::new(config.model_config(), config.seed)?;
    let mut state = TrainState::new(&net.store);
    let resuming = resume && ckpt_path.exists();
    if resuming {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.model_text != model_text {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                ckpt_path.display()
            )));
        }
        ckpt.restore(&mut net)?;
        state = ckpt.train_state(&net)?;
        writeln!(out, "resuming at epoch {}", state.epoch)?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&metrics_path)?;
    let cfg = config.train_config();
    let mut echo = Tee {
        file: &mut log,
        out: &mut *out,
    };
    train(
        &mut net,
        &mut state,
        &train_set,
        &val_set,
        &cfg,
        &mut echo,
        |net, state| Checkpoint::capture(&model_text, net, state).save(&ckpt_path),
    )?;
    writeln!(out, "checkpoint {}", ckpt_path.display())?;
    Ok(EXIT_OK)
}

/// Writes to a file and echoes to the console.
struct Tee<'a> {
    file: &'a mut fs::File,
    out: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.file.write_all(buf)?;
        self.out.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()?;
        self.out.flush()
    }
}

fn cmd_eval(a: &EvalArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let metrics = match a.precision {
        Precision::F32 => evaluate_with(&ckpt.build_model::<f32>()?, &data, a.topk, a.corrupt)?,
        Precision::F64 => evaluate_with(&ckpt.build_model::<f64>()?, &data, a.topk, a.corrupt)?,
    };
    let names: Vec<&str> = SynthClass::ALL.iter().map(|c| c.name()).collect();
    writeln!(
        out,
        "boxes {}",
        a.corrupt.map_or("gt".into(), |c| c.to_string())
    )?;
    write!(out, "{}", metrics.report(&names))?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        points: a.points,
        perturb: a.perturb,
        ..GradcheckConfig::default()
    };
    let results = match &a.op {
        Some(op) => vec![check_op(op, &cfg)?],
        None => check_all(&cfg)?,
    };
    for r in &results {
        writeln!(out, "{r}")?;
    }
    Ok(if results.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}

fn load_or_generate(
    dir: &Option<PathBuf>,
    spec: DatasetSpec,
) -> Result<Vec<crate::synth::SynthVideo>> {
    match dir {
        Some(d) => load_dataset(d),
        None => build_dataset(&spec),
    }
}

fn cmd_ablate(a: &AblateArgs, out: &mut (dyn Write + Send)) -> Result<i32> {
    let config = a.model.resolve()?;
    config.validate()?;
    let (train_spec, val_spec) = crate::experiment::standard_datasets();
    let train_set = load_or_generate(&a.data, train_spec)?;
    let val_set = load_or_generate(&a.val, val_spec)?;
    let table = match config.precision {
        Precision::F32 => ablation_table(
            &ablation_grid::<f32>(&config, &a.placements, &a.layers, &train_set, &val_set)?,
            config.topk,
        ),
        Precision::F64 => ablation_table(
            &ablation_grid::<f64>(&config, &a.placements, &a.layers, &train_set, &val_set)?,
            config.topk,
        ),
    };
    write!(out, "{table}")?;
    Ok(EXIT_OK)
}

/// Reads a whole metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<crate::train::EpochRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(crate::train::EpochRecord::parse)
        .collect()
}
