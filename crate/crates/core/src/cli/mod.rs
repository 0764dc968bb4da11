//! The `wsol` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error,
//! 3 numerical failure (including a failed gradient check).

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

use crate::data::{self, pnm, DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, extract_box, predict_all, DEFAULT_THETA};
use crate::gradcheck::{self, GradcheckConfig};
use crate::losses::Term;
use crate::model::WsolNet;
use crate::train::{train_epochs, Checkpoint, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "WSOL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wsol", version, about = "Weakly supervised object localization on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the foreground heatmap of one image.
    Infer(InferArgs),
    /// Check every loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Turn off a weighted loss term; repeatable.
    #[arg(long = "disable", value_name = "TERM")]
    pub disable: Vec<Term>,
    /// Continue from a checkpoint up to the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Per-epoch log file; defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Heatmap binarization fraction of the maximum.
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Also report IoU thresholds 0.1 to 0.9.
    #[arg(long)]
    pub sweep: bool,
    /// Machine-readable metrics; defaults to the checkpoint path plus
    /// `.metrics`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Heatmap channel; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THETA)]
    pub theta: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Gradcheck(a) => grad(a, out),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Worker count from the environment, default 1.
pub fn env_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} = `{v}` is not a positive integer"))),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = DatasetSpec {
        num_classes: a.classes,
        samples_per_class: a.per_class,
        image_size: a.size,
        noise_level: a.noise,
        seed: a.seed,
    };
    say(
        out,
        format!(
            "out = {}\nnum_classes = {}\nsamples_per_class = {}\nimage_size = {}\nnoise_level = {}\nseed = {}\n",
            a.out.display(),
            spec.num_classes,
            spec.samples_per_class,
            spec.image_size,
            spec.noise_level,
            spec.seed
        ),
    )?;
    let samples = data::generate(&spec)?;
    data::save(&a.out, &samples)?;
    say(out, format!("wrote {} samples to {}\n", samples.len(), a.out.display()))?;
    Ok(EXIT_OK)
}

/// Class count and square image side of a dataset.
fn dataset_shape(samples: &[Sample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let size = first.image_size();
    if let Some(s) = samples.iter().find(|s| s.image_size() != size) {
        return Err(Error::Config(format!("mixed image sizes {size} and {}", s.image_size())));
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    Ok((classes.max(2), size))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let samples = data::load(&a.data)?;
    let (classes, size) = dataset_shape(&samples)?;
    let mut cfg = RunConfig::default();
    cfg.model.num_classes = classes;
    cfg.model.input_size = size;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
        cfg.model.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    for t in &a.disable {
        if *t == Term::Cls {
            return Err(Error::Config("`cls` cannot be disabled".into()));
        }
        cfg.loss.set_enabled(*t, false);
    }
    cfg.train.threads = cfg.train.threads.max(1).min(env_threads()?);
    if cfg.model.input_size != size {
        return Err(Error::Config(format!("input_size = {} but the dataset images are {size}", cfg.model.input_size)));
    }
    if cfg.model.num_classes < classes {
        return Err(Error::Config(format!(
            "num_classes = {} but the dataset has labels up to {}",
            cfg.model.num_classes,
            classes - 1
        )));
    }
    cfg.validate()?;

    let mut state = match &a.resume {
        Some(path) => {
            let state = Checkpoint::load(path)?.into_state()?;
            if *state.net.config() != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model configuration", path.display())));
            }
            state
        }
        None => TrainState::new(WsolNet::init(cfg.model.clone())?, cfg.train.seed),
    };
    say(out, format!("# resolved configuration\ndata = {}\nout = {}\n{}", a.data.display(), a.out.display(), cfg.render()))?;
    say(out, format!("# {} samples, {} parameters, starting at epoch {}\n", samples.len(), state.net.parameter_count(), state.epoch))?;

    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));
    let mut log = String::new();
    let mut write_err = None;
    train_epochs(&mut state, &samples, &cfg.train, &cfg.loss, |l| {
        let line = format!("{l}\n");
        if let Err(e) = say(out, &line) {
            write_err.get_or_insert(e);
        }
        log.push_str(&line);
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Checkpoint::from_state(&state).save(&a.out)?;
    say(out, format!("wrote {} and {}\n", a.out.display(), log_path.display()))?;
    Ok(EXIT_OK)
}

fn load_net(path: &Path) -> Result<WsolNet> {
    Ok(Checkpoint::load(path)?.into_state()?.net)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    say(
        out,
        format!(
            "# resolved configuration\ndata = {}\nckpt = {}\ntheta = {}\niou = {}\nsweep = {}\n",
            a.data.display(),
            a.ckpt.display(),
            a.theta,
            a.iou,
            a.sweep
        ),
    )?;
    let net = load_net(&a.ckpt)?;
    let samples = data::load(&a.data)?;
    let (classes, size) = dataset_shape(&samples)?;
    let model = net.config();
    if classes != model.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the dataset has {classes}",
            model.num_classes
        )));
    }
    if size != model.input_size {
        return Err(Error::Config(format!(
            "checkpoint expects {0}x{0} images but the dataset has {size}x{size}",
            model.input_size
        )));
    }
    let report = evaluate(&samples, &predict_all(&net, &samples)?, a.iou, a.theta)?;
    say(out, report.table(a.sweep))?;
    let path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.ckpt, ".metrics"));
    fs::write(&path, report.machine_lines(a.sweep)).map_err(|e| Error::io(&path, e))?;
    say(out, format!("wrote {}\n", path.display()))?;
    Ok(EXIT_OK)
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<i32> {
    say(
        out,
        format!(
            "# resolved configuration\nckpt = {}\nimage = {}\nout = {}\nclass = {}\ntheta = {}\n",
            a.ckpt.display(),
            a.image.display(),
            a.out.display(),
            a.class.map_or("predicted".to_string(), |k| k.to_string()),
            a.theta
        ),
    )?;
    let net = load_net(&a.ckpt)?;
    let image = pnm::read_ppm(&a.image)?;
    if let Some(k) = a.class {
        if k >= net.config().num_classes {
            return Err(Error::Config(format!("--class {k} but the checkpoint has {} classes", net.config().num_classes)));
        }
    }
    let p = net.predict(&image, a.class)?;
    pnm::write_pgm(&a.out, &p.heatmap)?;
    let predicted = crate::eval::ranked_classes(&p.probs)[0];
    let bbox = extract_box(&p.heatmap, a.theta)?;
    say(out, format!("predicted class {predicted} (p = {:.4})\n", p.probs[predicted]))?;
    say(out, format!("heatmap class {}\nbox {bbox}\nwrote {}\n", p.class, a.out.display()))?;
    Ok(EXIT_OK)
}

fn grad(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = GradcheckConfig { seed: a.seed, corrupt_backward: a.corrupt_backward, ..Default::default() };
    say(
        out,
        format!(
            "# resolved configuration\nseed = {}\nstep = {}\ntolerance = {}\nfloor = {}\n",
            cfg.seed, cfg.step, cfg.tolerance, cfg.floor
        ),
    )?;
    let reports = gradcheck::run(&cfg)?;
    for r in &reports {
        let mark = if r.passed(cfg.tolerance) { "ok  " } else { "FAIL" };
        say(out, format!("{mark} {r}\n"))?;
    }
    if gradcheck::passed(&reports, &cfg) {
        say(out, "all seven terms within tolerance\n")?;
        Ok(EXIT_OK)
    } else {
        say(out, "gradient check failed\n")?;
        Ok(EXIT_NUMERICAL)
    }
}
