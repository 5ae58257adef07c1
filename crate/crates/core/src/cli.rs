//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` (flat `key = value` lines) and
//! `--seed`; explicit flags override the file. The resolved configuration
//! is printed to stderr before any work starts.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::degrade::{degrade, DegradeSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{load_checkpoint, read_png, save_checkpoint, write_csv, write_png};
use crate::kernel::{named_kernel, sample_kernel_params, Kernel, KernelSpec, SubsampleMode, DEFAULT_KERNEL_SIZE};
use crate::meta::{meta_train, pretrain, TrainEvent};
use crate::metrics::{psnr_y, ssim_y};
use crate::network::ModelParams;
use crate::synth;
use crate::zssr::{meta_test, mismatch_probe, ProbeSetup};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "mzsr",
    version,
    about = "Meta-transfer learning for zero-shot super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train θ_T on bicubic degradations.
    Pretrain(TrainCmd),
    /// Meta-transfer training from θ_T to θ_M.
    MetaTrain(MetaTrainCmd),
    /// Adapt θ_M to one LR image and super-resolve it.
    MetaTest(MetaTestCmd),
    /// Blur, subsample and optionally add noise to an HR image.
    Degrade(DegradeCmd),
    /// Write a blur kernel grid.
    Kernel(KernelCmd),
    /// Y-channel PSNR and SSIM between images or directories.
    Eval(EvalCmd),
    /// Score meta-test under several candidate kernels.
    Probe(ProbeCmd),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct Hyper {
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    unroll_steps: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    task_batch: Option<usize>,
    #[arg(long)]
    task_pairs: Option<usize>,
    #[arg(long)]
    pretrain_iters: Option<usize>,
    #[arg(long)]
    pretrain_batch: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    meta_iters: Option<usize>,
    #[arg(long)]
    first_order: bool,
    /// Multi-scale tasks, e.g. `2-4`.
    #[arg(long)]
    scale_range: Option<String>,
    /// Inner-loop pairs: `hr` or `son`.
    #[arg(long)]
    task_train: Option<String>,
}

impl Hyper {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("depth", self.depth.map(|v| v.to_string()));
        push("features", self.features.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("unroll_steps", self.unroll_steps.map(|v| v.to_string()));
        push("patch", self.patch.map(|v| v.to_string()));
        push("scale", self.scale.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("task_batch", self.task_batch.map(|v| v.to_string()));
        push("task_pairs", self.task_pairs.map(|v| v.to_string()));
        push("pretrain_iters", self.pretrain_iters.map(|v| v.to_string()));
        push("pretrain_batch", self.pretrain_batch.map(|v| v.to_string()));
        push("pretrain_lr", self.pretrain_lr.map(|v| v.to_string()));
        push("meta_iters", self.meta_iters.map(|v| v.to_string()));
        push("first_order", self.first_order.then(|| "true".to_string()));
        push("scale_range", self.scale_range.clone());
        push("task_train", self.task_train.clone());
        out
    }
}

#[derive(Args, Debug, Clone)]
struct Corpus {
    /// Directory of 8-bit PNG training images.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use this many procedural training images instead of `--data`.
    #[arg(long, default_value_t = 16)]
    synthetic: usize,
    /// Side of each procedural image.
    #[arg(long, default_value_t = 96)]
    synthetic_size: usize,
}

#[derive(Args, Debug, Clone)]
struct TrainOutput {
    /// Final checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// `iter,loss` CSV log; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for the periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    corpus: Corpus,
    #[command(flatten)]
    output: TrainOutput,
}

#[derive(Args, Debug)]
struct MetaTrainCmd {
    /// Pretrained θ_T checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    corpus: Corpus,
    #[command(flatten)]
    output: TrainOutput,
}

#[derive(Args, Debug)]
struct MetaTestCmd {
    #[arg(long = "in")]
    input: PathBuf,
    /// Named kernel or kernel grid file.
    #[arg(long)]
    kernel: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of gradient-descent updates.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct DegradeCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    kernel: String,
    #[arg(long)]
    out: PathBuf,
    /// Gaussian noise σ on the `[0, 1]` scale.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct KernelCmd {
    /// One of the named evaluation kernels.
    #[arg(long, conflicts_with_all = ["theta", "random"])]
    name: Option<String>,
    #[arg(long, requires_all = ["lambda1", "lambda2"])]
    theta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Sample a training kernel for the configured scale.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIZE)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Super-resolved image or directory.
    #[arg(long)]
    sr: PathBuf,
    /// Ground-truth image or directory.
    #[arg(long)]
    hr: PathBuf,
    /// Border crop; defaults to the scale.
    #[arg(long)]
    border: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args, Debug)]
struct ProbeCmd {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    hr: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated kernel names or files.
    #[arg(long, value_delimiter = ',')]
    probes: Vec<String>,
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long)]
    border: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    hyper: Hyper,
}

/// Failures split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(common: &Common, hyper: &Hyper) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let usage = |e: Error| Failure::Usage(e.to_string());
    if let Some(path) = &common.config {
        cfg.merge_file(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Runtime(e),
            other => usage(other),
        })?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v).map_err(usage)?;
    }
    for (k, v) in hyper.pairs() {
        cfg.set(k, &v).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn announce(cfg: &RunConfig, extra: &[(&str, String)]) {
    let mut s = String::from("# resolved config\n");
    s.push_str(&cfg.to_config_string());
    for (k, v) in extra {
        let _ = writeln!(s, "{k} = {v}");
    }
    eprint!("{s}");
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

fn load_corpus(corpus: &Corpus, seed: u64) -> Result<Vec<Image>> {
    match &corpus.data {
        Some(dir) => list_pngs(dir)?.iter().map(|p| read_png(p)).collect(),
        None => Ok(synth::corpus(
            seed,
            corpus.synthetic,
            corpus.synthetic_size,
            corpus.synthetic_size,
        )),
    }
}

/// A kernel name, or a path to a grid written by `kernel`.
fn load_kernel(arg: &str) -> Result<(Kernel, Option<SubsampleMode>)> {
    match named_kernel(arg) {
        Ok(named) => Ok((named.spec.rasterize()?, Some(named.mode))),
        Err(Error::UnknownKernel(_)) if Path::new(arg).exists() => {
            let path = Path::new(arg);
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok((Kernel::from_text(&text)?, None))
        }
        Err(e) => Err(e),
    }
}

/// Explicit `--mode` wins, then the named kernel's mode, then the config.
fn pick_mode(hyper: &Hyper, cfg: &RunConfig, from_kernel: Option<SubsampleMode>) -> SubsampleMode {
    if hyper.mode.is_some() {
        cfg.mode
    } else {
        from_kernel.unwrap_or(cfg.mode)
    }
}

fn train_observer<'a>(
    rows: &'a mut Vec<String>,
    to_stdout: bool,
    dir: Option<&'a Path>,
    prefix: &'a str,
    failure: &'a mut Option<Error>,
) -> impl FnMut(TrainEvent<'_>) + 'a {
    move |event| match event {
        TrainEvent::Step { iter, loss } => {
            let row = format!("{iter},{loss:.9e}");
            if to_stdout {
                println!("{row}");
            }
            rows.push(row);
        }
        TrainEvent::Checkpoint { iter, params } => {
            if let Some(dir) = dir {
                let path = dir.join(format!("{prefix}_{iter:07}.ckpt"));
                if let Err(e) = save_checkpoint(params, &path) {
                    failure.get_or_insert(e);
                }
            }
        }
    }
}

fn finish_training(output: &TrainOutput, params: &ModelParams, rows: &[String], failure: Option<Error>) -> Result<()> {
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(log) = &output.log {
        write_csv(log, "iter,loss", rows)?;
    }
    save_checkpoint(params, &output.out)
}

fn prepare_dir(output: &TrainOutput) -> Result<()> {
    if let Some(dir) = &output.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn run_pretrain(cmd: TrainCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    announce(&cfg, &[("out", cmd.output.out.display().to_string())]);
    prepare_dir(&cmd.output)?;
    let corpus = load_corpus(&cmd.corpus, cfg.seed)?;
    let mut rows = Vec::new();
    let mut failure = None;
    if cmd.output.log.is_none() {
        println!("iter,loss");
    }
    let params = {
        let mut obs = train_observer(
            &mut rows,
            cmd.output.log.is_none(),
            cmd.output.checkpoint_dir.as_deref(),
            "pretrain",
            &mut failure,
        );
        pretrain(&corpus, &cfg, &mut obs)?
    };
    finish_training(&cmd.output, &params, &rows, failure)?;
    Ok(())
}

fn run_meta_train(cmd: MetaTrainCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    announce(
        &cfg,
        &[
            ("init", cmd.init.display().to_string()),
            ("out", cmd.output.out.display().to_string()),
        ],
    );
    prepare_dir(&cmd.output)?;
    let theta_t = load_checkpoint(&cmd.init)?;
    let corpus = load_corpus(&cmd.corpus, cfg.seed)?;
    let mut rows = Vec::new();
    let mut failure = None;
    if cmd.output.log.is_none() {
        println!("iter,loss");
    }
    let params = {
        let mut obs = train_observer(
            &mut rows,
            cmd.output.log.is_none(),
            cmd.output.checkpoint_dir.as_deref(),
            "meta",
            &mut failure,
        );
        meta_train(&theta_t, &corpus, &cfg, &mut obs)?
    };
    finish_training(&cmd.output, &params, &rows, failure)?;
    Ok(())
}

fn run_meta_test(cmd: MetaTestCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    let (kernel, kernel_mode) = load_kernel(&cmd.kernel)?;
    let mode = pick_mode(&cmd.hyper, &cfg, kernel_mode);
    announce(
        &cfg,
        &[
            ("kernel", cmd.kernel.clone()),
            ("meta_test_mode", mode.to_string()),
            ("steps", cmd.steps.to_string()),
        ],
    );
    let theta = load_checkpoint(&cmd.ckpt)?;
    let lr = read_png(&cmd.input)?;
    let out = meta_test(&lr, &kernel, mode, cfg.scale, &theta, cmd.steps, cfg.alpha)?;
    write_png(&out.sr, &cmd.out)?;
    if let Some(trace) = &cmd.trace {
        let rows: Vec<String> = out
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.9e}"))
            .collect();
        write_csv(trace, "step,loss", &rows)?;
    }
    Ok(())
}

fn run_degrade(cmd: DegradeCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    let (kernel, kernel_mode) = load_kernel(&cmd.kernel)?;
    let mode = pick_mode(&cmd.hyper, &cfg, kernel_mode);
    announce(
        &cfg,
        &[
            ("kernel", cmd.kernel.clone()),
            ("degrade_mode", mode.to_string()),
            ("noise", cmd.noise.to_string()),
        ],
    );
    let hr = read_png(&cmd.input)?;
    let spec = DegradeSpec::new(kernel, cfg.scale, mode).with_noise(cmd.noise);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = degrade(&hr, &spec, &mut rng)?;
    write_png(&lr, &cmd.out)?;
    Ok(())
}

fn run_kernel(cmd: KernelCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    let spec = if let Some(name) = &cmd.name {
        let mut spec = named_kernel(name)?.spec;
        spec.size = cmd.size;
        spec
    } else if let Some(theta) = cmd.theta {
        // `requires_all` guarantees both widths are present.
        KernelSpec::new(theta, cmd.lambda1.unwrap_or(0.0), cmd.lambda2.unwrap_or(0.0), cmd.size)?
    } else if cmd.random {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut spec = sample_kernel_params(cfg.scale as f64, &mut rng);
        spec.size = cmd.size;
        spec
    } else {
        return Err(Failure::Usage(
            "kernel needs one of --name, --theta/--lambda1/--lambda2 or --random".into(),
        ));
    };
    announce(
        &cfg,
        &[
            ("theta", spec.theta.to_string()),
            ("lambda1", spec.lambda1.to_string()),
            ("lambda2", spec.lambda2.to_string()),
            ("size", spec.size.to_string()),
        ],
    );
    let kernel = spec.rasterize()?;
    std::fs::write(&cmd.out, kernel.to_text()).map_err(|e| Error::io(&cmd.out, e))?;
    Ok(())
}

fn pair_paths(sr: &Path, hr: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if sr.is_dir() && hr.is_dir() {
        let srs = list_pngs(sr)?;
        let hrs = list_pngs(hr)?;
        if srs.len() != hrs.len() {
            return Err(Error::Config(format!(
                "{} has {} PNGs but {} has {}",
                sr.display(),
                srs.len(),
                hr.display(),
                hrs.len()
            )));
        }
        Ok(srs.into_iter().zip(hrs).collect())
    } else {
        Ok(vec![(sr.to_path_buf(), hr.to_path_buf())])
    }
}

fn emit_csv(out: Option<&Path>, header: &str, rows: &[String]) -> Result<()> {
    match out {
        Some(path) => write_csv(path, header, rows),
        None => {
            println!("{header}");
            rows.iter().for_each(|r| println!("{r}"));
            Ok(())
        }
    }
}

fn run_eval(cmd: EvalCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    let border = cmd.border.unwrap_or(cfg.scale);
    announce(&cfg, &[("border", border.to_string())]);
    let pairs = pair_paths(&cmd.sr, &cmd.hr)?;
    let score = |(s, h): &(PathBuf, PathBuf)| -> Result<(f64, f64)> {
        let (a, b) = (read_png(s)?, read_png(h)?);
        Ok((psnr_y(&a, &b, border)?, ssim_y(&a, &b)?))
    };
    #[cfg(feature = "parallel")]
    let scores: Vec<(f64, f64)> = {
        use rayon::prelude::*;
        pairs.par_iter().map(score).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let scores: Vec<(f64, f64)> = pairs.iter().map(score).collect::<Result<_>>()?;

    let mut rows: Vec<String> = pairs
        .iter()
        .zip(&scores)
        .map(|((s, _), (p, q))| format!("{},{p:.6},{q:.6}", s.display()))
        .collect();
    let n = scores.len() as f64;
    let mean_p = scores.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_s = scores.iter().map(|s| s.1).sum::<f64>() / n;
    rows.push(format!("mean,{mean_p:.6},{mean_s:.6}"));
    emit_csv(cmd.out.as_deref(), "image,psnr_y,ssim_y", &rows)?;
    Ok(())
}

fn run_probe(cmd: ProbeCmd) -> std::result::Result<(), Failure> {
    let cfg = resolve(&cmd.common, &cmd.hyper)?;
    if cmd.probes.is_empty() {
        return Err(Failure::Usage("--probes needs at least one kernel".into()));
    }
    let border = cmd.border.unwrap_or(cfg.scale);
    announce(
        &cfg,
        &[
            ("probes", cmd.probes.join(",")),
            ("steps", cmd.steps.to_string()),
            ("border", border.to_string()),
        ],
    );
    let kernels = cmd
        .probes
        .iter()
        .map(|p| load_kernel(p).map(|k| k.0))
        .collect::<Result<Vec<_>>>()?;
    let theta = load_checkpoint(&cmd.ckpt)?;
    let lr = read_png(&cmd.input)?;
    let hr = read_png(&cmd.hr)?;
    let setup = ProbeSetup {
        theta_m: &theta,
        mode: cfg.mode,
        scale: cfg.scale,
        steps: cmd.steps,
        alpha: cfg.alpha,
        border,
    };
    let table = mismatch_probe(&lr, &hr, &kernels, &setup)?;
    let rows: Vec<String> = cmd
        .probes
        .iter()
        .zip(&table)
        .map(|(name, p)| format!("{name},{p:.6}"))
        .collect();
    emit_csv(cmd.out.as_deref(), "probe,psnr_y", &rows)?;
    Ok(())
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Pretrain(c) => run_pretrain(c),
        Command::MetaTrain(c) => run_meta_train(c),
        Command::MetaTest(c) => run_meta_test(c),
        Command::Degrade(c) => run_degrade(c),
        Command::Kernel(c) => run_kernel(c),
        Command::Eval(c) => run_eval(c),
        Command::Probe(c) => run_probe(c),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
