//! The `scent` command line: dataset generation, training, evaluation,
//! feature visualization and gradient checks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

pub mod checkpoint;
pub mod config;
pub mod run;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::evalkit::{format_table, predict_depth, run_benchmark, to_jsonl, Condition};
use crate::featviz::{depth_to_rgb, gray_to_rgb, image_to_rgb, montage, visualize_features, VizConfig};
use crate::imageio::{encode_rgb8, load_ppm};
use crate::losscheck::loss_suite;
use crate::models::{forward_depth, forward_texture, ToyNetConfig};
use crate::nn::Binder;
use crate::tensor::{Precision, Tape};

use checkpoint::{load_checkpoint, Checkpoint, MANIFEST_FILE};
use config::RunConfig;
use run::{generate_dataset, load_dataset, train, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "scent", version, about = "Structure-centric self-supervised depth on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset of target/source triplets with ground truth.
    Datagen {
        /// Output directory; one sample_NNNNN subdirectory per sample.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        count: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x48")]
        size: String,
        /// Seed of the per-sample scene seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the samples of an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes a checkpoint directory with a JSON-lines log.
    Train {
        /// Dataset directory; overrides train_data from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run config of `key = value` lines; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Disable illumination/texture disentangling.
        #[arg(long)]
        no_ti: bool,
        /// Disable semantic distillation.
        #[arg(long)]
        no_sd: bool,
        /// Disable the learnable graph projection in distillation.
        #[arg(long)]
        no_gp: bool,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Overwrite an existing checkpoint in --out.
        #[arg(long)]
        force: bool,
        /// Stop after this many steps in total, checkpointing mid-epoch.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Benchmark a checkpoint on clean and corrupted frames.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory; defaults to eval_data from the checkpoint's config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated conditions: clear, fog, snow, frost, motion_blur, night.
        #[arg(long, default_value = "clear")]
        conditions: String,
        /// Corruption severity, 1 to 5.
        #[arg(long, default_value_t = 3)]
        severity: u8,
        /// Seed of the corruption noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the records as JSON lines to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render principal-component maps of the encoder features and the depth.
    Viz {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary PPM) at the model's resolution.
        #[arg(long)]
        image: PathBuf,
        /// Output directory for structure.pgm, texture.pgm, depth.ppm and montage.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every loss on random inputs.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// 64 or 32.
        #[arg(long, default_value_t = 64)]
        precision: u32,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parses `WxH`.
pub fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--size expects WxH, got {s:?}"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn open_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", dir.display())));
    }
    Ok(load_checkpoint(dir)?)
}

fn datagen(out: &Path, count: usize, size: &str, seed: u64, force: bool) -> CliResult {
    let (width, height) = parse_size(size)?;
    ToyNetConfig { width, height, ..ToyNetConfig::default() }.validate()?;
    generate_dataset(out, count, width, height, seed, force)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    data: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    no_ti: bool,
    no_sd: bool,
    no_gp: bool,
    opts: TrainOptions,
) -> CliResult {
    let mut cfg = match config {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None if opts.resume => load_checkpoint(out)?.config,
        None => RunConfig::default(),
    };
    cfg.toggles.ti &= !no_ti;
    cfg.toggles.sd &= !no_sd;
    cfg.toggles.gp &= !no_gp;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None if !cfg.train_data.is_empty() => PathBuf::from(&cfg.train_data),
        None => return Err(CliError::Usage("no training data: pass --data or set train_data".into())),
    };
    let samples = load_dataset(&data)?;
    let result = train(&cfg, &samples, out, opts)?;
    println!("trained {} steps; checkpoint in {}", result.state.step, out.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: Option<&Path>, conditions: &str, severity: u8, seed: u64, json: Option<&Path>) -> CliResult {
    let conds = conditions
        .split(',')
        .map(|c| Condition::parse(c.trim(), severity))
        .collect::<crate::Result<Vec<_>>>()?;
    let ck = open_checkpoint(ckpt)?;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None if !ck.config.eval_data.is_empty() => PathBuf::from(&ck.config.eval_data),
        None => return Err(CliError::Usage("no evaluation data: pass --data or set eval_data".into())),
    };
    let samples = load_dataset(&data)?;
    let records = run_benchmark(&ck.bundle, &samples, &conds, seed)?;
    print!("{}", format_table(&records));
    if let Some(path) = json {
        fs::write(path, to_jsonl(&records)?).map_err(Error::from)?;
    }
    Ok(())
}

fn viz_cmd(ckpt: &Path, image: &Path, out: &Path) -> CliResult {
    let ck = open_checkpoint(ckpt)?;
    if !image.is_file() {
        return Err(CliError::Usage(format!("image {} does not exist", image.display())));
    }
    let img = load_ppm(image)?;
    let (h, w) = (ck.config.height, ck.config.width);
    if img.shape() != [1, 3, h, w] {
        return Err(CliError::Usage(format!("image is {:?}, the model expects {w}x{h}", img.shape())));
    }
    let tape = Tape::new(Precision::Single);
    let b = Binder::new(&tape, &ck.bundle.store);
    let x = tape.constant(img.clone());
    let structure = forward_depth(&ck.bundle, &b, x)?.deepest().value();
    let texture = forward_texture(&ck.bundle, &b, x)?.last().expect("encoder levels").value();
    let depth = predict_depth(&ck.bundle, &img)?;

    let viz = VizConfig::new(h, w);
    let structure_img = visualize_features(&[structure], &viz)?;
    let texture_img = visualize_features(&[texture], &viz)?;
    let depth_rgb = depth_to_rgb(&depth)?;
    let panels = [image_to_rgb(&img)?, gray_to_rgb(&structure_img), gray_to_rgb(&texture_img), depth_rgb.clone()];

    fs::create_dir_all(out).map_err(Error::from)?;
    let write = |name: &str, bytes: Vec<u8>| fs::write(out.join(name), bytes).map_err(Error::from);
    write("structure.pgm", structure_img.to_pgm())?;
    write("texture.pgm", texture_img.to_pgm())?;
    write("depth.ppm", encode_rgb8(&depth_rgb, w, h)?)?;
    write("montage.ppm", encode_rgb8(&montage(&panels, w, h)?, w * panels.len(), h)?)?;
    println!("wrote structure.pgm, texture.pgm, depth.ppm, montage.ppm to {}", out.display());
    Ok(())
}

fn gradcheck_cmd(seed: u64, precision: u32, seeds: u64) -> CliResult<bool> {
    let precision = match precision {
        64 => Precision::Double,
        32 => Precision::Single,
        p => return Err(CliError::Usage(format!("--precision must be 64 or 32, got {p}"))),
    };
    let mut all = true;
    for s in seed..seed + seeds.max(1) {
        let suite = loss_suite(s, precision)?;
        for r in &suite.gradients {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            println!(
                "{verdict} seed={s} {:<22} rel_err={:.3e} compared={} excluded={}",
                r.name, r.relative_error, r.compared, r.excluded
            );
        }
        for r in &suite.stop_gradients {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            println!("{verdict} seed={s} stop-gradient {:<27} max|grad|={:e}", r.name, r.max_abs_grad);
        }
        all &= suite.passed();
    }
    Ok(all)
}

/// Runs one parsed command and returns its exit code; errors go to stderr.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Datagen { out, count, size, seed, force } => datagen(&out, count, &size, seed, force),
        Command::Train { data, config, out, no_ti, no_sd, no_gp, resume, force, max_steps } => train_cmd(
            data.as_deref(),
            config.as_deref(),
            &out,
            no_ti,
            no_sd,
            no_gp,
            TrainOptions { resume, force, max_steps },
        ),
        Command::Eval { ckpt, data, conditions, severity, seed, json } => {
            eval_cmd(&ckpt, data.as_deref(), &conditions, severity, seed, json.as_deref())
        }
        Command::Viz { ckpt, image, out } => viz_cmd(&ckpt, &image, &out),
        Command::Gradcheck { seed, precision, seeds } => match gradcheck_cmd(seed, precision, seeds) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_FAILURE,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_OK
            }
        }
    }
}
