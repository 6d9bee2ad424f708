//! Dataset directories and the checkpointed training loop.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::objective::{train_step, LossTerms, StepRecord};
use crate::optim::Adam;
use crate::synth::{load_sample, random_scene, save_sample, SceneSample};
use crate::tensor::Precision;

use super::checkpoint::{load_checkpoint, save_checkpoint, TrainState, MANIFEST_FILE};
use super::config::RunConfig;

pub const DATASET_FILE: &str = "dataset.txt";
pub const LOG_FILE: &str = "train.jsonl";

fn sample_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("sample_{i:05}"))
}

/// Per-sample scene seeds, drawn from one generator seeded by `seed`.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Generates `count` samples into `dir`, spread over the available cores.
/// A non-empty `dir` is an error unless `force`, which first removes the
/// samples and dataset file of a previous run.
pub fn generate_dataset(dir: &Path, count: usize, width: usize, height: usize, seed: u64, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!("{} is not empty (use --force to overwrite)", dir.display())));
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if path.is_dir() && name.starts_with("sample_") {
                fs::remove_dir_all(&path)?;
            } else if name == DATASET_FILE {
                fs::remove_file(&path)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    if count == 0 {
        log::warn!("--count 0: writing an empty dataset");
    }
    let seeds = sample_seeds(seed, count);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let seeds = &seeds;
                scope.spawn(move || -> Result<()> {
                    for i in (w..seeds.len()).step_by(workers) {
                        save_sample(&random_scene(seeds[i], width, height)?, &sample_dir(dir, i))?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("datagen worker panicked")?;
        }
        Ok(())
    })?;
    let meta = format!("count = {count}\nwidth = {width}\nheight = {height}\nseed = {seed}\n");
    fs::write(dir.join(DATASET_FILE), meta)?;
    Ok(())
}

/// Loads every `sample_*` directory in name order. Unreadable samples are
/// skipped with a warning; a dataset with nothing loadable is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("sample_")))
        .collect();
    dirs.sort();
    let mut samples = Vec::with_capacity(dirs.len());
    for d in &dirs {
        match load_sample(d) {
            Ok(s) => samples.push(s),
            Err(e) => log::warn!("skipping {}: {e}", d.display()),
        }
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("no loadable samples in {}", dir.display())));
    }
    Ok(samples)
}

/// One line of the training log.
#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochSummary),
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub skipped: usize,
}

/// Sample order of one epoch.
pub fn epoch_order(config: &RunConfig, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if config.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Replace an existing checkpoint instead of refusing.
    pub force: bool,
    /// Stop (with a checkpoint) once this many steps have been taken in total.
    pub max_steps: Option<u64>,
}

/// Outcome of [`train`].
pub struct TrainResult {
    pub bundle: ModelBundle,
    pub state: TrainState,
    /// Terms of the last step taken in this invocation.
    pub last_terms: Option<LossTerms>,
}

fn append_line(path: &Path, record: &LogRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Trains on `samples` for `config.epochs` epochs, writing a checkpoint to
/// `out` after every epoch and a JSON-lines log to `out/train.jsonl`.
pub fn train(config: &RunConfig, samples: &[SceneSample], out: &Path, opts: TrainOptions) -> Result<TrainResult> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    for s in samples {
        if (s.target.width(), s.target.height()) != (config.width, config.height) {
            return Err(Error::Config(format!(
                "sample is {}x{}, config expects {}x{}",
                s.target.width(),
                s.target.height(),
                config.width,
                config.height
            )));
        }
    }
    let log_path = out.join(LOG_FILE);
    let (mut bundle, mut adam, mut state) = if opts.resume {
        let ck = load_checkpoint(out)?;
        if ck.config != *config {
            return Err(Error::Config("resume config differs from the checkpoint's".into()));
        }
        (ck.bundle, ck.adam, ck.state)
    } else {
        if out.join(MANIFEST_FILE).exists() && !opts.force {
            return Err(Error::Config(format!(
                "{} already holds a checkpoint (use --resume or --force)",
                out.display()
            )));
        }
        fs::create_dir_all(out)?;
        if log_path.exists() {
            fs::remove_file(&log_path)?;
        }
        let bundle = ModelBundle::new(config.model())?;
        let adam = Adam::new(&bundle.store, config.adam, Precision::Single);
        (bundle, adam, TrainState::default())
    };

    let cfg = config.objective();
    let mut last_terms = None;
    while state.epoch < config.epochs {
        let order = epoch_order(config, state.epoch, samples.len());
        while state.position < order.len() {
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                save_checkpoint(out, config, state, &bundle, &adam)?;
                return Ok(TrainResult { bundle, state, last_terms });
            }
            let s = &samples[order[state.position]];
            let outcome = train_step(&mut bundle, &mut adam, &s.target, &s.sources, &cfg, &config.rates, state.epoch)?;
            append_line(&log_path, &LogRecord::Step(StepRecord::new(state.step, state.epoch, &outcome, &config.rates)))?;
            last_terms = Some(outcome.breakdown.terms);
            state.step += 1;
            state.position += 1;
        }
        let summary = epoch_summary(&log_path, state.epoch)?;
        log::info!("epoch {}: mean loss {:.5} over {} steps", summary.epoch, summary.mean_total, summary.steps);
        append_line(&log_path, &LogRecord::Epoch(summary))?;
        state.epoch += 1;
        state.position = 0;
        save_checkpoint(out, config, state, &bundle, &adam)?;
    }
    if state.step == 0 {
        save_checkpoint(out, config, state, &bundle, &adam)?;
    }
    Ok(TrainResult { bundle, state, last_terms })
}

/// Summarizes an epoch from the step records already in the log, so a
/// resumed epoch reports the same numbers as an uninterrupted one.
fn epoch_summary(log_path: &Path, epoch: usize) -> Result<EpochSummary> {
    let text = fs::read_to_string(log_path)?;
    let (mut steps, mut total, mut skipped) = (0, 0.0, 0);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["record"] == "step" && v["epoch"].as_u64() == Some(epoch as u64) {
            steps += 1;
            total += v["total"].as_f64().unwrap_or(f64::NAN);
            if v["applied"] == false {
                skipped += 1;
            }
        }
    }
    Ok(EpochSummary { epoch, steps, mean_total: total / steps.max(1) as f64, skipped })
}
