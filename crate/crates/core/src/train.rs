//! Training loop: batches from a dataset directory, summed losses, AdamW,
//! JSON-lines loss log and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::PipelineConfig;
use crate::dataforge::{Dataset, EditSample, SampleRecord, Split};
use crate::diffusion::{self, DiffusionDraw};
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng;

pub const LOG_FILE: &str = "train.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_mllm: f64,
    pub l_dm: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `<run>/checkpoint` when present.
    pub resume: bool,
    /// Stop once the batch loss falls to `(1 - r)` of the first step's loss.
    pub stop_at_reduction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<StepLog>,
    pub last_step: u64,
    pub elapsed: Duration,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    step: u64,
}

/// Vocabulary over every instruction in the dataset, in record order.
pub fn dataset_vocabulary(ds: &Dataset, img_tokens: usize) -> Result<Vocabulary> {
    let corpus: Vec<String> = ds.records.iter().map(|r| r.instruction.clone()).collect();
    Vocabulary::build(&corpus, img_tokens)
}

pub fn check_dataset_dims(cfg: &PipelineConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.manifest;
    let im = &cfg.image;
    if (m.height, m.width, m.channels) != (im.height, im.width, im.channels) {
        return Err(Error::dim(
            "dataset",
            format!(
                "dataset images are {}x{}x{}, config expects {}x{}x{}",
                m.height, m.width, m.channels, im.height, im.width, im.channels
            ),
        ));
    }
    Ok(())
}

/// The fixed overfit batch: the first `n` training records taken round-robin over categories.
pub fn overfit_records(ds: &Dataset, n: usize) -> Result<Vec<&SampleRecord>> {
    let mut train = ds.split(Split::Train);
    if train.len() < n {
        return Err(Error::Validation(format!(
            "overfit batch of {n} needs that many training samples, dataset has {}",
            train.len()
        )));
    }
    train.sort_by_key(|a| (a.index, a.category));
    train.truncate(n);
    Ok(train)
}

pub fn save_checkpoint(run_dir: &Path, model: &Model, opt: &AdamW, step: u64) -> Result<PathBuf> {
    let tmp = run_dir.join(format!("{CHECKPOINT_DIR}.tmp"));
    let dst = run_dir.join(CHECKPOINT_DIR);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    model.save(&tmp)?;
    opt.save(&tmp.join("optim.rbck"))?;
    let state = serde_json::to_string(&CheckpointState { step }).expect("state serializes");
    fs::write(tmp.join("state.json"), state).map_err(|e| Error::io(tmp.join("state.json"), e))?;
    if dst.exists() {
        fs::remove_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
    }
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(dst)
}

fn load_checkpoint(cfg: &PipelineConfig, dir: &Path) -> Result<(Model, AdamW, u64)> {
    let model = Model::load(cfg, dir)?;
    let mut opt = AdamW::new(&cfg.optim);
    opt.load(&dir.join("optim.rbck"))?;
    let sp = dir.join("state.json");
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let state: CheckpointState = serde_json::from_str(&text).map_err(|e| Error::format(&sp, e.to_string()))?;
    if state.step != opt.step {
        return Err(Error::format(&sp, format!("step {} but optimizer is at {}", state.step, opt.step)));
    }
    Ok((model, opt, state.step))
}

/// Log lines up to and including `step`, from a previous run of the same directory.
fn read_log(path: &Path, step: u64) -> Result<Vec<StepLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: StepLog = serde_json::from_str(line).map_err(|e| Error::format(path, e.to_string()))?;
        if rec.step <= step {
            out.push(rec);
        }
    }
    Ok(out)
}

fn log_line(rec: &StepLog) -> String {
    serde_json::to_string(rec).expect("log serializes") + "\n"
}

/// One optimizer step over `batch`; returns mean losses before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&EditSample],
    draws: &[DiffusionDraw],
    step: u64,
) -> Result<StepLog> {
    model.store.zero_grad();
    let inv = 1.0 / batch.len() as f64;
    let (mut l_mllm, mut l_dm) = (0.0, 0.0);
    for (s, draw) in batch.iter().zip(draws) {
        let mut g = Graph::new();
        let (_, l) = model.losses(&mut g, &s.source, &s.instruction, &s.target, draw)?;
        let total = diffusion::total_loss(&mut g, l.l_mllm, l.l_dm, step)?;
        l_mllm += g.value(l.l_mllm).data()[0] * inv;
        l_dm += g.value(l.l_dm).data()[0] * inv;
        let scaled = g.scale(total, inv);
        g.backward(scaled)?;
        model.store.accumulate_grads(&g);
    }
    opt.step(&mut model.store);
    Ok(StepLog {
        step,
        l_mllm,
        l_dm,
        l_total: l_mllm + l_dm,
    })
}

/// Batch and `(t, ε)` draws for `step`; the overfit mode reuses step 0's draws.
fn batch_for<'a>(
    cfg: &PipelineConfig,
    model: &Model,
    samples: &'a [EditSample],
    step: u64,
) -> (Vec<&'a EditSample>, Vec<DiffusionDraw>) {
    let overfit = cfg.train.overfit > 0;
    let mut r = rng::stream(cfg.seed, rng::TRAIN_NOISE, if overfit { 0 } else { step });
    let batch: Vec<&EditSample> = if overfit {
        samples.iter().collect()
    } else {
        (0..cfg.optim.batch_size).map(|_| &samples[r.random_range(0..samples.len())]).collect()
    };
    let shape = model.latent_shape();
    let draws = batch.iter().map(|_| DiffusionDraw::sample(&mut r, &model.sched, &shape)).collect();
    (batch, draws)
}

/// Train on `dataset_dir`, writing the config, loss log and checkpoints into `run_dir`.
pub fn train(cfg: &PipelineConfig, dataset_dir: &Path, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    check_dataset_dims(cfg, &ds)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    cfg.write_effective(run_dir)?;

    let ckpt = run_dir.join(CHECKPOINT_DIR);
    let log_path = run_dir.join(LOG_FILE);
    let (mut model, mut opt, mut step, mut history) = if opts.resume && ckpt.is_dir() {
        let (m, o, s) = load_checkpoint(cfg, &ckpt)?;
        (m, o, s, read_log(&log_path, s)?)
    } else {
        let vocab = dataset_vocabulary(&ds, cfg.vocab.img_tokens)?;
        (Model::new(cfg, vocab)?, AdamW::new(&cfg.optim), 0, Vec::new())
    };

    let records = if cfg.train.overfit > 0 {
        overfit_records(&ds, cfg.train.overfit)?
    } else {
        ds.split(Split::Train)
    };
    if records.is_empty() {
        return Err(Error::Validation("dataset has no training samples".into()));
    }
    let samples = records.iter().map(|r| ds.load(r)).collect::<Result<Vec<_>>>()?;

    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let prior: String = history.iter().map(log_line).collect();
    log.write_all(prior.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    let start = Instant::now();
    let initial = history.first().map(|h| h.l_total);
    let every = cfg.train.checkpoint_every;
    let mut saved_at = step;
    while step < cfg.train.steps {
        step += 1;
        let (batch, draws) = batch_for(cfg, &model, &samples, step);
        let rec = train_step(&mut model, &mut opt, &batch, &draws, step)?;
        log.write_all(log_line(&rec).as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        history.push(rec);
        if step % 50 == 0 {
            log::info!("step {step}: l_mllm {:.5} l_dm {:.5} ({:.1?})", rec.l_mllm, rec.l_dm, start.elapsed());
        }
        if every > 0 && step % every == 0 {
            save_checkpoint(run_dir, &model, &opt, step)?;
            saved_at = step;
        }
        let first = initial.unwrap_or(history[0].l_total);
        if opts.stop_at_reduction.is_some_and(|r| rec.l_total <= (1.0 - r) * first) {
            break;
        }
    }
    if saved_at != step || !ckpt.is_dir() {
        save_checkpoint(run_dir, &model, &opt, step)?;
    }
    Ok(TrainOutcome {
        history,
        last_step: step,
        elapsed: start.elapsed(),
    })
}

/// Moving average with window `w` (empty when the series is shorter).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}
