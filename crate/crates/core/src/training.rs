//! Epoch loop: compose, augment, batch, step; eval-mode validation loss;
//! plateau schedule; best and last checkpoints; CSV log; resume.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom as _;
use rand::Rng as _;

use crate::autodiff::{Checkpoint, PlateauSchedule, SgdMomentum, Shape, Tensor};
use crate::config::RunConfig;
use crate::dataset::{
    augment_flip, compose_epoch, materialize, sample_stream, stream_rng, EpochSample, ExamLabel, Patch,
    TrainingImage,
};
use crate::error::{Error, Result};
use crate::imaging::io::write_bytes;
use crate::unet::UnetModel;

/// Stream id reserved for composing epoch `epoch`.
fn epoch_stream(epoch: usize) -> u64 {
    sample_stream(epoch, u32::MAX as usize)
}

/// Stream id of the fixed validation sample set.
const VALIDATION_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    /// Learning rate used during the epoch.
    pub lr: f32,
}

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPaths {
    /// Best-validation checkpoint (with its `.json` sidecar).
    pub model: PathBuf,
    /// Full state after the latest epoch, for resuming.
    pub last: PathBuf,
    pub log: PathBuf,
}

impl TrainPaths {
    pub fn for_model(model: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = model.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        TrainPaths {
            model: model.to_path_buf(),
            last: with(".last"),
            log: with(".log.csv"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the `.last` state if present.
    pub resume: bool,
    /// Stop once this many epochs are complete (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f32,
    pub best_epoch: usize,
}

pub fn log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    out
}

fn parse_log(text: &str, path: &Path) -> Result<Vec<EpochRecord>> {
    let bad = |n: usize| Error::format(path, format!("malformed training log line {n}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n + 1));
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(n + 1))?,
                train_loss: f[1].parse().map_err(|_| bad(n + 1))?,
                val_loss: f[2].parse().map_err(|_| bad(n + 1))?,
                lr: f[3].parse().map_err(|_| bad(n + 1))?,
            })
        })
        .collect()
}

fn batch_tensors(patches: &[Patch]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let size = patches[0].size;
    let shape = Shape::new(patches.len(), 1, size, size);
    let input = patches.iter().flat_map(|p| p.input.iter().copied()).collect();
    let target = patches.iter().flat_map(|p| p.target.iter().copied()).collect();
    Ok((Tensor::new(shape, input)?, Tensor::new(shape, target)?))
}

/// Validation samples: every lesion once plus as many negatives from normal
/// images, drawn once from a fixed stream. Tolerates a split that lacks one
/// of the classes.
fn validation_samples(images: &[TrainingImage], seed: u64) -> Result<Vec<EpochSample>> {
    let mut rng = stream_rng(seed, VALIDATION_STREAM);
    if let Ok(samples) = compose_epoch(images, &mut rng) {
        return Ok(samples);
    }
    let mut out: Vec<EpochSample> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.lesions.len()).map(move |l| EpochSample::Positive { image: i, lesion: l }))
        .collect();
    for (i, img) in images.iter().enumerate() {
        if img.exam_label == ExamLabel::Normal && img.breast.area_px() > 0 {
            let k = rng.random_range(0..img.breast.area_px());
            let (w, _) = (img.breast.width(), img.breast.height());
            let idx = img.breast.grid().bits().iter().enumerate().filter(|(_, &b)| b).nth(k).unwrap().0;
            out.push(EpochSample::Negative {
                image: i,
                center: (idx % w, idx / w),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("validation split has no usable images".into()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn validation_loss(model: &UnetModel, images: &[TrainingImage], samples: &[EpochSample], cfg: &RunConfig) -> Result<f32> {
    let t = &cfg.training;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(t.batch_size) {
        let patches = chunk
            .iter()
            .map(|s| materialize(images, s, t.patch_px))
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = batch_tensors(&patches)?;
        total += model.eval_loss(&x, &y, t.negative_weight)? as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((total / count as f64) as f32)
}

struct State {
    model: UnetModel,
    optimizer: SgdMomentum<f32>,
    schedule: PlateauSchedule,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_val: f32,
}

fn scalar(v: f32) -> Tensor<f32> {
    Tensor::scalar(v)
}

fn save_state(state: &State, path: &Path) -> Result<()> {
    let mut ck = state.model.to_checkpoint();
    for (n, v) in state.model.parameter_names().iter().zip(state.optimizer.velocity()) {
        ck.push(format!("velocity.{n}"), v.clone());
    }
    let s = &state.schedule;
    ck.push("state.epochs_done", scalar(state.history.len() as f32));
    ck.push("state.best_epoch", scalar(state.best_epoch as f32));
    ck.push("state.best_val", scalar(state.best_val));
    ck.push("schedule.learning_rate", scalar(s.learning_rate));
    ck.push("schedule.best_loss", scalar(s.best_loss));
    ck.push("schedule.epochs_since_improve", scalar(s.epochs_since_improve as f32));
    ck.save(path)
}

fn load_state(cfg: &RunConfig, paths: &TrainPaths) -> Result<State> {
    let ck = Checkpoint::load(&paths.last)?;
    let model = UnetModel::from_checkpoint(cfg.unet, &ck)?;
    let get = |n: &str| -> Result<f32> { Ok(ck.require(n)?.data()[0]) };
    let velocity = model
        .parameter_names()
        .iter()
        .map(|n| ck.require(&format!("velocity.{n}")).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut schedule = PlateauSchedule::new(cfg.training.learning_rate, cfg.training.lr_factor, cfg.training.patience)?;
    schedule.learning_rate = get("schedule.learning_rate")?;
    schedule.best_loss = get("schedule.best_loss")?;
    schedule.epochs_since_improve = get("schedule.epochs_since_improve")? as u32;
    let mut optimizer = SgdMomentum::new(
        schedule.learning_rate,
        cfg.training.momentum,
        model.parameters().iter().map(|p| p.shape()),
    )?;
    optimizer.set_velocity(velocity)?;
    let done = get("state.epochs_done")? as usize;
    let text = std::fs::read_to_string(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    let mut history = parse_log(&text, &paths.log)?;
    if history.len() < done {
        return Err(Error::Data(format!(
            "training log {} has {} epochs but the saved state has {done}",
            paths.log.display(),
            history.len()
        )));
    }
    history.truncate(done);
    Ok(State {
        model,
        optimizer,
        schedule,
        history,
        best_epoch: get("state.best_epoch")? as usize,
        best_val: get("state.best_val")?,
    })
}

/// Train a u-net on `train_images`, selecting the checkpoint with the lowest
/// validation loss on `val_images`.
pub fn train(
    train_images: &[TrainingImage],
    val_images: &[TrainingImage],
    cfg: &RunConfig,
    paths: &TrainPaths,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let t = &cfg.training;
    if !train_images.iter().any(|i| !i.lesions.is_empty()) {
        return Err(Error::Data("training split contains no lesions; need at least one malignant exam".into()));
    }
    if !train_images.iter().any(|i| i.exam_label == ExamLabel::Normal) {
        return Err(Error::Data("training split contains no normal exam; negatives cannot be drawn".into()));
    }
    if val_images.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let val_samples = validation_samples(val_images, cfg.seed)?;
    let mut state = if opts.resume && paths.last.exists() {
        load_state(cfg, paths)?
    } else {
        let model = UnetModel::build(cfg.unet, cfg.seed)?;
        let optimizer = SgdMomentum::new(t.learning_rate, t.momentum, model.parameters().iter().map(|p| p.shape()))?;
        State {
            model,
            optimizer,
            schedule: PlateauSchedule::new(t.learning_rate, t.lr_factor, t.patience)?,
            history: Vec::new(),
            best_epoch: 0,
            best_val: f32::INFINITY,
        }
    };
    let stop = opts.stop_after.unwrap_or(t.max_epochs).min(t.max_epochs);
    while state.history.len() < stop {
        let epoch = state.history.len();
        let lr = state.schedule.learning_rate;
        state.optimizer.learning_rate = lr;
        let samples = compose_epoch(train_images, &mut stream_rng(cfg.seed, epoch_stream(epoch)))?;
        let mut loss_sum = 0.0f64;
        for (b, chunk) in samples.chunks(t.batch_size).enumerate() {
            let patches = chunk
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let mut p = materialize(train_images, s, t.patch_px)?;
                    augment_flip(&mut p, &mut stream_rng(cfg.seed, sample_stream(epoch, b * t.batch_size + k)));
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = batch_tensors(&patches)?;
            let (loss, grads) = state.model.loss_and_gradients(&x, &y, t.negative_weight)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("training diverged: loss {loss} in epoch {}", epoch + 1)));
            }
            state.optimizer.step(state.model.parameters_mut(), &grads)?;
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let train_loss = (loss_sum / samples.len() as f64) as f32;
        let val_loss = validation_loss(&state.model, val_images, &val_samples, cfg)?;
        state.schedule.update(val_loss);
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < state.best_val {
            state.best_val = val_loss;
            state.best_epoch = epoch + 1;
            state.model.save(&paths.model, &cfg.preprocessing)?;
        }
        save_state(&state, &paths.last)?;
        write_bytes(&paths.log, log_csv(&state.history).as_bytes())?;
    }
    Ok(TrainReport {
        history: state.history,
        best_val_loss: state.best_val,
        best_epoch: state.best_epoch,
    })
}
