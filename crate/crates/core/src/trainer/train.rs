use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::adam::{adam_step, AdamState, DecayMode};
use super::data::{make_batch, Batch, SampleSet};
use crate::autodiff::{Precision, PrecisionGuard, Tape, Tensor};
use crate::dataio::{write_png, Eye, Split};
use crate::equirect::{AugmentationConfig, Augmenter};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::objective::total_loss;

pub const FINAL_CHECKPOINT: &str = "model.ohkpt";
pub const STEP_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Architecture; its input extent is replaced by the training resolution.
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub width: usize,
    pub height: usize,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
    pub dataset: PathBuf,
    pub split: Split,
    pub eye: Eye,
    /// Train on the first `limit` records of the split only.
    pub limit: Option<usize>,
    /// Save a checkpoint every this many epochs (0 keeps only the final one).
    pub checkpoint_every: usize,
    pub deterministic: bool,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            decay_mode: DecayMode::Decoupled,
            epochs: 40,
            max_steps: None,
            width: 128,
            height: 64,
            augmentation: AugmentationConfig::default(),
            seed: 0,
            dataset: PathBuf::from("data"),
            split: Split::Train,
            eye: Eye::Top,
            limit: None,
            checkpoint_every: 10,
            deterministic: false,
            prefetch: 2,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().with_input(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate and weight decay must be non-negative"));
        }
        self.augmentation.validate()?;
        self.model_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub depth: f64,
    pub normal: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub epochs_completed: usize,
    pub stopped_early: bool,
}

/// Observer verdict after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize, step: usize) -> Result<serde_json::Value> {
    Ok(json!({
        "epoch": epoch,
        "step": step,
        "seed": cfg.seed,
        "decay_mode": cfg.decay_mode,
        "decay_note": cfg.decay_mode.describe(),
        "train_config": serde_json::to_value(cfg)?,
    }))
}

fn stats(data: &[f64]) -> serde_json::Value {
    let finite: Vec<f64> = data.iter().copied().filter(|v| v.is_finite()).collect();
    json!({
        "min": finite.iter().copied().fold(f64::INFINITY, f64::min),
        "max": finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "non_finite": data.len() - finite.len(),
    })
}

fn dump_batch(dir: &Path, step: usize, epoch: usize, batch: &Batch, terms: [f64; 3]) -> Result<PathBuf> {
    let root = dir.join(format!("nonfinite_step{step:06}"));
    fs::create_dir_all(&root)?;
    let report = json!({
        "step": step,
        "epoch": epoch,
        "ids": batch.ids,
        "loss": {"total": terms[0], "depth": terms[1], "normal": terms[2]},
        "input": stats(batch.input.data()),
        "depth01": stats(batch.targets.depth01.data()),
        "normal01": stats(batch.targets.normal01.data()),
    });
    fs::write(root.join("batch.json"), serde_json::to_string_pretty(&report)?)?;
    let (_, _, h, w) = batch.input.dims4()?;
    for (id, img) in batch.ids.iter().zip(batch.input.data().chunks_exact(3 * h * w)) {
        write_png(&root.join(format!("{id}.png")), img, w, h)?;
    }
    Ok(root)
}

pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_observed(cfg, out, |_, _| Control::Continue)
}

/// Runs the optimization loop, calling `observer` after every step with the
/// updated model.
pub fn train_observed(
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut observer: impl FnMut(&StepLog, &Model) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _guard = PrecisionGuard::new(cfg.precision);
    let model_cfg = cfg.model_config();
    let set = SampleSet::open(&cfg.dataset, cfg.split, cfg.eye, cfg.limit, cfg.width, cfg.height)?;
    let augmenter = Augmenter::new(AugmentationConfig {
        seed: cfg.augmentation.seed ^ cfg.seed,
        ..cfg.augmentation.clone()
    })?;
    let mut model = Model::build(&model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(cfg)?)?;
            Some(BufWriter::new(File::create(dir.join(STEP_LOG))?))
        }
        None => None,
    };
    let d_max = set.d_max();
    let n = set.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0usize;
    let mut epochs_completed = 0usize;
    let mut stopped_early = false;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(usize, Result<Batch>)>(cfg.prefetch.max(1));
        let (set, augmenter) = (&set, &augmenter);
        let precision = cfg.precision;
        scope.spawn(move || {
            let _guard = PrecisionGuard::new(precision);
            let mut budget = max_steps;
            for epoch in 0..cfg.epochs {
                let order = epoch_order(n, cfg.seed, epoch);
                for chunk in order.chunks(cfg.batch_size) {
                    if budget == 0 {
                        return;
                    }
                    budget -= 1;
                    let batch = set.load_many(chunk, !cfg.deterministic).and_then(|samples| {
                        let aug: Vec<_> = samples
                            .iter()
                            .zip(chunk)
                            .map(|(s, &i)| augmenter.augment(s, epoch as u64, i as u64))
                            .collect();
                        make_batch(&aug, d_max)
                    });
                    if tx.send((epoch, batch)).is_err() {
                        return;
                    }
                }
            }
        });

        for (epoch, batch) in rx.iter() {
            let batch = batch?;
            let (lr, wd) = cfg
                .decay_mode
                .schedule(cfg.learning_rate, cfg.weight_decay, step as u64);
            let tape = Tape::new();
            let params = model.bind(&tape);
            let x = tape.constant(batch.input.clone());
            let pred = model.forward_with(&params, &x)?;
            let terms = total_loss(&pred.depth01, &pred.normal01, &batch.targets)?;
            let values = [terms.total.item()?, terms.depth.item()?, terms.normal.item()?];
            if values.iter().any(|v| !v.is_finite()) {
                let detail = match out {
                    Some(dir) => {
                        let path = dump_batch(dir, step, epoch, &batch, values)?;
                        format!("batch {:?}, dump written to {}", batch.ids, path.display())
                    }
                    None => format!("batch {:?}", batch.ids),
                };
                return Err(Error::NonFiniteLoss { step, detail });
            }
            tape.backward(&terms.total)?;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(&model.params)
                .map(|(v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            drop(params);
            adam_step(&mut model.params, &grads, &mut adam, lr, wd)?;
            step += 1;
            let entry = StepLog {
                step,
                epoch,
                total: values[0],
                depth: values[1],
                normal: values[2],
                lr,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            let verdict = observer(&entry, &model);
            log.push(entry);
            if step % per_epoch == 0 || step == max_steps {
                epochs_completed = epoch + 1;
                if let Some(dir) = out {
                    if cfg.checkpoint_every > 0 && epochs_completed % cfg.checkpoint_every == 0 {
                        let path = dir
                            .join("checkpoints")
                            .join(format!("epoch_{epochs_completed:04}.ohkpt"));
                        fs::create_dir_all(path.parent().expect("checkpoint directory"))?;
                        save_checkpoint(
                            &path,
                            &model,
                            &checkpoint_meta(cfg, epochs_completed, step)?,
                            cfg.precision,
                        )?;
                        checkpoints.push(path);
                    }
                }
            }
            if verdict == Control::Stop {
                stopped_early = true;
                break;
            }
        }
        Ok(())
    })?;

    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(
            &path,
            &model,
            &checkpoint_meta(cfg, epochs_completed, step)?,
            cfg.precision,
        )?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model,
        log,
        checkpoints,
        epochs_completed,
        stopped_early,
    })
}
