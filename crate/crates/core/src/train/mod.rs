//! Synthetic long-range task, momentum SGD and the training and evaluation
//! loops.

mod optim;
mod task;

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Checkpoint};
use crate::model::{bind, forward_graph, ForwardMode, Model, TensorMap};
use crate::tensor::{Scalar, Tensor};

pub use optim::{OptimizerConfig, OptimizerState};
pub use task::{chebyshev, generate_task, Dataset, DatasetMeta, Marker, TaskSpec, PALETTE};

fn default_steps() -> u64 {
    2000
}
fn default_batch() -> usize {
    32
}
fn default_samples() -> usize {
    16384
}
fn default_validation() -> usize {
    1000
}
fn default_eval_every() -> u64 {
    250
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_samples")]
    pub train_samples: usize,
    #[serde(default = "default_validation")]
    pub validation_samples: usize,
    /// Validation cadence in steps; the last step is always evaluated.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Checkpoint cadence in steps; `None` disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after the first validation at or above this accuracy.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: default_steps(),
            batch_size: default_batch(),
            train_samples: default_samples(),
            validation_samples: default_validation(),
            eval_every: default_eval_every(),
            checkpoint_every: None,
            checkpoint_dir: None,
            target_accuracy: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_samples == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch size, sample count and eval cadence must be positive".into(),
            ));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint cadence must be positive".into()));
        }
        if self.target_accuracy.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Config("target_accuracy must lie in [0, 1]".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_every needs checkpoint_dir".into()));
        }
        Ok(())
    }
}

/// Identity of a run, stamped on every record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// One-based step number.
    pub step: u64,
    pub loss: f64,
    /// Accuracy on the step's batch.
    pub accuracy: f64,
    /// Eval-mode accuracy on the validation set, on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Optimizer used for every run, recorded in checkpoint metadata.
pub const OPTIMIZER_NOTE: &str = "momentum SGD with linear warm-up";

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `(b, 1, 1, K)` logits whose arg-max equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape().channels();
    let hits = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// One optimizer step on `(x, labels)`; returns the loss and batch accuracy.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let vars = bind(model, &mut tape, true);
    let xv = tape.constant(x.clone());
    let out = forward_graph(model, &mut tape, &vars, xv, ForwardMode::TRAIN, None)?;
    let acc = accuracy(tape.value(out.logits), labels);
    let loss_var = tape.cross_entropy(out.logits, labels)?;
    let loss = tape.value(loss_var).item()?.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    let mut grads = tape.backward(loss_var)?;
    let mut g = TensorMap::new();
    for (name, v) in &vars {
        g.insert(name.clone(), grads.take(*v)?);
    }
    opt.apply(&mut model.params, &g)?;
    model.apply_stats(&out.stats);
    Ok((loss, acc))
}

fn checkpoint_meta<T: Scalar>(opt: &OptimizerState<T>, run: &RunInfo) -> serde_json::Value {
    serde_json::json!({
        "step": opt.step,
        "seed": run.seed,
        "config_hash": run.config_hash,
        "optimizer": OPTIMIZER_NOTE,
        "optimizer_config": opt.config,
    })
}

/// A model checkpoint that also carries the optimizer velocity.
pub fn training_checkpoint<T: Scalar>(model: &Model<T>, opt: &OptimizerState<T>, run: &RunInfo) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_model(model, checkpoint_meta(opt, run))?;
    for (n, v) in &opt.velocity {
        ck.insert(format!("velocity/{n}"), v);
    }
    Ok(ck)
}

/// Trains `model` for `settings.steps` steps on batches drawn with
/// replacement from `data` by a generator seeded with `run.seed`, or until a
/// validation reaches `settings.target_accuracy`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    validation: Option<&Dataset>,
    opt: &mut OptimizerState<T>,
    settings: &TrainSettings,
    run: &RunInfo,
) -> Result<Vec<TrainRecord>> {
    settings.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.arch.classes) {
        return Err(Error::Config(format!(
            "label {bad} exceeds the model's {} classes",
            model.arch.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let start = Instant::now();
    let mut records = Vec::with_capacity(settings.steps as usize);
    let mut last_good: Option<PathBuf> = None;
    for step in 1..=settings.steps {
        let idx: Vec<usize> = (0..settings.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (x, y) = data.batch::<T>(&idx)?;
        let (loss, acc) = match train_step(model, opt, &x, &y) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Divergence {
                    step,
                    last_good: last_good.clone(),
                })
            }
            Err(e) => return Err(e),
        };
        let val_accuracy = match validation {
            Some(v) if step % settings.eval_every == 0 || step == settings.steps => {
                Some(evaluate(model, v, &[v.resolution()])?.accuracy)
            }
            _ => None,
        };
        let reached = matches!((val_accuracy, settings.target_accuracy), (Some(a), Some(t)) if a >= t);
        let done = reached || step == settings.steps;
        let mut checkpoint = None;
        if let (Some(every), Some(dir)) = (settings.checkpoint_every, &settings.checkpoint_dir) {
            if step % every == 0 || done {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("step-{step:06}.axck"));
                save_checkpoint(&training_checkpoint(model, opt, run)?, &path)?;
                last_good = Some(path.clone());
                checkpoint = Some(path);
            }
        }
        records.push(TrainRecord {
            step,
            loss,
            accuracy: acc,
            val_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
            seed: run.seed,
            config_hash: run.config_hash.clone(),
            checkpoint,
        });
        if done {
            break;
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionAccuracy {
    pub resolution: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy at the first requested resolution.
    pub accuracy: f64,
    pub per_resolution: Vec<ResolutionAccuracy>,
}

/// Samples evaluated per forward pass.
pub const EVAL_CHUNK: usize = 100;

/// Eval-mode accuracy of `model` on `data` at each resolution. Every
/// resolution must be a whole multiple of the data grid; images are
/// upsampled by nearest neighbour.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, resolutions: &[usize]) -> Result<EvalReport> {
    if resolutions.is_empty() || data.is_empty() {
        return Err(Error::Config(
            "evaluation needs a resolution and at least one sample".into(),
        ));
    }
    let base = data.resolution();
    let mut per_resolution = Vec::new();
    for &r in resolutions {
        if r == 0 || r % base != 0 {
            return Err(Error::Config(format!(
                "resolution {r} is not a multiple of the {base}-pixel grid"
            )));
        }
        let scaled = if r == base {
            data.clone()
        } else {
            data.upsampled(r / base)?
        };
        let mut hits = 0.0;
        let all: Vec<usize> = (0..scaled.len()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            let (x, y) = scaled.batch::<T>(chunk)?;
            let logits = model.predict(&x)?;
            hits += accuracy(&logits, &y) * chunk.len() as f64;
        }
        per_resolution.push(ResolutionAccuracy {
            resolution: r,
            accuracy: hits / scaled.len() as f64,
        });
    }
    Ok(EvalReport {
        accuracy: per_resolution[0].accuracy,
        per_resolution,
    })
}

#[cfg(test)]
mod tests;
