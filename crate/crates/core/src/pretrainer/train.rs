//! Optimization state, single steps, and the epoch loop with checkpoints and metrics.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint_for, save_checkpoint};
use super::loss::{total_loss_grad, LossBreakdown, LossConfig};
use super::optim::{adamw_update, clip_grad_norm, learning_rate, AdamState, OptimConfig};
use crate::backbone::{ModelConfig, ModelParams};
use crate::dataio::{batch_order, Batch, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::seed;
use crate::semantic_prior::FrozenEmbedder;

pub const LAST_CHECKPOINT: &str = "last.vmae";
pub const METRICS_LOG: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,l_r,l_mim,l_cls,l_cf,l_cs,total,lr";

/// Training schedule and objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write `epoch_NNNN.vmae` every this many epochs; `last.vmae` is written after every epoch.
    pub checkpoint_every: u64,
    /// Abort with a numeric error after this many faulted steps in a row.
    pub max_consecutive_faults: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 100,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 1,
            max_consecutive_faults: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.weights.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size and checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size.max(1)) as u64
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub params: ModelParams<S>,
    pub adam: AdamState<S>,
    /// Completed optimizer updates.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub faults: u64,
}

impl<S: Real> TrainState<S> {
    pub fn new(params: ModelParams<S>, seed: u64) -> Self {
        let adam = AdamState::new(&params);
        Self { params, adam, step: 0, epoch: 0, seed, faults: 0 }
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(ModelParams::init(config, seed)?, seed))
    }

    /// Seed of the masks drawn at the current step.
    pub fn batch_seed(&self) -> u64 {
        seed::derive(self.seed, &[0x5354_4550, self.step])
    }
}

/// Outcome of one [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Losses at the parameters before the update.
    pub breakdown: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    /// Set when the update was skipped because of non-finite values.
    pub faulted: bool,
}

/// One AdamW step. On non-finite losses or gradients the parameters, moments and step
/// counter are left untouched and only `faults` is incremented.
pub fn train_step<S: Real>(
    state: &mut TrainState<S>,
    batch: &Batch<'_, S>,
    cfg: &TrainConfig,
    embedder: &FrozenEmbedder,
    total_steps: u64,
) -> Result<StepReport> {
    let lr = learning_rate(&cfg.optim, state.step, total_steps);
    let outcome = total_loss_grad(batch, &state.params, &cfg.loss, embedder, state.batch_seed());
    let (breakdown, mut grads) = match outcome {
        Ok(ok) => ok,
        Err(Error::Numeric(msg)) => {
            log::warn!("step {}: {msg}; update skipped", state.step);
            state.faults += 1;
            let nan = LossBreakdown::compose([f64::NAN; 5], cfg.loss.weights.masked_by(&cfg.loss.toggles), 0);
            return Ok(StepReport { breakdown: nan, lr, grad_norm: f64::NAN, faulted: true });
        }
        Err(e) => return Err(e),
    };
    let grad_norm = grads.sq_norm().to_f64_lossy().sqrt();
    if !breakdown.is_finite() || !grad_norm.is_finite() {
        log::warn!("step {}: non-finite loss or gradient; update skipped", state.step);
        state.faults += 1;
        return Ok(StepReport { breakdown, lr, grad_norm, faulted: true });
    }
    if let Some(max) = cfg.optim.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    adamw_update(&mut state.params, &mut state.adam, &grads, &cfg.optim, lr, state.step + 1);
    state.step += 1;
    Ok(StepReport { breakdown, lr, grad_norm, faulted: false })
}

pub fn metrics_line(step: u64, b: &LossBreakdown, lr: f64) -> String {
    format!("{step},{},{},{},{},{},{},{lr}", b.l_r, b.l_mim, b.l_cls, b.l_cf, b.l_cs, b.total)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PretrainOptions {
    /// Continue from `last.vmae` in the output directory when present.
    pub resume: bool,
    /// Return after this many completed epochs, as if interrupted.
    pub stop_after_epoch: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub epochs: u64,
    pub faults: u64,
    pub last: Option<LossBreakdown>,
}

/// Drops metric rows written after the checkpoint being resumed from.
fn trim_metrics(path: &Path, keep_through: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_none_or(|s| s <= keep_through))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs the epoch loop, writing checkpoints and `metrics.csv` under `out_dir`.
pub fn pretrain<S: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset<S>,
    embedder: &FrozenEmbedder,
    out_dir: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainSummary> {
    model.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let log_path = out_dir.join(METRICS_LOG);

    let mut state = if opts.resume && last_path.exists() {
        let s: TrainState<S> = load_checkpoint_for(&last_path, model)?;
        log::info!("resuming at epoch {} step {}", s.epoch, s.step);
        trim_metrics(&log_path, s.step)?;
        s
    } else {
        std::fs::write(&log_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        TrainState::init(model, cfg.seed)?
    };
    let mut log = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let per_epoch = cfg.steps_per_epoch(dataset.len());
    let total_steps = per_epoch * cfg.epochs;
    let mut last = None;
    let mut streak = 0u64;
    while state.epoch < cfg.epochs {
        if opts.stop_after_epoch.is_some_and(|e| state.epoch >= e) {
            break;
        }
        for idx in batch_order(dataset.len(), cfg.batch_size, state.seed, state.epoch)? {
            let batch = dataset.batch(&idx)?;
            let report = train_step(&mut state, &batch, cfg, embedder, total_steps)?;
            if report.faulted {
                streak += 1;
                if streak > cfg.max_consecutive_faults {
                    return Err(Error::Numeric(format!(
                        "{streak} consecutive faulted steps at step {}; giving up",
                        state.step
                    )));
                }
                continue;
            }
            streak = 0;
            writeln!(log, "{}", metrics_line(state.step, &report.breakdown, report.lr))
                .map_err(|e| Error::io(&log_path, e))?;
            last = Some(report.breakdown);
        }
        state.epoch += 1;
        log::info!("epoch {} done at step {} (faults {})", state.epoch, state.step, state.faults);
        if state.epoch % cfg.checkpoint_every == 0 || state.epoch == cfg.epochs {
            save_checkpoint(&state, &out_dir.join(format!("epoch_{:04}.vmae", state.epoch)))?;
        }
        save_checkpoint(&state, &last_path)?;
    }
    if !last_path.exists() {
        save_checkpoint(&state, &last_path)?;
    }
    Ok(PretrainSummary { checkpoint: last_path, steps: state.step, epochs: state.epoch, faults: state.faults, last })
}
