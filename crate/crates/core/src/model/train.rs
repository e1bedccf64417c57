use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Batch, Checkpoint, CheckpointError, LossBreakdown, Model, NegativeSampler, Scorer, TrainConfig, TrainContext};
use crate::metrics::{evaluate, EvalReport, MetricError, RankedTrial};
use crate::tensor::{AdamW, Graph, ParamStore, TensorError};

/// Stream of the training generator; stream 0 of the same seed initializes
/// the parameters.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("user {user} has interacted with every item; no negative to sample")]
    NoNegative { user: usize },
    #[error("non-finite {what} at epoch {epoch} step {step}")]
    NonFinite {
        what: String,
        epoch: u32,
        step: u64,
        /// State before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: u32,
    pub step: u64,
    pub loss: LossBreakdown,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(
            f,
            "epoch={} step={} L={:.9e} L_o={:.9e} L_SG={:.9e} L_CL={:.9e}",
            self.epoch, self.step, l.total, l.bpr, l.supervision, l.contrastive
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_loss: f64,
    pub valid_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub best_valid_ndcg: f64,
    pub stopped_early: bool,
}

/// Model, optimizer and sampling state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    sampler: NegativeSampler,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, ctx: &TrainContext) -> Result<Self> {
        config.validate().map_err(TrainError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        let model = model.with_ablation(config.ablation);
        Ok(Self {
            optimizer: AdamW::new(config.optimizer, &model.params),
            model,
            rng,
            config,
            epoch: 0,
            step: 0,
            sampler: NegativeSampler::new(ctx.n_items, ctx.train_items.clone()),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig, ctx: &TrainContext) -> Result<Self> {
        let mut t = Self::new(ckpt.model, config, ctx)?;
        t.optimizer.state = ckpt.optimizer;
        t.rng = ckpt.rng;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.state.clone(),
            rng: self.rng.clone(),
            config: config_text.to_string(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    /// Pairs each edge with a sampled negative item.
    pub fn sample_batch(&mut self, ctx: &TrainContext, edges: &[usize]) -> Result<Batch> {
        let negatives = edges
            .iter()
            .map(|&e| {
                let user = ctx.train[e].user;
                self.sampler
                    .sample(user, &mut self.rng)
                    .ok_or(TrainError::NoNegative { user })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            edges: edges.to_vec(),
            negatives,
        })
    }

    fn non_finite(&self, what: &str) -> TrainError {
        TrainError::NonFinite {
            what: what.to_string(),
            epoch: self.epoch + 1,
            step: self.step + 1,
            last_good: Box::new(self.checkpoint("")),
        }
    }

    /// Samples negatives for `edges` and applies one AdamW update.
    pub fn train_step(&mut self, ctx: &TrainContext, edges: &[usize]) -> Result<StepLog> {
        let batch = self.sample_batch(ctx, edges)?;
        self.apply(ctx, &batch)
    }

    /// One AdamW update on a fully specified batch.
    pub fn apply(&mut self, ctx: &TrainContext, batch: &Batch) -> Result<StepLog> {
        let mut g = Graph::new();
        let losses = self
            .model
            .batch_loss(&mut g, ctx, batch, self.config.lambda1, self.config.lambda2)?;
        let breakdown = losses.values(&g);
        if !breakdown.total.is_finite() {
            return Err(self.non_finite("loss"));
        }
        let grads = g.backward(losses.total)?;
        self.model.params.zero_grad();
        g.accumulate_param_grads(&grads, &mut self.model.params)?;
        match self.optimizer.step(&mut self.model.params) {
            Err(TensorError::NonFiniteGradient { name, .. }) => {
                return Err(self.non_finite(&format!("gradient in `{name}`")));
            }
            other => other?,
        }
        self.step += 1;
        Ok(StepLog {
            epoch: self.epoch + 1,
            step: self.step,
            loss: breakdown,
        })
    }

    /// Shuffles the training edges and runs one pass of batches.
    /// Returns the mean total loss.
    pub fn run_epoch(&mut self, ctx: &TrainContext, on_step: &mut dyn FnMut(&StepLog)) -> Result<f64> {
        let mut order: Vec<usize> = (0..ctx.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let log = self.train_step(ctx, chunk)?;
            on_step(&log);
            total += log.loss.total;
            n += 1;
        }
        self.epoch += 1;
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    pub fn evaluate(&self, ctx: &TrainContext, trials: &[RankedTrial]) -> Result<EvalReport> {
        let scorer = Scorer::new(&self.model, ctx)?;
        Ok(evaluate(&scorer, trials)?)
    }
}

/// Trains with early stopping on validation NDCG@5 (mean over tasks) and
/// leaves the best epoch's parameters in `trainer.model`.
pub fn fit(
    trainer: &mut Trainer,
    ctx: &TrainContext,
    valid: &[RankedTrial],
    on_step: &mut dyn FnMut(&StepLog),
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    let mut epochs = Vec::new();
    let mut best: Option<(f64, u32, ParamStore)> = None;
    let mut stale = 0u32;
    let mut stopped_early = false;
    while trainer.epoch < trainer.config.max_epochs {
        let mean_loss = trainer.run_epoch(ctx, on_step)?;
        let valid_ndcg = trainer.evaluate(ctx, valid)?.mean_ndcg();
        let record = EpochRecord {
            epoch: trainer.epoch,
            mean_loss,
            valid_ndcg,
        };
        log::info!(
            "epoch {} loss {:.6} valid ndcg@5 {:.6}",
            record.epoch,
            record.mean_loss,
            record.valid_ndcg
        );
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|b| valid_ndcg > b.0) {
            best = Some((valid_ndcg, trainer.epoch, trainer.model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > trainer.config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_valid_ndcg, best_epoch, params) = best.expect("max_epochs is positive");
    trainer.model.params = params;
    Ok(FitResult {
        epochs,
        best_epoch,
        best_valid_ndcg,
        stopped_early,
    })
}
