//! Mini-batch training with per-epoch validation and early stopping.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PredictionSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Gradients, ParamsMut};
use crate::scorer::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    /// First/second moment estimates with bias correction (Adam).
    AdaptiveMoments,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adaptive-moments" | "adam" => Ok(OptimizerKind::AdaptiveMoments),
            other => Err(Error::argument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdaptiveMoments => "adaptive-moments",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 20,
            patience: 5,
            optimizer: OptimizerKind::AdaptiveMoments,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::argument("patience must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::argument("batch size must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::argument("max epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::argument("learning rate must be positive and finite"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Optimizer state. Moment buffers are allocated on the first step. The
/// hashed table is updated lazily: only rows with a gradient in the current
/// step move, and their moments decay only when touched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    table_m: Vec<f64>,
    table_v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            table_m: Vec::new(),
            table_v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: ParamsMut<'_>, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        if grads.dense.len() != params.dense.len() {
            return Err(Error::argument(format!(
                "{} gradient tensors for {} parameter tensors",
                grads.dense.len(),
                params.dense.len()
            )));
        }
        for (p, g) in params.dense.iter().zip(&grads.dense) {
            if p.len() != g.len() {
                return Err(Error::argument("gradient shape does not match parameter"));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.dense.into_iter().zip(&grads.dense) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
                if let Some((table, dim)) = params.table {
                    for (&row, g) in &grads.table_rows {
                        let p = &mut table[row * dim..(row + 1) * dim];
                        p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                    }
                }
            }
            OptimizerKind::AdaptiveMoments => {
                if self.m.is_empty() {
                    self.m = params.dense.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                };
                for (i, (p, g)) in params.dense.into_iter().zip(&grads.dense).enumerate() {
                    for (j, (p, &g)) in p.iter_mut().zip(g).enumerate() {
                        update(p, g, &mut self.m[i][j], &mut self.v[i][j]);
                    }
                }
                if let Some((table, dim)) = params.table {
                    if self.table_m.len() != table.len() {
                        self.table_m = vec![0.0; table.len()];
                        self.table_v = vec![0.0; table.len()];
                    }
                    for (&row, g) in &grads.table_rows {
                        for (k, &g) in g.iter().enumerate().take(dim) {
                            let idx = row * dim + k;
                            update(
                                &mut table[idx],
                                g,
                                &mut self.table_m[idx],
                                &mut self.table_v[idx],
                            );
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Validation result for one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    /// Model-selection criterion: entity F1, or accuracy for the meta classifier.
    pub score: f64,
    pub metrics: Option<Metrics>,
    pub accuracy: Option<f64>,
    pub predictions: PredictionSet,
}

/// What the trainer needs from a model.
pub trait Trainable: Clone + Send + Sync {
    type Example: Sync;

    /// Loss and gradient for one example, `None` if it contributes no terms.
    fn example_grad(&self, example: &Self::Example) -> Result<Option<(f64, Gradients)>>;

    fn params_mut(&mut self) -> ParamsMut<'_>;

    fn evaluate(&self, validation: &[Self::Example], exec: Execution) -> Result<Evaluation>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub best: M,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl<M> TrainOutcome<M> {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }
}

/// Mean loss and gradient over a batch. Per-example gradients may be computed
/// in parallel; they are summed in batch order.
pub fn batch_gradient<M: Trainable>(
    model: &M,
    batch: &[&M::Example],
    exec: Execution,
) -> Result<Option<(f64, Gradients)>> {
    let per_example = exec.try_map(batch, |ex| model.example_grad(ex))?;
    let mut total = Gradients::default();
    let mut loss = 0.0;
    let mut count = 0usize;
    for (l, g) in per_example.into_iter().flatten() {
        loss += l;
        total.add_assign(&g);
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    total.scale(1.0 / count as f64);
    Ok(Some((loss / count as f64, total)))
}

/// Trains until validation stops improving for `patience` consecutive epochs
/// or `max_epochs` is reached, returning the model from the best epoch
/// (earliest on ties) and every epoch's record.
pub fn train<M: Trainable>(
    init: M,
    train_set: &[M::Example],
    validation: &[M::Example],
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::argument("training split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::argument("validation split is empty"));
    }
    let mut model = init;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, M)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            if let Some((loss, grads)) = batch_gradient(&model, &batch, exec)? {
                optimizer.step(model.params_mut(), &grads)?;
                loss_sum += loss;
                batches += 1;
            }
        }
        let train_loss = if batches > 0 {
            loss_sum / batches as f64
        } else {
            0.0
        };
        let validation = model.evaluate(validation, exec)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}, validation score {:.4}",
            validation.score
        );
        let improved = best.as_ref().is_none_or(|(_, s, _)| validation.score > *s);
        if improved {
            best = Some((epoch, validation.score, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            validation,
        });
        if since_best >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        records,
        stopped_early,
    })
}
