//! Centralized training loop and the shared epoch primitive that
//! federated clients reuse verbatim: shuffle, mini-batch forward/backward,
//! gradient clipping, one Adam step per batch. Model selection tracks the
//! best validation average F1 with early stopping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evalstats::{self, EvalError, Metrics};
use crate::nn_core::{
    adam_step, clip_global_norm, init_params, loss, probs_batch, AdamState, BatchEvaluator,
    Hyperparams, ModelParams, NnError, Sample, GRAD_CLIP_NORM, N_CLASSES,
};
use crate::streams;

/// Patience value that never triggers early stopping.
pub const PATIENCE_UNLIMITED: usize = usize::MAX;

/// Full description of one centralized training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hyperparams: Hyperparams,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
}

/// What one epoch did: mean training loss and validation quality.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training requires a nonempty dataset")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("window length {len} is not {window_steps} steps of a whole number of features")]
    BadWindowShape { len: usize, window_steps: usize },
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One pass over `samples`: shuffles them with `rng`, walks sequential
/// mini-batches of `hyperparams.batch_size` (the final short batch is
/// kept), and applies one clipped Adam update per batch. Returns the
/// sample-weighted mean loss of the epoch. Deterministic given
/// (params, adam, samples, rng state).
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    samples: &[Sample<'_>],
    hyperparams: &Hyperparams,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let expected_len = hyperparams.window_steps * params.features();
    if samples[0].0.len() != expected_len {
        return Err(TrainError::BadWindowShape {
            len: samples[0].0.len(),
            window_steps: hyperparams.window_steps,
        });
    }
    let mut order = samples.to_vec();
    order.shuffle(rng);
    let mut evaluator =
        BatchEvaluator::new(params.hidden(), params.features(), hyperparams.window_steps);
    let mut grad = vec![0.0; params.flatten().len()];
    let mut loss_sum = 0.0;
    for batch in order.chunks(hyperparams.batch_size) {
        let (g, batch_mean_loss) = evaluator.grad_mean_loss(params, batch);
        grad.copy_from_slice(g);
        clip_global_norm(&mut grad, GRAD_CLIP_NORM);
        adam_step(params, &grad, adam, hyperparams.learning_rate)?;
        loss_sum += batch_mean_loss * batch.len() as f64;
    }
    Ok(loss_sum / samples.len() as f64)
}

/// Mean cross-entropy loss and classification metrics of fixed
/// parameters on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: Metrics,
}

fn argmax(p: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for k in 1..N_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Evaluates `params` on `samples` without touching them.
pub fn evaluate(params: &ModelParams, samples: &[Sample<'_>]) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let windows: Vec<&[f64]> = samples.iter().map(|s| s.0).collect();
    let probs = probs_batch(params, &windows)?;
    let mut predictions = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for (p, &(_, label)) in probs.iter().zip(samples) {
        predictions.push(argmax(p));
        labels.push(label);
        loss_sum += loss(p, label);
    }
    let metrics = evalstats::compute_metrics(&predictions, &labels)?;
    Ok(Evaluation {
        loss: loss_sum / samples.len() as f64,
        metrics,
    })
}

/// Trains on pooled data for up to `config.epochs` epochs, evaluating on
/// `val` after each and keeping the parameters with the best validation
/// average F1 (strict improvement). Stops early once `config.patience`
/// epochs pass without improvement.
///
/// Each epoch starts from a fresh Adam state and a shuffle stream keyed
/// by (seed, [`streams::CENTRAL_OWNER`], epoch), so an epoch here is the
/// same computation as a one-client federated round — the two paths
/// produce bitwise-identical trajectories when fed the same shard under
/// the same owner tag.
pub fn train_centralized(
    config: &TrainConfig,
    train: &[Sample<'_>],
    val: &[Sample<'_>],
) -> Result<(ModelParams, Vec<EpochReport>), TrainError> {
    if config.epochs == 0 {
        return Err(TrainError::NoEpochs);
    }
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let hp = &config.hyperparams;
    if !train[0].0.len().is_multiple_of(hp.window_steps) {
        return Err(TrainError::BadWindowShape {
            len: train[0].0.len(),
            window_steps: hp.window_steps,
        });
    }
    let features = train[0].0.len() / hp.window_steps;
    let mut params = init_params(hp.hidden_units, features, streams::init_seed(config.seed));
    let mut best_params = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut reports = Vec::new();
    for epoch in 1..=config.epochs {
        let mut adam = AdamState::new(params.flatten().len());
        let mut rng = streams::train_rng(config.seed, streams::CENTRAL_OWNER, epoch as u64, 0);
        let train_loss = train_epoch(&mut params, &mut adam, train, hp, &mut rng)?;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let val_eval = evaluate(&params, val)?;
        if val_eval.metrics.average_f1 > best_f1 {
            best_f1 = val_eval.metrics.average_f1;
            best_epoch = epoch;
            best_params = params.clone();
        }
        reports.push(EpochReport {
            epoch,
            train_loss,
            val: val_eval.metrics,
        });
        if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok((best_params, reports))
}
