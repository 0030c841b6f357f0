//! Federated orchestration: per-round client selection, local training
//! on client shards, sample-weighted parameter averaging, and the
//! multi-round loop. Clients hand the server only parameter vectors and
//! sample counts — window data never crosses the module boundary.

use rand::Rng;
use thiserror::Error;

use crate::evalstats::{ClientsSpec, Metrics};
use crate::nn_core::{init_params, AdamState, Hyperparams, ModelParams, Sample};
use crate::streams;
use crate::trainer::{self, TrainError};

/// Shape of one federated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub clients_per_round: ClientsSpec,
    pub local_epochs: usize,
    pub rounds: usize,
    pub hyperparams: Hyperparams,
    pub seed: u64,
}

/// One simulated vehicle: an id plus its private training windows.
#[derive(Debug, Clone)]
pub struct ClientShard<'a> {
    pub vehicle_id: String,
    pub train: Vec<Sample<'a>>,
}

/// What a client sends back to the server after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub vehicle_id: String,
    /// Flat parameter vector after local training.
    pub params: Vec<f64>,
    /// Training samples that produced this update (the FedAvg weight).
    pub n_samples: usize,
}

/// Server-side record of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: usize,
    /// Vehicles that trained this round, ascending by id.
    pub participants: Vec<String>,
    /// Global-model quality on the held-out test set after aggregation.
    pub test: Metrics,
    /// Unweighted mean over participants of their local mean loss.
    pub mean_local_loss: f64,
}

#[derive(Debug, Error)]
pub enum FedError {
    #[error("cannot select {k} of {clients} clients")]
    KTooLarge { k: usize, clients: usize },
    #[error("invalid federated configuration: {0}")]
    InvalidConfig(String),
    #[error("no client updates to aggregate")]
    EmptyUpdateList,
    #[error("client update length {actual} does not match the global model ({expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("federation requires at least one client")]
    NoClients,
    #[error("local training loss became non-finite in round {round}")]
    NonFiniteLoss { round: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Picks the round's participants: `k` distinct clients drawn uniformly
/// without replacement from a stream keyed by (seed, round_idx), or every
/// client for [`ClientsSpec::All`]. The result is ascending by id and
/// independent of the order ids are supplied in.
pub fn select_clients(
    all_clients: &[String],
    k: ClientsSpec,
    round_idx: u64,
    seed: u64,
) -> Result<Vec<String>, FedError> {
    let mut ids: Vec<String> = all_clients.to_vec();
    ids.sort();
    let n = ids.len();
    let k = match k {
        ClientsSpec::All => n,
        ClientsSpec::Count(k) => k,
    };
    if k == 0 || k > n {
        return Err(FedError::KTooLarge { k, clients: n });
    }
    let mut rng = streams::stream_rng(seed, "select-clients", round_idx, 0);
    // Partial Fisher–Yates: after i swaps the prefix ids[..i] is a
    // uniform sample without replacement.
    for i in 0..k {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids.sort();
    Ok(ids)
}

/// Local training on one client: copies the global parameters, runs
/// `local_epochs` passes of [`trainer::train_epoch`] with one fresh Adam
/// state for the whole round, and returns the resulting parameters with
/// the shard size. The shuffle stream of local epoch `l` is keyed by
/// (seed, vehicle_id, round_idx, l), so results cannot depend on client
/// scheduling order. Returns the update and the mean loss over the local
/// epochs; `None` for an empty shard (the caller skips the client).
pub fn local_train(
    global: &ModelParams,
    client: &ClientShard<'_>,
    local_epochs: usize,
    hyperparams: &Hyperparams,
    round_idx: u64,
    seed: u64,
) -> Result<Option<(ClientUpdate, f64)>, FedError> {
    if client.train.is_empty() {
        return Ok(None);
    }
    let mut params = global.clone();
    let mut adam = AdamState::new(params.flatten().len());
    let mut loss_sum = 0.0;
    for l in 0..local_epochs {
        let mut rng = streams::train_rng(seed, &client.vehicle_id, round_idx, l as u64);
        loss_sum +=
            trainer::train_epoch(&mut params, &mut adam, &client.train, hyperparams, &mut rng)?;
    }
    Ok(Some((
        ClientUpdate {
            vehicle_id: client.vehicle_id.clone(),
            params: params.flatten().to_vec(),
            n_samples: client.train.len(),
        },
        loss_sum / local_epochs as f64,
    )))
}

/// Sample-weighted FedAvg: the coordinate-wise mean of the updates with
/// weights `n_k / Σ n_k`. Updates are summed in vehicle-id order, so the
/// result is bitwise independent of the list's permutation; a single
/// update passes through bitwise (its weight is exactly 1).
pub fn aggregate(updates: &[ClientUpdate]) -> Result<Vec<f64>, FedError> {
    if updates.is_empty() {
        return Err(FedError::EmptyUpdateList);
    }
    let expected = updates[0].params.len();
    for u in updates {
        if u.params.len() != expected {
            return Err(FedError::LengthMismatch {
                expected,
                actual: u.params.len(),
            });
        }
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id));
    let total: f64 = order.iter().map(|u| u.n_samples as f64).sum();
    let mut out = vec![0.0; expected];
    for u in order {
        let w = u.n_samples as f64 / total;
        for (acc, &p) in out.iter_mut().zip(&u.params) {
            *acc += w * p;
        }
    }
    Ok(out)
}

/// Runs the full federated loop: initialize the global model, then per
/// round select clients, train each locally from the current global
/// parameters, average the updates, and evaluate the new global model on
/// the held-out test set. Client Adam state is reset every round; the
/// server applies the averaged parameters directly.
pub fn run_federated(
    config: &RoundConfig,
    clients: &[ClientShard<'_>],
    test: &[Sample<'_>],
) -> Result<(ModelParams, Vec<RoundReport>), FedError> {
    if clients.is_empty() {
        return Err(FedError::NoClients);
    }
    if config.local_epochs == 0 {
        return Err(FedError::InvalidConfig(
            "local_epochs must be at least 1".into(),
        ));
    }
    if let ClientsSpec::Count(k) = config.clients_per_round {
        if k == 0 || k > clients.len() {
            return Err(FedError::KTooLarge {
                k,
                clients: clients.len(),
            });
        }
    }
    let hp = &config.hyperparams;
    let reference = clients
        .iter()
        .find(|c| !c.train.is_empty())
        .ok_or(FedError::EmptyUpdateList)?;
    let window_len = reference.train[0].0.len();
    if !window_len.is_multiple_of(hp.window_steps) {
        return Err(FedError::Train(TrainError::BadWindowShape {
            len: window_len,
            window_steps: hp.window_steps,
        }));
    }
    let features = window_len / hp.window_steps;
    let mut global = init_params(hp.hidden_units, features, streams::init_seed(config.seed));
    let ids: Vec<String> = clients.iter().map(|c| c.vehicle_id.clone()).collect();
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let selected = select_clients(&ids, config.clients_per_round, round as u64, config.seed)?;
        let mut updates = Vec::with_capacity(selected.len());
        let mut participants = Vec::with_capacity(selected.len());
        let mut loss_sum = 0.0;
        for id in &selected {
            let client = clients
                .iter()
                .find(|c| &c.vehicle_id == id)
                .expect("selected id comes from the client list");
            match local_train(
                &global,
                client,
                config.local_epochs,
                hp,
                round as u64,
                config.seed,
            )? {
                Some((update, loss)) => {
                    loss_sum += loss;
                    participants.push(update.vehicle_id.clone());
                    updates.push(update);
                }
                None => continue, // empty shard: skipped, excluded from weights
            }
        }
        let averaged = aggregate(&updates)?;
        global
            .set_flat(&averaged)
            .map_err(|e| FedError::Train(TrainError::Nn(e)))?;
        let mean_local_loss = loss_sum / updates.len() as f64;
        if !mean_local_loss.is_finite() {
            return Err(FedError::NonFiniteLoss { round });
        }
        let test_eval = trainer::evaluate(&global, test)?;
        reports.push(RoundReport {
            round,
            participants,
            test: test_eval.metrics,
            mean_local_loss,
        });
    }
    Ok((global, reports))
}
