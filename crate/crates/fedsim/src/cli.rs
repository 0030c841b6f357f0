//! Command-line pipeline driver.
//!
//! Exposes the full simulation as subcommands — fleet synthesis,
//! preprocessing, centralized and federated training, hyperparameter grid
//! search, the paired significance test, and checkpoint evaluation — each
//! writing its artifacts (config snapshot, log, reports, plot CSVs) to a
//! run directory. Exit codes: 0 success, 1 runtime failure, 2
//! configuration error. A rerun with the same config and seed rewrites
//! identical files, except for wall-clock fields (the grid CSV's
//! `runtime_seconds` column); wall-clock progress chatter goes to stdout
//! only, never into `log.txt`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, GridTarget, RunConfig};
use crate::dataset::{self, Split, WindowedDataset};
use crate::evalstats::{
    self, CellScore, ClientsSpec, FederatedCell, GridOutcome, GridRun, Metrics,
};
use crate::fedavg::{self, ClientShard, FedError, RoundConfig};
use crate::nn_core::{self, Hyperparams, N_CLASSES};
use crate::signal_ingest::{self, Channel, MAX_GAP_S};
use crate::synthgen::{self, FleetManifest};
use crate::trainer::{self, TrainConfig};

/// Federated turn-signal prediction simulator.
#[derive(Debug, Parser)]
#[command(name = "fedsim", version, about, propagate_version = true)]
pub struct Cli {
    /// Key=value configuration file (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run directory for all outputs (default: runs/<subcommand>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Override the configured random seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Override the configured worker-thread count.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic vehicle fleet (trip log CSVs plus manifest).
    Synth,
    /// Ingest fleet logs into a normalized, split dataset artifact.
    Preprocess,
    /// Train the centralized baseline model.
    TrainCentral,
    /// Train a global model by federated averaging over vehicle clients.
    TrainFederated,
    /// Sweep the hyperparameter grid for one training mode.
    Gridsearch,
    /// Paired t-test over matching central and federated grid results.
    Ttest,
    /// Evaluate a saved checkpoint on one dataset split.
    Evaluate {
        /// Model checkpoint to evaluate (overrides evaluate.checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration; maps to exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure while doing the work; maps to exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Progress lines, echoed to stdout immediately and flushed to `log.txt`
/// when the command finishes. Logged lines never carry timestamps or
/// durations, so reruns write identical logs; use [`RunLog::transient`]
/// for wall-clock chatter.
#[derive(Debug, Default)]
struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn say(&mut self, line: impl Into<String>) {
        let line = line.into();
        println!("{line}");
        self.lines.push(line);
    }

    fn transient(&self, line: impl AsRef<str>) {
        println!("{}", line.as_ref());
    }

    fn flush(&self, dir: &Path) -> std::io::Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        std::fs::write(dir.join("log.txt"), text)
    }
}

/// Parses flags and config, prepares the run directory, and dispatches.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if let Command::Evaluate {
        checkpoint: Some(path),
    } = &cli.command
    {
        config.evaluate.checkpoint = Some(path.clone());
    }
    config.validate()?;

    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| default_out(&cli.command, &config));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out.display())))?;
    write_text(&out.join("config.txt"), &config.snapshot())?;

    let started = Instant::now();
    let mut log = RunLog::default();
    let result = match &cli.command {
        Command::Synth => cmd_synth(&config, &out, &mut log),
        Command::Preprocess => cmd_preprocess(&config, &out, &mut log),
        Command::TrainCentral => cmd_train_central(&config, &out, &mut log),
        Command::TrainFederated => cmd_train_federated(&config, &out, &mut log),
        Command::Gridsearch => cmd_gridsearch(&config, &out, &mut log),
        Command::Ttest => cmd_ttest(&config, &out, &mut log),
        Command::Evaluate { .. } => cmd_evaluate(&config, &out, &mut log),
    };
    log.transient(format!("elapsed: {:.1}s", started.elapsed().as_secs_f64()));
    let flushed = log.flush(&out);
    result?;
    flushed.map_err(|e| CliError::Runtime(format!("write log: {e}")))?;
    Ok(())
}

fn default_out(command: &Command, config: &RunConfig) -> PathBuf {
    let name = match command {
        Command::Synth => "synth".to_string(),
        Command::Preprocess => "preprocess".to_string(),
        Command::TrainCentral => "train-central".to_string(),
        Command::TrainFederated => "train-federated".to_string(),
        Command::Gridsearch => format!("gridsearch-{}", config.grid.target.name()),
        Command::Ttest => "ttest".to_string(),
        Command::Evaluate { .. } => "evaluate".to_string(),
    };
    PathBuf::from("runs").join(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).map_err(runtime)?);
        text.push('\n');
    }
    write_text(path, &text)
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let spec = config.synth.scenario(config.seed);
    let manifest = synthgen::generate_fleet(&spec, out).map_err(runtime)?;
    let n_trips: usize = manifest.vehicles.iter().map(|v| v.trips.len()).sum();
    let n_forget = manifest
        .vehicles
        .iter()
        .flat_map(|v| &v.trips)
        .filter(|t| t.forget)
        .count();
    log.say(format!(
        "fleet: {} vehicles, {} trips ({} with unsignaled maneuvers), seed {}",
        manifest.vehicles.len(),
        n_trips,
        n_forget,
        config.seed,
    ));
    log.say(format!("wrote {}", synthgen::manifest_path(out).display()));
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess

fn cmd_preprocess(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let fleet_dir = &config.data.fleet_dir;
    let manifest_file = synthgen::manifest_path(fleet_dir);
    if !manifest_file.exists() {
        return Err(CliError::Config(format!(
            "no fleet manifest at {} — run the synth subcommand first or point data.fleet_dir at a fleet directory",
            manifest_file.display()
        )));
    }
    let fleet = FleetManifest::load(&manifest_file).map_err(runtime)?;
    if fleet.vehicles.is_empty() {
        return Err(CliError::Config(format!(
            "fleet manifest {} lists no vehicles",
            manifest_file.display()
        )));
    }

    let mut events_per_vehicle = Vec::with_capacity(fleet.vehicles.len());
    let mut dropped_events = 0usize;
    let mut skipped_trips = 0usize;
    let mut total_trips = 0usize;
    for vehicle in &fleet.vehicles {
        let path = fleet_dir.join(&vehicle.log_file);
        let trips = signal_ingest::parse_trip_log(&path, &Channel::ALL).map_err(runtime)?;
        total_trips += trips.len();
        let mut events = Vec::new();
        for records in &trips {
            if let Err(e) = signal_ingest::validate_continuity(records, &Channel::ALL, MAX_GAP_S) {
                log.say(format!("skipping trip: {e}"));
                skipped_trips += 1;
                continue;
            }
            let trip = match signal_ingest::resample_to_1hz(records) {
                Ok(trip) => trip,
                Err(e) => {
                    log.say(format!("skipping trip: {e}"));
                    skipped_trips += 1;
                    continue;
                }
            };
            let segmentation = signal_ingest::segment_turn_events(&trip);
            dropped_events += segmentation.dropped;
            for event in &segmentation.events {
                events.push(dataset::featurize_event(&trip, event));
            }
        }
        events_per_vehicle.push((vehicle.vehicle_id.clone(), events));
    }

    let ds = dataset::assemble(events_per_vehicle, config.split, config.seed).map_err(runtime)?;
    for excluded in &ds.excluded {
        log.say(format!(
            "excluding vehicle {} ({} events, need {})",
            excluded.vehicle_id,
            excluded.n_events,
            dataset::MIN_EVENTS_PER_VEHICLE
        ));
    }
    let window_steps = config.model.window_steps;
    dataset::save(&ds, out, window_steps, dropped_events).map_err(runtime)?;

    let windowed = WindowedDataset::materialize(&ds, window_steps).map_err(runtime)?;
    let leaks = windowed.find_leaks();
    if !leaks.is_empty() {
        return Err(CliError::Runtime(format!(
            "split leakage: {} label steps appear in more than one split (first: trip {} step {})",
            leaks.len(),
            leaks[0].0,
            leaks[0].1
        )));
    }
    let hist = windowed.class_histogram(&windowed.train);
    log.say(format!(
        "ingested {} trips ({} skipped), {} events kept, {} dropped in segmentation",
        total_trips,
        skipped_trips,
        ds.vehicles.iter().map(|v| v.events.len()).sum::<usize>(),
        dropped_events,
    ));
    log.say(format!(
        "windows at length {}: {} train / {} val / {} test across {} client vehicles; no split leakage",
        window_steps,
        windowed.train.len(),
        windowed.val.len(),
        windowed.test.len(),
        windowed.clients.len(),
    ));
    log.say(format!(
        "train label counts: off {}, left {}, right {}",
        hist[0], hist[1], hist[2]
    ));
    log.say(format!("wrote dataset to {}", out.display()));
    Ok(())
}

// ---------------------------------------------------------------------------
// shared loading helpers

fn load_dataset(config: &RunConfig) -> Result<dataset::Dataset, CliError> {
    let dir = &config.data.dataset_dir;
    if !dir.join("events.bin").exists() {
        return Err(CliError::Config(format!(
            "no dataset at {} — run the preprocess subcommand first or point data.dataset_dir at a dataset directory",
            dir.display()
        )));
    }
    dataset::load(dir).map_err(runtime)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

const CLASS_NAMES: [&str; N_CLASSES] = ["off", "left", "right"];

// ---------------------------------------------------------------------------
// train-central

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    train_loss: f64,
    val_acc_weighted: f64,
    val_f1_avg: f64,
}

#[derive(Serialize)]
struct CentralSummary<'a> {
    seed: u64,
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
    epochs_run: usize,
    best_epoch: usize,
    best_val_f1_avg: f64,
    test_loss: f64,
    test: &'a Metrics,
}

fn cmd_train_central(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let ds = load_dataset(config)?;
    let windowed = WindowedDataset::materialize(&ds, config.model.window_steps).map_err(runtime)?;
    let train = windowed.samples(&windowed.train);
    let val = windowed.samples(&windowed.val);
    let test = windowed.samples(&windowed.test);
    log.say(format!(
        "training centrally on {} windows (val {}, test {}), up to {} epochs",
        train.len(),
        val.len(),
        test.len(),
        config.central.epochs
    ));

    let train_config = TrainConfig {
        hyperparams: config.model.clone(),
        epochs: config.central.epochs,
        seed: config.seed,
        patience: config.central.patience,
    };
    let (params, reports) =
        trainer::train_centralized(&train_config, &train, &val).map_err(runtime)?;
    let evaluation = trainer::evaluate(&params, &test).map_err(runtime)?;

    let mut best_epoch = 0;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut lines = Vec::with_capacity(reports.len());
    for report in &reports {
        if report.val.average_f1 > best_f1 {
            best_f1 = report.val.average_f1;
            best_epoch = report.epoch;
        }
        lines.push(EpochLine {
            epoch: report.epoch,
            train_loss: report.train_loss,
            val_acc_weighted: report.val.weighted_accuracy,
            val_f1_avg: report.val.average_f1,
        });
    }
    write_jsonl(&out.join("epochs.jsonl"), &lines)?;
    let mut csv_text = String::from("epoch,train_loss,val_acc_weighted,val_f1_avg\n");
    for line in &lines {
        let _ = writeln!(
            csv_text,
            "{},{},{},{}",
            line.epoch, line.train_loss, line.val_acc_weighted, line.val_f1_avg
        );
    }
    write_text(&out.join("epochs.csv"), &csv_text)?;

    nn_core::save_checkpoint(&out.join("model.ckpt"), &params).map_err(runtime)?;
    write_json(
        &out.join("summary.json"),
        &CentralSummary {
            seed: config.seed,
            train_windows: train.len(),
            val_windows: val.len(),
            test_windows: test.len(),
            epochs_run: reports.len(),
            best_epoch,
            best_val_f1_avg: best_f1,
            test_loss: evaluation.loss,
            test: &evaluation.metrics,
        },
    )?;
    log.say(format!(
        "ran {} epochs, best validation avg F1 {:.4} at epoch {}",
        reports.len(),
        best_f1,
        best_epoch
    ));
    log.say(format!(
        "test: weighted accuracy {:.4}, avg F1 {:.4}",
        evaluation.metrics.weighted_accuracy, evaluation.metrics.average_f1
    ));
    log.say(format!(
        "wrote checkpoint {}",
        out.join("model.ckpt").display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// train-federated

#[derive(Serialize)]
struct RoundLine<'a> {
    round: usize,
    participants: &'a [String],
    test_acc_weighted: f64,
    test_f1_avg: f64,
    mean_local_loss: f64,
}

#[derive(Serialize)]
struct FederatedSummary<'a> {
    seed: u64,
    clients: usize,
    clients_per_round: String,
    local_epochs: usize,
    rounds_run: usize,
    test_loss: f64,
    test: &'a Metrics,
}

fn client_shards<'a>(windowed: &'a WindowedDataset) -> Vec<ClientShard<'a>> {
    windowed
        .clients
        .iter()
        .map(|client| ClientShard {
            vehicle_id: client.vehicle_id.clone(),
            train: windowed.samples(&client.train),
        })
        .collect()
}

fn map_fed_error(e: FedError) -> CliError {
    match e {
        FedError::KTooLarge { .. } => CliError::Config(format!("fed.clients_per_round: {e}")),
        other => runtime(other),
    }
}

fn cmd_train_federated(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let ds = load_dataset(config)?;
    let windowed = WindowedDataset::materialize(&ds, config.model.window_steps).map_err(runtime)?;
    let shards = client_shards(&windowed);
    let test = windowed.samples(&windowed.test);
    log.say(format!(
        "federating over {} clients ({} per round, {} local epochs, {} rounds), test {} windows",
        shards.len(),
        config.fed.clients_per_round,
        config.fed.local_epochs,
        config.fed.rounds,
        test.len(),
    ));

    let round_config = RoundConfig {
        clients_per_round: config.fed.clients_per_round,
        local_epochs: config.fed.local_epochs,
        rounds: config.fed.rounds,
        hyperparams: config.model.clone(),
        seed: config.seed,
    };
    let (params, reports) =
        fedavg::run_federated(&round_config, &shards, &test).map_err(map_fed_error)?;
    let evaluation = trainer::evaluate(&params, &test).map_err(runtime)?;

    let lines: Vec<RoundLine> = reports
        .iter()
        .map(|report| RoundLine {
            round: report.round,
            participants: &report.participants,
            test_acc_weighted: report.test.weighted_accuracy,
            test_f1_avg: report.test.average_f1,
            mean_local_loss: report.mean_local_loss,
        })
        .collect();
    write_jsonl(&out.join("rounds.jsonl"), &lines)?;
    let mut csv_text =
        String::from("round,n_participants,test_acc_weighted,test_f1_avg,mean_local_loss\n");
    for line in &lines {
        let _ = writeln!(
            csv_text,
            "{},{},{},{},{}",
            line.round,
            line.participants.len(),
            line.test_acc_weighted,
            line.test_f1_avg,
            line.mean_local_loss
        );
    }
    write_text(&out.join("rounds.csv"), &csv_text)?;

    nn_core::save_checkpoint(&out.join("model.ckpt"), &params).map_err(runtime)?;
    write_json(
        &out.join("summary.json"),
        &FederatedSummary {
            seed: config.seed,
            clients: shards.len(),
            clients_per_round: config.fed.clients_per_round.to_string(),
            local_epochs: config.fed.local_epochs,
            rounds_run: reports.len(),
            test_loss: evaluation.loss,
            test: &evaluation.metrics,
        },
    )?;
    log.say(format!(
        "ran {} rounds; final test: weighted accuracy {:.4}, avg F1 {:.4}",
        reports.len(),
        evaluation.metrics.weighted_accuracy,
        evaluation.metrics.average_f1
    ));
    log.say(format!(
        "wrote checkpoint {}",
        out.join("model.ckpt").display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// gridsearch

/// Lazily materialized window views keyed by window length, shared across
/// grid cells.
struct WindowCache<'a> {
    dataset: &'a dataset::Dataset,
    cache: Mutex<HashMap<usize, Arc<WindowedDataset>>>,
}

impl<'a> WindowCache<'a> {
    fn new(dataset: &'a dataset::Dataset) -> Self {
        Self {
            dataset,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn get(&self, window_steps: usize) -> Result<Arc<WindowedDataset>, String> {
        let mut cache = self.cache.lock().expect("window cache poisoned");
        if let Some(windowed) = cache.get(&window_steps) {
            return Ok(windowed.clone());
        }
        let windowed = Arc::new(
            WindowedDataset::materialize(self.dataset, window_steps).map_err(|e| e.to_string())?,
        );
        cache.insert(window_steps, windowed.clone());
        Ok(windowed)
    }
}

fn cmd_gridsearch(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let ds = load_dataset(config)?;
    let cache = WindowCache::new(&ds);
    let started = Instant::now();
    match config.grid.target {
        GridTarget::Central => {
            let cells = evalstats::central_grid();
            log.say(format!(
                "sweeping {} centralized cells ({} epochs each, {} workers)",
                cells.len(),
                config.grid.epochs,
                config.workers
            ));
            let outcome = evalstats::grid_search(&cells, config.workers, |cell| {
                let windowed = cache.get(cell.window_steps)?;
                let train = windowed.samples(&windowed.train);
                let val = windowed.samples(&windowed.val);
                let test = windowed.samples(&windowed.test);
                let train_config = TrainConfig {
                    hyperparams: cell.clone(),
                    epochs: config.grid.epochs,
                    seed: config.seed,
                    patience: config.grid.patience,
                };
                let (params, _) = trainer::train_centralized(&train_config, &train, &val)
                    .map_err(|e| e.to_string())?;
                let evaluation = trainer::evaluate(&params, &test).map_err(|e| e.to_string())?;
                Ok(CellScore::from_metrics(&evaluation.metrics))
            });
            write_central_grid_csv(&out.join("grid-central.csv"), &outcome, config.seed)?;
            report_grid(&outcome, out, log, |cell| {
                format!(
                    "batch {} window {} hidden {} lr {}",
                    cell.batch_size, cell.window_steps, cell.hidden_units, cell.learning_rate
                )
            })?;
        }
        GridTarget::Federated => {
            let cells = evalstats::federated_grid();
            log.say(format!(
                "sweeping {} federated cells ({} rounds each, {} workers)",
                cells.len(),
                config.grid.rounds,
                config.workers
            ));
            let outcome = evalstats::grid_search(&cells, config.workers, |cell| {
                let windowed = cache.get(cell.hyper.window_steps)?;
                let shards = client_shards(&windowed);
                let test = windowed.samples(&windowed.test);
                let round_config = RoundConfig {
                    clients_per_round: cell.clients_per_round,
                    local_epochs: cell.local_epochs,
                    rounds: config.grid.rounds,
                    hyperparams: cell.hyper.clone(),
                    seed: config.seed,
                };
                let (params, _) = fedavg::run_federated(&round_config, &shards, &test)
                    .map_err(|e| e.to_string())?;
                let evaluation = trainer::evaluate(&params, &test).map_err(|e| e.to_string())?;
                Ok(CellScore::from_metrics(&evaluation.metrics))
            });
            write_federated_grid_csv(&out.join("grid-federated.csv"), &outcome, config.seed)?;
            report_grid(&outcome, out, log, |cell| {
                format!(
                    "batch {} lr {} clients {} local epochs {}",
                    cell.hyper.batch_size,
                    cell.hyper.learning_rate,
                    cell.clients_per_round,
                    cell.local_epochs
                )
            })?;
        }
    }
    log.transient(format!(
        "grid sweep took {:.1}s",
        started.elapsed().as_secs_f64()
    ));
    Ok(())
}

/// Logs the top results and any failed cells; failures are reported (and
/// listed in failures.csv) but only fatal when nothing succeeded.
fn report_grid<C: Serialize>(
    outcome: &GridOutcome<C>,
    out: &Path,
    log: &mut RunLog,
    describe: impl Fn(&C) -> String,
) -> Result<(), CliError> {
    for run in outcome.results.iter().take(3) {
        log.say(format!(
            "  acc {:.4} avg F1 {:.4} <- {}",
            run.score.weighted_accuracy,
            run.score.average_f1,
            describe(&run.cell)
        ));
    }
    if !outcome.failures.is_empty() {
        let mut writer = csv::Writer::from_path(out.join("failures.csv"))
            .map_err(|e| CliError::Runtime(format!("write failures.csv: {e}")))?;
        writer
            .write_record(["cell", "error"])
            .and_then(|()| {
                for failure in &outcome.failures {
                    writer.write_record([describe(&failure.cell), failure.error.clone()])?;
                }
                writer.flush().map_err(csv::Error::from)
            })
            .map_err(|e| CliError::Runtime(format!("write failures.csv: {e}")))?;
        log.say(format!(
            "{} of {} cells failed (see failures.csv); first: {} -> {}",
            outcome.failures.len(),
            outcome.results.len() + outcome.failures.len(),
            describe(&outcome.failures[0].cell),
            outcome.failures[0].error
        ));
    }
    if outcome.results.is_empty() {
        return Err(CliError::Runtime(
            "every grid cell failed; see failures.csv".into(),
        ));
    }
    Ok(())
}

const CENTRAL_GRID_COLUMNS: [&str; 11] = [
    "batch_size",
    "window_steps",
    "hidden_units",
    "learning_rate",
    "weighted_accuracy",
    "f1_off",
    "f1_left",
    "f1_right",
    "average_f1",
    "seed",
    "runtime_seconds",
];

const FEDERATED_GRID_COLUMNS: [&str; 13] = [
    "batch_size",
    "window_steps",
    "hidden_units",
    "learning_rate",
    "clients_per_round",
    "local_epochs",
    "weighted_accuracy",
    "f1_off",
    "f1_left",
    "f1_right",
    "average_f1",
    "seed",
    "runtime_seconds",
];

fn write_central_grid_csv(
    path: &Path,
    outcome: &GridOutcome<Hyperparams>,
    seed: u64,
) -> Result<(), CliError> {
    let mut text = CENTRAL_GRID_COLUMNS.join(",");
    text.push('\n');
    for run in &outcome.results {
        let c = &run.cell;
        let s = &run.score;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            c.batch_size,
            c.window_steps,
            c.hidden_units,
            c.learning_rate,
            s.weighted_accuracy,
            s.per_class_f1[0],
            s.per_class_f1[1],
            s.per_class_f1[2],
            s.average_f1,
            seed,
            run.runtime_seconds
        );
    }
    write_text(path, &text)
}

fn write_federated_grid_csv(
    path: &Path,
    outcome: &GridOutcome<FederatedCell>,
    seed: u64,
) -> Result<(), CliError> {
    let mut text = FEDERATED_GRID_COLUMNS.join(",");
    text.push('\n');
    for run in &outcome.results {
        let c = &run.cell;
        let s = &run.score;
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            c.hyper.batch_size,
            c.hyper.window_steps,
            c.hyper.hidden_units,
            c.hyper.learning_rate,
            c.clients_per_round,
            c.local_epochs,
            s.weighted_accuracy,
            s.per_class_f1[0],
            s.per_class_f1[1],
            s.per_class_f1[2],
            s.average_f1,
            seed,
            run.runtime_seconds
        );
    }
    write_text(path, &text)
}

// ---------------------------------------------------------------------------
// ttest

/// Column lookup over one grid CSV's header row.
struct GridCsv {
    path: PathBuf,
    headers: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl GridCsv {
    fn open(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "no grid results at {} — run the gridsearch subcommand first",
                path.display()
            )));
        }
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?
            .clone();
        let rows = reader
            .into_records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, CliError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Runtime(format!("{} has no column {name}", self.path.display()))
        })
    }

    fn cell<'a>(&self, row: &'a csv::StringRecord, idx: usize) -> Result<&'a str, CliError> {
        row.get(idx).ok_or_else(|| {
            CliError::Runtime(format!("{}: short row in grid CSV", self.path.display()))
        })
    }
}

fn parse_field<T: std::str::FromStr>(text: &str, path: &Path, name: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    text.parse().map_err(|e| {
        CliError::Runtime(format!(
            "{}: bad {name} value {text:?}: {e}",
            path.display()
        ))
    })
}

fn read_score(csv: &GridCsv, row: &csv::StringRecord) -> Result<CellScore, CliError> {
    let path = &csv.path;
    Ok(CellScore {
        weighted_accuracy: parse_field(
            csv.cell(row, csv.column("weighted_accuracy")?)?,
            path,
            "weighted_accuracy",
        )?,
        per_class_f1: [
            parse_field(csv.cell(row, csv.column("f1_off")?)?, path, "f1_off")?,
            parse_field(csv.cell(row, csv.column("f1_left")?)?, path, "f1_left")?,
            parse_field(csv.cell(row, csv.column("f1_right")?)?, path, "f1_right")?,
        ],
        average_f1: parse_field(
            csv.cell(row, csv.column("average_f1")?)?,
            path,
            "average_f1",
        )?,
    })
}

fn read_hyper(csv: &GridCsv, row: &csv::StringRecord) -> Result<Hyperparams, CliError> {
    let path = &csv.path;
    Ok(Hyperparams {
        batch_size: parse_field(
            csv.cell(row, csv.column("batch_size")?)?,
            path,
            "batch_size",
        )?,
        window_steps: parse_field(
            csv.cell(row, csv.column("window_steps")?)?,
            path,
            "window_steps",
        )?,
        hidden_units: parse_field(
            csv.cell(row, csv.column("hidden_units")?)?,
            path,
            "hidden_units",
        )?,
        learning_rate: parse_field(
            csv.cell(row, csv.column("learning_rate")?)?,
            path,
            "learning_rate",
        )?,
    })
}

fn read_central_grid_csv(path: &Path) -> Result<Vec<GridRun<Hyperparams>>, CliError> {
    let csv = GridCsv::open(path)?;
    let mut runs = Vec::with_capacity(csv.rows.len());
    for row in &csv.rows {
        runs.push(GridRun {
            cell: read_hyper(&csv, row)?,
            score: read_score(&csv, row)?,
            runtime_seconds: 0.0,
        });
    }
    Ok(runs)
}

fn read_federated_grid_csv(path: &Path) -> Result<Vec<GridRun<FederatedCell>>, CliError> {
    let csv = GridCsv::open(path)?;
    let mut runs = Vec::with_capacity(csv.rows.len());
    for row in &csv.rows {
        let clients_text = csv.cell(row, csv.column("clients_per_round")?)?;
        let clients_per_round: ClientsSpec = parse_field(clients_text, path, "clients_per_round")?;
        runs.push(GridRun {
            cell: FederatedCell {
                hyper: read_hyper(&csv, row)?,
                clients_per_round,
                local_epochs: parse_field(
                    csv.cell(row, csv.column("local_epochs")?)?,
                    path,
                    "local_epochs",
                )?,
            },
            score: read_score(&csv, row)?,
            runtime_seconds: 0.0,
        });
    }
    Ok(runs)
}

#[derive(Serialize)]
struct MetricTTest {
    metric: &'static str,
    n_pairs: usize,
    mean_central: f64,
    mean_federated: f64,
    mean_diff: f64,
    t: f64,
    p: f64,
}

#[derive(Serialize)]
struct TTestReport {
    window_steps: usize,
    hidden_units: usize,
    n_pairs: usize,
    metrics: Vec<MetricTTest>,
}

fn cmd_ttest(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let central = read_central_grid_csv(&config.ttest.central_csv)?;
    let federated = read_federated_grid_csv(&config.ttest.federated_csv)?;
    let window_steps = config.ttest.window_steps;
    let hidden_units = config.ttest.hidden_units;

    let mut report = TTestReport {
        window_steps,
        hidden_units,
        n_pairs: 0,
        metrics: Vec::new(),
    };
    for (name, metric) in [
        (
            "weighted_accuracy",
            (|score: &CellScore| score.weighted_accuracy) as fn(&CellScore) -> f64,
        ),
        ("average_f1", |score: &CellScore| score.average_f1),
    ] {
        let pairs =
            evalstats::pair_grid_metric(&central, &federated, window_steps, hidden_units, metric);
        if pairs.is_empty() {
            return Err(CliError::Runtime(format!(
                "no grid cells to pair at window_steps {window_steps}, hidden_units {hidden_units}; \
                 check that both CSVs cover that corner of the grid"
            )));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let t_test = evalstats::paired_t_test(&x, &y).map_err(runtime)?;
        report.n_pairs = t_test.n;
        report.metrics.push(MetricTTest {
            metric: name,
            n_pairs: t_test.n,
            mean_central: x.iter().sum::<f64>() / x.len() as f64,
            mean_federated: y.iter().sum::<f64>() / y.len() as f64,
            mean_diff: t_test.mean_diff,
            t: t_test.t,
            p: t_test.p,
        });
    }
    write_json(&out.join("ttest.json"), &report)?;
    for m in &report.metrics {
        log.say(format!(
            "{}: central {:.4} vs federated {:.4} over {} pairs -> t {:.4}, p {:.4}",
            m.metric, m.mean_central, m.mean_federated, m.n_pairs, m.t, m.p
        ));
    }
    log.say(format!("wrote {}", out.join("ttest.json").display()));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    split: &'static str,
    windows: usize,
    loss: f64,
    metrics: &'a Metrics,
}

fn cmd_evaluate(config: &RunConfig, out: &Path, log: &mut RunLog) -> Result<(), CliError> {
    let checkpoint = config.evaluate.checkpoint.as_ref().ok_or_else(|| {
        CliError::Config(
            "no checkpoint to evaluate — pass --checkpoint or set evaluate.checkpoint".into(),
        )
    })?;
    if !checkpoint.exists() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let params = nn_core::load_checkpoint(checkpoint).map_err(runtime)?;
    let ds = load_dataset(config)?;
    let windowed = WindowedDataset::materialize(&ds, config.model.window_steps).map_err(runtime)?;
    let refs = match config.evaluate.split {
        Split::Train => &windowed.train,
        Split::Val => &windowed.val,
        Split::Test => &windowed.test,
    };
    if refs.is_empty() {
        return Err(CliError::Runtime(format!(
            "the {} split holds no windows at window_steps {}",
            split_name(config.evaluate.split),
            config.model.window_steps
        )));
    }
    let samples = windowed.samples(refs);
    let windows: Vec<&[f64]> = samples.iter().map(|&(features, _)| features).collect();
    let probs = nn_core::probs_batch(&params, &windows).map_err(runtime)?;

    let mut predictions = Vec::with_capacity(probs.len());
    let mut labels = Vec::with_capacity(probs.len());
    let mut loss_sum = 0.0;
    for (&(_, label), p) in samples.iter().zip(&probs) {
        let mut predicted = 0;
        for k in 1..N_CLASSES {
            if p[k] > p[predicted] {
                predicted = k;
            }
        }
        predictions.push(predicted);
        labels.push(label);
        loss_sum += nn_core::loss(p, label);
    }
    let loss = loss_sum / probs.len() as f64;
    let metrics = evalstats::compute_metrics(&predictions, &labels).map_err(runtime)?;

    let mut csv_text =
        String::from("vehicle_id,trip_id,step,label,predicted,p_off,p_left,p_right\n");
    for ((r, &predicted), p) in refs.iter().zip(&predictions).zip(&probs) {
        let event = &windowed.events[r.event as usize];
        let vehicle_id = &ds.vehicles[event.vehicle_idx].vehicle_id;
        let step = event.slice_start + r.offset as usize + windowed.window_steps;
        let label = event.labels[r.offset as usize + windowed.window_steps] as usize;
        let _ = writeln!(
            csv_text,
            "{},{},{},{},{},{},{},{}",
            vehicle_id,
            event.trip_id,
            step,
            CLASS_NAMES[label],
            CLASS_NAMES[predicted],
            p[0],
            p[1],
            p[2]
        );
    }
    write_text(&out.join("predictions.csv"), &csv_text)?;
    write_json(
        &out.join("metrics.json"),
        &EvalReport {
            checkpoint: checkpoint.display().to_string(),
            split: split_name(config.evaluate.split),
            windows: samples.len(),
            loss,
            metrics: &metrics,
        },
    )?;
    log.say(format!(
        "{} on {} {} windows: weighted accuracy {:.4}, avg F1 {:.4}, loss {:.4}",
        checkpoint.display(),
        samples.len(),
        split_name(config.evaluate.split),
        metrics.weighted_accuracy,
        metrics.average_f1,
        loss
    ));
    Ok(())
}
