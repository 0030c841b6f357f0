//! Run configuration: a flat `key=value` text format with dotted
//! namespaces (e.g. `fed.rounds=100`), defaults for every tunable,
//! strict validation (unknown keys are rejected), and a canonical
//! snapshot serialization so every run directory records exactly what it
//! ran with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{Split, SplitFractions};
use crate::evalstats::ClientsSpec;
use crate::nn_core::Hyperparams;
use crate::synthgen::{ManeuverMix, ScenarioSpec, SensorNoiseStd};
use crate::trainer::PATIENCE_UNLIMITED;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key '{key}'")]
    UnknownKey { key: String },
    #[error("invalid value for '{key}': {message}")]
    BadValue { key: String, message: String },
    #[error("line {line_no} is not a key=value assignment: '{content}'")]
    MalformedLine { line_no: usize, content: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read configuration file: {0}")]
    Io(String),
}

/// Fleet-generation tunables (the run seed is supplied separately).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub vehicles: usize,
    pub trips_per_vehicle: usize,
    pub forget_prob: f64,
    pub drop_prob: f64,
    pub mix: ManeuverMix,
    pub noise: SensorNoiseStd,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = ScenarioSpec::default();
        Self {
            vehicles: spec.n_vehicles,
            trips_per_vehicle: spec.trips_per_vehicle,
            forget_prob: spec.forget_signal_prob,
            drop_prob: spec.drop_prob,
            mix: spec.maneuver_mix,
            noise: spec.sensor_noise_std,
        }
    }
}

impl SynthConfig {
    /// The generator spec for this configuration under `seed`.
    pub fn scenario(&self, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            n_vehicles: self.vehicles,
            trips_per_vehicle: self.trips_per_vehicle,
            seed,
            maneuver_mix: self.mix.clone(),
            forget_signal_prob: self.forget_prob,
            sensor_noise_std: self.noise.clone(),
            drop_prob: self.drop_prob,
        }
    }
}

/// Where pipeline stages find each other's artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Fleet CSVs + manifest, as written by the synth stage.
    pub fleet_dir: PathBuf,
    /// Serialized dataset artifact, as written by the preprocess stage.
    pub dataset_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            fleet_dir: PathBuf::from("runs/synth"),
            dataset_dir: PathBuf::from("runs/preprocess"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralConfig {
    pub epochs: usize,
    pub patience: usize,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_per_round: ClientsSpec,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_epochs: 5,
            clients_per_round: ClientsSpec::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridTarget {
    Central,
    Federated,
}

impl GridTarget {
    pub fn name(self) -> &'static str {
        match self {
            GridTarget::Central => "central",
            GridTarget::Federated => "federated",
        }
    }
}

/// Budget caps for grid-search cells (full-length runs per cell would
/// take days; the grid compares cells under a reduced budget).
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub target: GridTarget,
    /// Epochs per central cell.
    pub epochs: usize,
    pub patience: usize,
    /// Rounds per federated cell.
    pub rounds: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            target: GridTarget::Central,
            epochs: 3,
            patience: PATIENCE_UNLIMITED,
            rounds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtestConfig {
    pub central_csv: PathBuf,
    pub federated_csv: PathBuf,
    /// Pairing is restricted to cells at this window length and hidden
    /// size (the dimensions the federated grid does not sweep).
    pub window_steps: usize,
    pub hidden_units: usize,
}

impl Default for TtestConfig {
    fn default() -> Self {
        Self {
            central_csv: PathBuf::from("runs/gridsearch-central/grid-central.csv"),
            federated_csv: PathBuf::from("runs/gridsearch-federated/grid-federated.csv"),
            window_steps: 5,
            hidden_units: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Test,
        }
    }
}

/// Every tunable of every pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub split: SplitFractions,
    pub model: Hyperparams,
    pub central: CentralConfig,
    pub fed: FedConfig,
    pub grid: GridConfig,
    pub ttest: TtestConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            split: SplitFractions::default(),
            model: Hyperparams {
                batch_size: 64,
                window_steps: 5,
                hidden_units: 50,
                learning_rate: 1e-3,
            },
            central: CentralConfig::default(),
            fed: FedConfig::default(),
            grid: GridConfig::default(),
            ttest: TtestConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    value: &str,
    expected: &str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("expected {expected}, got '{value}'"),
    })
}

fn parse_patience(key: &str, value: &str) -> Result<usize, ConfigError> {
    if value.trim().eq_ignore_ascii_case("unlimited") {
        return Ok(PATIENCE_UNLIMITED);
    }
    parse_num(key, value, "a non-negative integer or 'unlimited'")
}

fn patience_string(patience: usize) -> String {
    if patience == PATIENCE_UNLIMITED {
        "unlimited".to_string()
    } else {
        patience.to_string()
    }
}

fn parse_split_name(key: &str, value: &str) -> Result<Split, ConfigError> {
    match value.trim() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(ConfigError::BadValue {
            key: key.to_string(),
            message: format!("expected train, val, or test, got '{other}'"),
        }),
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v, "an unsigned integer")?,
            "workers" => self.workers = parse_num(key, v, "a positive integer")?,
            "synth.vehicles" => self.synth.vehicles = parse_num(key, v, "a positive integer")?,
            "synth.trips_per_vehicle" => {
                self.synth.trips_per_vehicle = parse_num(key, v, "a positive integer")?
            }
            "synth.forget_prob" => self.synth.forget_prob = parse_num(key, v, "a probability")?,
            "synth.drop_prob" => self.synth.drop_prob = parse_num(key, v, "a probability")?,
            "synth.mix.left_turn" => self.synth.mix.left_turn = parse_num(key, v, "a weight")?,
            "synth.mix.right_turn" => self.synth.mix.right_turn = parse_num(key, v, "a weight")?,
            "synth.mix.left_lane_change" => {
                self.synth.mix.left_lane_change = parse_num(key, v, "a weight")?
            }
            "synth.mix.right_lane_change" => {
                self.synth.mix.right_lane_change = parse_num(key, v, "a weight")?
            }
            "synth.mix.straight" => self.synth.mix.straight = parse_num(key, v, "a weight")?,
            "synth.noise.steering" => {
                self.synth.noise.steering_deg = parse_num(key, v, "a std in degrees")?
            }
            "synth.noise.speed" => self.synth.noise.speed_kph = parse_num(key, v, "a std in km/h")?,
            "synth.noise.pedal" => self.synth.noise.pedal_pct = parse_num(key, v, "a std in %")?,
            "synth.noise.heading" => {
                self.synth.noise.heading_deg = parse_num(key, v, "a std in degrees")?
            }
            "synth.noise.gps" => self.synth.noise.gps_m = parse_num(key, v, "a std in meters")?,
            "data.fleet_dir" => self.data.fleet_dir = PathBuf::from(v),
            "data.dataset_dir" => self.data.dataset_dir = PathBuf::from(v),
            "split.train" => self.split.train = parse_num(key, v, "a fraction")?,
            "split.val" => self.split.val = parse_num(key, v, "a fraction")?,
            "split.test" => self.split.test = parse_num(key, v, "a fraction")?,
            "model.batch_size" => self.model.batch_size = parse_num(key, v, "a positive integer")?,
            "model.window_steps" => {
                self.model.window_steps = parse_num(key, v, "a positive integer")?
            }
            "model.hidden_units" => {
                self.model.hidden_units = parse_num(key, v, "a positive integer")?
            }
            "model.learning_rate" => {
                self.model.learning_rate = parse_num(key, v, "a positive number")?
            }
            "central.epochs" => self.central.epochs = parse_num(key, v, "a positive integer")?,
            "central.patience" => self.central.patience = parse_patience(key, v)?,
            "fed.rounds" => self.fed.rounds = parse_num(key, v, "a non-negative integer")?,
            "fed.local_epochs" => self.fed.local_epochs = parse_num(key, v, "a positive integer")?,
            "fed.clients_per_round" => {
                self.fed.clients_per_round =
                    v.parse().map_err(|e: String| ConfigError::BadValue {
                        key: key.to_string(),
                        message: e,
                    })?
            }
            "grid.target" => {
                self.grid.target = match v {
                    "central" => GridTarget::Central,
                    "federated" => GridTarget::Federated,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            message: format!("expected central or federated, got '{other}'"),
                        })
                    }
                }
            }
            "grid.epochs" => self.grid.epochs = parse_num(key, v, "a positive integer")?,
            "grid.patience" => self.grid.patience = parse_patience(key, v)?,
            "grid.rounds" => self.grid.rounds = parse_num(key, v, "a positive integer")?,
            "ttest.central_csv" => self.ttest.central_csv = PathBuf::from(v),
            "ttest.federated_csv" => self.ttest.federated_csv = PathBuf::from(v),
            "ttest.window_steps" => {
                self.ttest.window_steps = parse_num(key, v, "a positive integer")?
            }
            "ttest.hidden_units" => {
                self.ttest.hidden_units = parse_num(key, v, "a positive integer")?
            }
            "evaluate.checkpoint" => self.evaluate.checkpoint = Some(PathBuf::from(v)),
            "evaluate.split" => self.evaluate.split = parse_split_name(key, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses a configuration file body: one `key=value` per line, `#`
    /// comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line_no: idx + 1,
                    content: raw.to_string(),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cross-field validation; errors name the offending key(s).
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        let mix_sum = self.synth.mix.sum();
        if (mix_sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "synth.mix.* weights must sum to 1, got {mix_sum}"
            )));
        }
        self.synth
            .scenario(self.seed)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("synth.*: {e}")))?;
        self.split
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("split.*: {e}")))?;
        if self.model.batch_size == 0
            || self.model.window_steps == 0
            || self.model.hidden_units == 0
        {
            return Err(ConfigError::Invalid(
                "model.batch_size, model.window_steps, and model.hidden_units must be positive"
                    .into(),
            ));
        }
        if !(self.model.learning_rate.is_finite() && self.model.learning_rate >= 0.0) {
            return Err(ConfigError::Invalid(
                "model.learning_rate must be a non-negative finite number".into(),
            ));
        }
        if self.central.epochs == 0 {
            return Err(ConfigError::Invalid(
                "central.epochs must be at least 1".into(),
            ));
        }
        if self.fed.local_epochs == 0 {
            return Err(ConfigError::Invalid(
                "fed.local_epochs must be at least 1".into(),
            ));
        }
        if let ClientsSpec::Count(0) = self.fed.clients_per_round {
            return Err(ConfigError::Invalid(
                "fed.clients_per_round must be at least 1 or 'all'".into(),
            ));
        }
        if self.grid.epochs == 0 || self.grid.rounds == 0 {
            return Err(ConfigError::Invalid(
                "grid.epochs and grid.rounds must be at least 1".into(),
            ));
        }
        if self.ttest.window_steps == 0 || self.ttest.hidden_units == 0 {
            return Err(ConfigError::Invalid(
                "ttest.window_steps and ttest.hidden_units must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical `key=value` serialization: every key, sorted, one per
    /// line. `RunConfig::parse(snapshot)` reproduces the configuration.
    pub fn snapshot(&self) -> String {
        let mut kv: BTreeMap<&'static str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        kv.insert("workers", self.workers.to_string());
        kv.insert("synth.vehicles", self.synth.vehicles.to_string());
        kv.insert(
            "synth.trips_per_vehicle",
            self.synth.trips_per_vehicle.to_string(),
        );
        kv.insert("synth.forget_prob", self.synth.forget_prob.to_string());
        kv.insert("synth.drop_prob", self.synth.drop_prob.to_string());
        kv.insert("synth.mix.left_turn", self.synth.mix.left_turn.to_string());
        kv.insert(
            "synth.mix.right_turn",
            self.synth.mix.right_turn.to_string(),
        );
        kv.insert(
            "synth.mix.left_lane_change",
            self.synth.mix.left_lane_change.to_string(),
        );
        kv.insert(
            "synth.mix.right_lane_change",
            self.synth.mix.right_lane_change.to_string(),
        );
        kv.insert("synth.mix.straight", self.synth.mix.straight.to_string());
        kv.insert(
            "synth.noise.steering",
            self.synth.noise.steering_deg.to_string(),
        );
        kv.insert("synth.noise.speed", self.synth.noise.speed_kph.to_string());
        kv.insert("synth.noise.pedal", self.synth.noise.pedal_pct.to_string());
        kv.insert(
            "synth.noise.heading",
            self.synth.noise.heading_deg.to_string(),
        );
        kv.insert("synth.noise.gps", self.synth.noise.gps_m.to_string());
        kv.insert("data.fleet_dir", self.data.fleet_dir.display().to_string());
        kv.insert(
            "data.dataset_dir",
            self.data.dataset_dir.display().to_string(),
        );
        kv.insert("split.train", self.split.train.to_string());
        kv.insert("split.val", self.split.val.to_string());
        kv.insert("split.test", self.split.test.to_string());
        kv.insert("model.batch_size", self.model.batch_size.to_string());
        kv.insert("model.window_steps", self.model.window_steps.to_string());
        kv.insert("model.hidden_units", self.model.hidden_units.to_string());
        kv.insert("model.learning_rate", self.model.learning_rate.to_string());
        kv.insert("central.epochs", self.central.epochs.to_string());
        kv.insert("central.patience", patience_string(self.central.patience));
        kv.insert("fed.rounds", self.fed.rounds.to_string());
        kv.insert("fed.local_epochs", self.fed.local_epochs.to_string());
        kv.insert(
            "fed.clients_per_round",
            self.fed.clients_per_round.to_string(),
        );
        kv.insert("grid.target", self.grid.target.name().to_string());
        kv.insert("grid.epochs", self.grid.epochs.to_string());
        kv.insert("grid.patience", patience_string(self.grid.patience));
        kv.insert("grid.rounds", self.grid.rounds.to_string());
        kv.insert(
            "ttest.central_csv",
            self.ttest.central_csv.display().to_string(),
        );
        kv.insert(
            "ttest.federated_csv",
            self.ttest.federated_csv.display().to_string(),
        );
        kv.insert("ttest.window_steps", self.ttest.window_steps.to_string());
        kv.insert("ttest.hidden_units", self.ttest.hidden_units.to_string());
        if let Some(ckpt) = &self.evaluate.checkpoint {
            kv.insert("evaluate.checkpoint", ckpt.display().to_string());
        }
        kv.insert(
            "evaluate.split",
            match self.evaluate.split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            }
            .to_string(),
        );
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_applies_overrides_and_ignores_comments() {
        let config = RunConfig::parse(
            "# a comment\n\
             \n\
             seed = 42\n\
             fed.rounds=100\n\
             fed.clients_per_round=10\n\
             model.learning_rate=1e-4\n\
             central.patience=unlimited\n\
             grid.target=federated\n\
             evaluate.split=val\n",
        )
        .unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.fed.rounds, 100);
        assert_eq!(config.fed.clients_per_round, ClientsSpec::Count(10));
        assert_eq!(config.model.learning_rate, 1e-4);
        assert_eq!(config.central.patience, PATIENCE_UNLIMITED);
        assert_eq!(config.grid.target, GridTarget::Federated);
        assert_eq!(config.evaluate.split, Split::Val);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("fed.round=3\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "fed.round".into()
            }
        );
        assert!(err.to_string().contains("fed.round"));
    }

    #[test]
    fn malformed_lines_are_rejected_with_position() {
        let err = RunConfig::parse("seed=1\nnot an assignment\n").unwrap_err();
        assert!(matches!(err, ConfigError::MalformedLine { line_no: 2, .. }));
    }

    #[test]
    fn bad_values_name_their_key() {
        let err = RunConfig::parse("fed.rounds=many\n").unwrap_err();
        assert!(err.to_string().contains("fed.rounds"));
        let err = RunConfig::parse("fed.clients_per_round=some\n").unwrap_err();
        assert!(err.to_string().contains("fed.clients_per_round"));
    }

    #[test]
    fn invalid_maneuver_mix_sum_names_the_key_prefix() {
        let mut config = RunConfig::default();
        config.set("synth.mix.straight", "0.25").unwrap();
        let err = config.validate().unwrap_err();
        assert!(
            err.to_string().contains("synth.mix"),
            "message must name the key: {err}"
        );
        assert!(err.to_string().contains("0.9"));
    }

    #[test]
    fn invalid_split_fractions_name_the_key_prefix() {
        let mut config = RunConfig::default();
        config.set("split.test", "0.3").unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("split."), "got: {err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut config = RunConfig::default();
        for (k, v) in [
            ("seed", "7"),
            ("workers", "3"),
            ("synth.vehicles", "4"),
            ("synth.noise.gps", "0.25"),
            ("model.learning_rate", "0.0001"),
            ("model.window_steps", "10"),
            ("fed.clients_per_round", "all"),
            ("central.patience", "unlimited"),
            ("grid.target", "federated"),
            ("data.fleet_dir", "/tmp/fleet"),
            ("evaluate.checkpoint", "runs/train/model.ckpt"),
            ("evaluate.split", "train"),
        ] {
            config.set(k, v).unwrap();
        }
        let reparsed = RunConfig::parse(&config.snapshot()).unwrap();
        assert_eq!(reparsed, config);
        // And the snapshot itself is a fixed point.
        assert_eq!(reparsed.snapshot(), config.snapshot());
    }

    #[test]
    fn default_snapshot_round_trips() {
        let config = RunConfig::default();
        let reparsed = RunConfig::parse(&config.snapshot()).unwrap();
        assert_eq!(reparsed, config);
    }

    #[test]
    fn values_may_contain_spaces_around_equals() {
        let config = RunConfig::parse("model.batch_size = 128\n").unwrap();
        assert_eq!(config.model.batch_size, 128);
    }
}
