//! Dataset assembly: featurizes extracted turn events, splits them at
//! the event level into train/validation/test within each vehicle,
//! z-scores continuous features with training statistics, and
//! materializes sliding windows whose label is the turn-signal class at
//! the step immediately after the window. The central training set is
//! exactly the union of the per-vehicle client training sets.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal_ingest::{TurnEvent, UniformTrip};
use crate::streams;

/// Features per time step: steering, speed, pedal, brake, sin/cos of
/// heading, per-second GPS displacement north/east, and the one-hot
/// turn-signal state.
pub const N_FEATURES: usize = 11;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "steering_wheel_angle",
    "vehicle_speed",
    "accel_pedal_pos",
    "brake_status",
    "heading_sin",
    "heading_cos",
    "gps_delta_north_m",
    "gps_delta_east_m",
    "signal_off",
    "signal_left",
    "signal_right",
];

/// Which features are z-scored; binary and one-hot columns pass through.
pub const ZSCORED: [bool; N_FEATURES] = [
    true, true, true, false, true, true, true, true, false, false, false,
];

/// Features with standard deviation below this are mapped to 0 instead
/// of being divided by a vanishing scale.
pub const STD_GUARD: f64 = 1e-8;

const METERS_PER_DEG_LAT: f64 = 111_320.0;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("event of {steps} steps cannot host windows of {window_steps} steps (needs at least window_steps + 1)")]
    TooShort { steps: usize, window_steps: usize },
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("normalization needs at least 2 training feature rows, got {rows}")]
    TooFewTrainRows { rows: usize },
    #[error("dataset artifact is corrupt: {0}")]
    Corrupt(String),
    #[error("failed to read or write dataset artifact: {0}")]
    Io(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

/// One featurized turn event: `steps × N_FEATURES` feature rows plus the
/// per-step class labels, all still un-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedEvent {
    pub trip_id: String,
    /// Index of the event slice's first step on the source trip's grid.
    pub slice_start: usize,
    /// Row-major `steps × N_FEATURES` feature matrix.
    pub rows: Vec<f64>,
    /// Turn-signal class per step (0=Off, 1=Left, 2=Right).
    pub labels: Vec<u8>,
}

impl FeaturizedEvent {
    pub fn steps(&self) -> usize {
        self.labels.len()
    }
}

/// Extracts the feature matrix for one turn event from its trip.
///
/// GPS enters as per-second displacement in meters (projected on a local
/// tangent plane), never as absolute coordinates; the heading angle is
/// re-encoded as (sin, cos) to remove the 360° discontinuity; the
/// turn-signal state of the current step is one-hot encoded (the label
/// of a window is the state one step past its end).
pub fn featurize_event(trip: &UniformTrip, event: &TurnEvent) -> FeaturizedEvent {
    let start = event.slice_start();
    let end = event.slice_end();
    debug_assert!(end < trip.duration_s);
    let lat_ref_cos = trip.gps_lat[0].to_radians().cos();
    let steps = end - start + 1;
    let mut rows = Vec::with_capacity(steps * N_FEATURES);
    let mut labels = Vec::with_capacity(steps);
    for k in start..=end {
        let heading_rad = trip.heading[k].to_radians();
        let (dn, de) = if k == 0 {
            (0.0, 0.0)
        } else {
            (
                (trip.gps_lat[k] - trip.gps_lat[k - 1]) * METERS_PER_DEG_LAT,
                (trip.gps_lon[k] - trip.gps_lon[k - 1]) * METERS_PER_DEG_LAT * lat_ref_cos,
            )
        };
        let class = trip.labels[k].class_index();
        rows.extend_from_slice(&[
            trip.steering_wheel_angle[k],
            trip.vehicle_speed[k],
            trip.accel_pedal_pos[k],
            trip.brake_status[k],
            heading_rad.sin(),
            heading_rad.cos(),
            dn,
            de,
            f64::from(class == 0),
            f64::from(class == 1),
            f64::from(class == 2),
        ]);
        labels.push(class as u8);
    }
    FeaturizedEvent {
        trip_id: trip.trip_id.clone(),
        slice_start: start,
        rows,
        labels,
    }
}

/// One sliding-window training sample borrowed from an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSample<'a> {
    /// `window_steps × N_FEATURES` rows.
    pub features: &'a [f64],
    /// Class at the step immediately after the window.
    pub label: usize,
    /// Step index (within the event slice) the label sits at.
    pub end_step: usize,
}

/// Slides a window over one event's rows: sample `i` covers rows
/// `[i, i+window_steps)` and is labeled with step `i+window_steps`,
/// giving exactly `steps − window_steps` samples.
pub fn build_windows<'a>(
    rows: &'a [f64],
    labels: &'a [u8],
    window_steps: usize,
) -> Result<Vec<WindowSample<'a>>, DatasetError> {
    let steps = labels.len();
    assert_eq!(rows.len(), steps * N_FEATURES, "malformed feature matrix");
    assert!(window_steps > 0, "window_steps must be positive");
    if steps < window_steps + 1 {
        return Err(DatasetError::TooShort {
            steps,
            window_steps,
        });
    }
    Ok((0..steps - window_steps)
        .map(|i| WindowSample {
            features: &rows[i * N_FEATURES..(i + window_steps) * N_FEATURES],
            label: labels[i + window_steps] as usize,
            end_step: i + window_steps,
        })
        .collect())
}

/// Per-feature training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Computes per-feature mean and population standard deviation over the
/// rows of the given (training) events.
pub fn fit_normalization<'a>(
    events: impl IntoIterator<Item = &'a FeaturizedEvent> + Clone,
) -> Result<NormalizationStats, DatasetError> {
    let mut n = 0usize;
    let mut sum = [0.0f64; N_FEATURES];
    for event in events.clone() {
        for row in event.rows.chunks_exact(N_FEATURES) {
            for (acc, &v) in sum.iter_mut().zip(row) {
                *acc += v;
            }
        }
        n += event.steps();
    }
    if n < 2 {
        return Err(DatasetError::TooFewTrainRows { rows: n });
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = [0.0f64; N_FEATURES];
    for event in events {
        for row in event.rows.chunks_exact(N_FEATURES) {
            for ((acc, &m), &v) in sq.iter_mut().zip(&mean).zip(row) {
                let d = v - m;
                *acc += d * d;
            }
        }
    }
    let std = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(NormalizationStats { mean, std })
}

/// Z-scores the z-scored feature columns in place; columns whose
/// training std fell below [`STD_GUARD`] become 0.
pub fn apply_normalization(stats: &NormalizationStats, rows: &mut [f64]) {
    assert_eq!(rows.len() % N_FEATURES, 0);
    for row in rows.chunks_exact_mut(N_FEATURES) {
        for (c, v) in row.iter_mut().enumerate() {
            if ZSCORED[c] {
                *v = if stats.std[c] >= STD_GUARD {
                    (*v - stats.mean[c]) / stats.std[c]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Inverse of [`apply_normalization`] for round-trip checks.
pub fn undo_normalization(stats: &NormalizationStats, rows: &mut [f64]) {
    for row in rows.chunks_exact_mut(N_FEATURES) {
        for (c, v) in row.iter_mut().enumerate() {
            if ZSCORED[c] && stats.std[c] >= STD_GUARD {
                *v = *v * stats.std[c] + stats.mean[c];
            }
        }
    }
}

/// Which split an event landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn to_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Split> {
        match v {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Train/validation/test proportions; must be positive and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (name, f) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if !f.is_finite() || f <= 0.0 {
                return Err(DatasetError::BadFractions(format!(
                    "{name} fraction must be positive, got {f}"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadFractions(format!(
                "fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Event counts per split: floor each share, then give the remainder
    /// to train.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n_train = (self.train * n as f64).floor() as usize;
        let n_val = (self.val * n as f64).floor() as usize;
        let n_test = (self.test * n as f64).floor() as usize;
        let remainder = n - (n_train + n_val + n_test);
        (n_train + remainder, n_val, n_test)
    }
}

/// One vehicle's featurized events with their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleEvents {
    pub vehicle_id: String,
    pub events: Vec<FeaturizedEvent>,
    /// `splits[i]` tags `events[i]`.
    pub splits: Vec<Split>,
}

/// A vehicle excluded from the dataset for having too few events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedVehicle {
    pub vehicle_id: String,
    pub n_events: usize,
}

/// The assembled (un-windowed) dataset artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vehicles: Vec<VehicleEvents>,
    pub stats: NormalizationStats,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub excluded: Vec<ExcludedVehicle>,
}

/// Minimum events a vehicle needs to participate.
pub const MIN_EVENTS_PER_VEHICLE: usize = 3;

/// Splits each vehicle's events and fits normalization statistics on the
/// training events.
///
/// The split is at the event level (windows of one event never straddle
/// splits), deterministic in `seed`, and independent of the order
/// vehicles are supplied in (vehicles are sorted by id, and each
/// vehicle's shuffle stream is keyed by its id). Vehicles with fewer
/// than [`MIN_EVENTS_PER_VEHICLE`] events are excluded and reported.
pub fn assemble(
    events_per_vehicle: Vec<(String, Vec<FeaturizedEvent>)>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    fractions.validate()?;
    let mut sorted = events_per_vehicle;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut vehicles = Vec::new();
    let mut excluded = Vec::new();
    for (vehicle_id, events) in sorted {
        if events.len() < MIN_EVENTS_PER_VEHICLE {
            excluded.push(ExcludedVehicle {
                vehicle_id,
                n_events: events.len(),
            });
            continue;
        }
        let n = events.len();
        let (n_train, n_val, _n_test) = fractions.counts(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = streams::stream_rng(seed, &format!("split/{vehicle_id}"), 0, 0);
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Test; n];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        vehicles.push(VehicleEvents {
            vehicle_id,
            events,
            splits,
        });
    }
    let train_events = vehicles.iter().flat_map(|v| {
        v.events
            .iter()
            .zip(&v.splits)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(e, _)| e)
    });
    let stats = fit_normalization(train_events)?;
    Ok(Dataset {
        vehicles,
        stats,
        fractions,
        seed,
        excluded,
    })
}

/// One event's normalized feature tensor inside a windowed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEvent {
    pub vehicle_idx: usize,
    pub trip_id: String,
    pub slice_start: usize,
    pub split: Split,
    /// Normalized row-major `steps × N_FEATURES` features.
    pub flat: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Borrow-free handle to one window: rows `[offset, offset+W)` of event
/// `event`, labeled at step `offset+W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub event: u32,
    pub offset: u32,
}

/// One client's windows (train plus its held-out validation and test
/// shares).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientWindows {
    pub vehicle_id: String,
    pub train: Vec<WindowRef>,
    pub val: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
}

/// Window-level view of the dataset for one window length: normalized
/// event tensors plus train/val/test window lists, globally and per
/// client. The global train list is the concatenation of the client
/// train lists in vehicle order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub window_steps: usize,
    pub events: Vec<TensorEvent>,
    pub train: Vec<WindowRef>,
    pub val: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
    pub clients: Vec<ClientWindows>,
}

impl WindowedDataset {
    /// Normalizes every event with the dataset's training statistics and
    /// enumerates all windows of length `window_steps`.
    pub fn materialize(dataset: &Dataset, window_steps: usize) -> Result<Self, DatasetError> {
        let mut events = Vec::new();
        let mut clients = Vec::new();
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (vehicle_idx, vehicle) in dataset.vehicles.iter().enumerate() {
            let mut client = ClientWindows {
                vehicle_id: vehicle.vehicle_id.clone(),
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for (event, &split) in vehicle.events.iter().zip(&vehicle.splits) {
                let steps = event.steps();
                if steps < window_steps + 1 {
                    return Err(DatasetError::TooShort {
                        steps,
                        window_steps,
                    });
                }
                let mut flat = event.rows.clone();
                apply_normalization(&dataset.stats, &mut flat);
                let event_idx = events.len() as u32;
                events.push(TensorEvent {
                    vehicle_idx,
                    trip_id: event.trip_id.clone(),
                    slice_start: event.slice_start,
                    split,
                    flat,
                    labels: event.labels.clone(),
                });
                let refs = (0..steps - window_steps).map(|i| WindowRef {
                    event: event_idx,
                    offset: i as u32,
                });
                match split {
                    Split::Train => client.train.extend(refs),
                    Split::Val => client.val.extend(refs),
                    Split::Test => client.test.extend(refs),
                }
            }
            train.extend_from_slice(&client.train);
            val.extend_from_slice(&client.val);
            test.extend_from_slice(&client.test);
            clients.push(client);
        }
        Ok(WindowedDataset {
            window_steps,
            events,
            train,
            val,
            test,
            clients,
        })
    }

    /// The feature window and label behind a handle.
    pub fn sample(&self, r: WindowRef) -> (&[f64], usize) {
        let event = &self.events[r.event as usize];
        let offset = r.offset as usize;
        let features = &event.flat[offset * N_FEATURES..(offset + self.window_steps) * N_FEATURES];
        (features, event.labels[offset + self.window_steps] as usize)
    }

    /// Materializes a list of handles into (features, label) samples.
    pub fn samples<'a>(&'a self, refs: &[WindowRef]) -> Vec<(&'a [f64], usize)> {
        refs.iter().map(|&r| self.sample(r)).collect()
    }

    /// Label histogram over a list of windows.
    pub fn class_histogram(&self, refs: &[WindowRef]) -> [u64; 3] {
        let mut hist = [0u64; 3];
        for &r in refs {
            hist[self.sample(r).1] += 1;
        }
        hist
    }

    /// Checks the no-leakage invariant: no (vehicle, trip, label step)
    /// identity appears in more than one of train/val/test.
    pub fn find_leaks(&self) -> Vec<(String, usize)> {
        use std::collections::HashMap;
        let mut seen: HashMap<(usize, &str, usize), Split> = HashMap::new();
        let mut leaks = Vec::new();
        for (split, refs) in [
            (Split::Train, &self.train),
            (Split::Val, &self.val),
            (Split::Test, &self.test),
        ] {
            for r in refs {
                let event = &self.events[r.event as usize];
                let step = event.slice_start + r.offset as usize + self.window_steps;
                let key = (event.vehicle_idx, event.trip_id.as_str(), step);
                match seen.get(&key) {
                    Some(&s) if s != split => leaks.push((event.trip_id.clone(), step)),
                    _ => {
                        seen.insert(key, split);
                    }
                }
            }
        }
        leaks
    }
}

// ---------------------------------------------------------------------------
// Artifact serialization
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 8] = b"FSIMDSET";
const DATASET_VERSION: u32 = 1;

/// Human-readable summary stored next to the binary event file. Window
/// counts and the class histogram are reported for the configured
/// default window length (the stored events themselves can be
/// re-windowed at any length).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub feature_names: Vec<String>,
    pub zscored: Vec<bool>,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub window_steps: usize,
    /// Turn-signal runs discarded during segmentation for lacking quiet
    /// padding.
    pub dropped_events: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    /// Label counts over the training windows (Off, Left, Right).
    pub train_class_histogram: [u64; 3],
    pub stats: NormalizationStats,
    pub excluded: Vec<ExcludedVehicle>,
    pub vehicles: Vec<VehicleSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub vehicle_id: String,
    pub events: usize,
    pub train_events: usize,
    pub val_events: usize,
    pub test_events: usize,
}

pub fn manifest_of(
    dataset: &Dataset,
    window_steps: usize,
    dropped_events: usize,
) -> Result<DatasetManifest, DatasetError> {
    let windowed = WindowedDataset::materialize(dataset, window_steps)?;
    Ok(DatasetManifest {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        zscored: ZSCORED.to_vec(),
        fractions: dataset.fractions,
        seed: dataset.seed,
        window_steps,
        dropped_events,
        train_windows: windowed.train.len(),
        val_windows: windowed.val.len(),
        test_windows: windowed.test.len(),
        train_class_histogram: windowed.class_histogram(&windowed.train),
        stats: dataset.stats.clone(),
        excluded: dataset.excluded.clone(),
        vehicles: dataset
            .vehicles
            .iter()
            .map(|v| VehicleSummary {
                vehicle_id: v.vehicle_id.clone(),
                events: v.events.len(),
                train_events: v.splits.iter().filter(|s| **s == Split::Train).count(),
                val_events: v.splits.iter().filter(|s| **s == Split::Val).count(),
                test_events: v.splits.iter().filter(|s| **s == Split::Test).count(),
            })
            .collect(),
    })
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DatasetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, DatasetError> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(DatasetError::Corrupt(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| DatasetError::Corrupt(e.to_string()))
}

/// Writes `events.bin` and `manifest.json` under `dir`; the manifest
/// reports window statistics for `window_steps`.
pub fn save(
    dataset: &Dataset,
    dir: &Path,
    window_steps: usize,
    dropped_events: usize,
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("events.bin"))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    write_u64(&mut w, dataset.seed)?;
    for f in [
        dataset.fractions.train,
        dataset.fractions.val,
        dataset.fractions.test,
    ] {
        w.write_all(&f.to_le_bytes())?;
    }
    for stat in [&dataset.stats.mean, &dataset.stats.std] {
        for &v in stat {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_u64(&mut w, dataset.excluded.len() as u64)?;
    for ex in &dataset.excluded {
        write_str(&mut w, &ex.vehicle_id)?;
        write_u64(&mut w, ex.n_events as u64)?;
    }
    write_u64(&mut w, dataset.vehicles.len() as u64)?;
    for vehicle in &dataset.vehicles {
        write_str(&mut w, &vehicle.vehicle_id)?;
        write_u64(&mut w, vehicle.events.len() as u64)?;
        for (event, split) in vehicle.events.iter().zip(&vehicle.splits) {
            write_str(&mut w, &event.trip_id)?;
            write_u64(&mut w, event.slice_start as u64)?;
            write_u64(&mut w, event.steps() as u64)?;
            w.write_all(&[split.to_u8()])?;
            w.write_all(&event.labels)?;
            for &v in &event.rows {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    let manifest = manifest_of(dataset, window_steps, dropped_events)?;
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| DatasetError::Io(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads a dataset previously written by [`save`].
pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
    let file = std::fs::File::open(dir.join("events.bin"))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::Corrupt("bad magic".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != DATASET_VERSION {
        return Err(DatasetError::Corrupt(format!(
            "unsupported version {version}"
        )));
    }
    let seed = read_u64(&mut r)?;
    let read_f64 = |r: &mut std::io::BufReader<std::fs::File>| -> Result<f64, DatasetError> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let v = f64::from_le_bytes(buf);
        if v.is_nan() {
            return Err(DatasetError::Corrupt("NaN in artifact".into()));
        }
        Ok(v)
    };
    let fractions = SplitFractions {
        train: read_f64(&mut r)?,
        val: read_f64(&mut r)?,
        test: read_f64(&mut r)?,
    };
    let mut mean = vec![0.0; N_FEATURES];
    let mut std = vec![0.0; N_FEATURES];
    for v in mean.iter_mut().chain(std.iter_mut()) {
        *v = read_f64(&mut r)?;
    }
    let n_excluded = read_u64(&mut r)? as usize;
    let mut excluded = Vec::with_capacity(n_excluded.min(1024));
    for _ in 0..n_excluded {
        let vehicle_id = read_str(&mut r)?;
        let n_events = read_u64(&mut r)? as usize;
        excluded.push(ExcludedVehicle {
            vehicle_id,
            n_events,
        });
    }
    let n_vehicles = read_u64(&mut r)? as usize;
    let mut vehicles = Vec::with_capacity(n_vehicles.min(4096));
    for _ in 0..n_vehicles {
        let vehicle_id = read_str(&mut r)?;
        let n_events = read_u64(&mut r)? as usize;
        let mut events = Vec::with_capacity(n_events.min(1 << 20));
        let mut splits = Vec::with_capacity(n_events.min(1 << 20));
        for _ in 0..n_events {
            let trip_id = read_str(&mut r)?;
            let slice_start = read_u64(&mut r)? as usize;
            let steps = read_u64(&mut r)? as usize;
            if steps == 0 || steps > 1 << 24 {
                return Err(DatasetError::Corrupt(format!("event of {steps} steps")));
            }
            let mut split = [0u8; 1];
            r.read_exact(&mut split)?;
            let split = Split::from_u8(split[0])
                .ok_or_else(|| DatasetError::Corrupt(format!("split tag {}", split[0])))?;
            let mut labels = vec![0u8; steps];
            r.read_exact(&mut labels)?;
            if labels.iter().any(|&l| l > 2) {
                return Err(DatasetError::Corrupt("label out of range".into()));
            }
            let mut rows = Vec::with_capacity(steps * N_FEATURES);
            for _ in 0..steps * N_FEATURES {
                rows.push(read_f64(&mut r)?);
            }
            events.push(FeaturizedEvent {
                trip_id,
                slice_start,
                rows,
                labels,
            });
            splits.push(split);
        }
        vehicles.push(VehicleEvents {
            vehicle_id,
            events,
            splits,
        });
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(DatasetError::Corrupt("trailing bytes".into()));
    }
    Ok(Dataset {
        vehicles,
        stats: NormalizationStats { mean, std },
        fractions,
        seed,
        excluded,
    })
}
