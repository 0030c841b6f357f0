//! Synthetic fleet generation: physically plausible trips (turns, lane
//! changes, straight driving) with correlated steering, speed, heading,
//! GPS, pedal, brake, and turn-signal traces, written in the raw log CSV
//! format the ingestion module consumes. Generation is deterministic for
//! a given scenario seed, and every vehicle draws from an independent
//! stream, so concurrency can never change the output.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal_ingest::{Channel, TripRecords, TurnLabel};
use crate::streams;

/// Internal trajectory integration step; all channel sample rates divide
/// 1/DT, so sample instants land exactly on the internal grid.
const DT: f64 = 0.25;
const STEPS_PER_S: usize = 4;

const WHEELBASE_M: f64 = 2.8;
const STEERING_RATIO: f64 = 15.0;
const METERS_PER_DEG_LAT: f64 = 111_320.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scenario spec invalid: {0}")]
    InvalidSpec(String),
    #[error("failed to write fleet files: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode fleet manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// The driving maneuver a trip is built around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    LeftTurn,
    RightTurn,
    LeftLaneChange,
    RightLaneChange,
    Straight,
}

impl Maneuver {
    pub const ALL: [Maneuver; 5] = [
        Maneuver::LeftTurn,
        Maneuver::RightTurn,
        Maneuver::LeftLaneChange,
        Maneuver::RightLaneChange,
        Maneuver::Straight,
    ];

    /// Which indicator the driver uses for this maneuver, if any.
    pub fn signal_side(self) -> Option<TurnLabel> {
        match self {
            Maneuver::LeftTurn | Maneuver::LeftLaneChange => Some(TurnLabel::Left),
            Maneuver::RightTurn | Maneuver::RightLaneChange => Some(TurnLabel::Right),
            Maneuver::Straight => None,
        }
    }

    pub fn is_turn(self) -> bool {
        matches!(self, Maneuver::LeftTurn | Maneuver::RightTurn)
    }
}

/// Probabilities of each maneuver type; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverMix {
    pub left_turn: f64,
    pub right_turn: f64,
    pub left_lane_change: f64,
    pub right_lane_change: f64,
    pub straight: f64,
}

impl Default for ManeuverMix {
    /// Left-heavy defaults: left indicators occur more often than right
    /// ones in the modeled traffic mix.
    fn default() -> Self {
        Self {
            left_turn: 0.25,
            right_turn: 0.15,
            left_lane_change: 0.15,
            right_lane_change: 0.10,
            straight: 0.35,
        }
    }
}

impl ManeuverMix {
    pub fn weights(&self) -> [f64; 5] {
        [
            self.left_turn,
            self.right_turn,
            self.left_lane_change,
            self.right_lane_change,
            self.straight,
        ]
    }

    /// Rebuilds a mix from a weight array in [`Maneuver::ALL`] order.
    pub fn from_weights(w: [f64; 5]) -> Self {
        Self {
            left_turn: w[0],
            right_turn: w[1],
            left_lane_change: w[2],
            right_lane_change: w[3],
            straight: w[4],
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights().iter().sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.weights().iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err("maneuver_mix entries must lie in [0, 1]".to_string());
        }
        let sum = self.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("maneuver_mix must sum to 1, got {sum}"));
        }
        Ok(())
    }

    /// Draws one maneuver according to the mix.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Maneuver {
        let u: f64 = rng.random::<f64>() * self.sum();
        let mut acc = 0.0;
        for (maneuver, weight) in Maneuver::ALL.into_iter().zip(self.weights()) {
            acc += weight;
            if u < acc {
                return maneuver;
            }
        }
        Maneuver::Straight
    }
}

/// Additive Gaussian noise scale per sensor channel; categorical
/// channels (brake, turn signal) are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseStd {
    pub steering_deg: f64,
    pub speed_kph: f64,
    pub pedal_pct: f64,
    pub heading_deg: f64,
    pub gps_m: f64,
}

impl Default for SensorNoiseStd {
    fn default() -> Self {
        Self {
            steering_deg: 0.5,
            speed_kph: 0.3,
            pedal_pct: 1.0,
            heading_deg: 0.5,
            gps_m: 0.1,
        }
    }
}

impl SensorNoiseStd {
    pub const ZERO: SensorNoiseStd = SensorNoiseStd {
        steering_deg: 0.0,
        speed_kph: 0.0,
        pedal_pct: 0.0,
        heading_deg: 0.0,
        gps_m: 0.0,
    };

    fn validate(&self) -> Result<(), String> {
        let all = [
            ("steering_deg", self.steering_deg),
            ("speed_kph", self.speed_kph),
            ("pedal_pct", self.pedal_pct),
            ("heading_deg", self.heading_deg),
            ("gps_m", self.gps_m),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(format!(
                    "sensor_noise_std.{name} must be a non-negative number"
                ));
            }
        }
        Ok(())
    }
}

/// Complete description of one synthetic fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_vehicles: usize,
    pub trips_per_vehicle: usize,
    pub seed: u64,
    pub maneuver_mix: ManeuverMix,
    /// Probability that a maneuver happens without the driver signaling.
    pub forget_signal_prob: f64,
    pub sensor_noise_std: SensorNoiseStd,
    /// Probability of dropping each non-endpoint raw sample, exercising
    /// the interpolation paths downstream.
    pub drop_prob: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_vehicles: 20,
            trips_per_vehicle: 70,
            seed: 0,
            maneuver_mix: ManeuverMix::default(),
            forget_signal_prob: 0.05,
            sensor_noise_std: SensorNoiseStd::default(),
            drop_prob: 0.05,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_vehicles == 0 {
            return Err(SynthError::InvalidSpec(
                "n_vehicles must be positive".into(),
            ));
        }
        if self.trips_per_vehicle == 0 {
            return Err(SynthError::InvalidSpec(
                "trips_per_vehicle must be positive".into(),
            ));
        }
        self.maneuver_mix
            .validate()
            .map_err(SynthError::InvalidSpec)?;
        if !(0.0..=1.0).contains(&self.forget_signal_prob) {
            return Err(SynthError::InvalidSpec(format!(
                "forget_signal_prob must lie in [0, 1], got {}",
                self.forget_signal_prob
            )));
        }
        self.sensor_noise_std
            .validate()
            .map_err(SynthError::InvalidSpec)?;
        if !(0.0..=0.5).contains(&self.drop_prob) {
            return Err(SynthError::InvalidSpec(format!(
                "drop_prob must lie in [0, 0.5], got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// Concentration of the per-driver maneuver-propensity draw: each driver's
/// personal mix is Dirichlet(concentration × fleet mix). Smaller values give
/// stronger skew between drivers (more non-identically-distributed clients);
/// at this setting some drivers rarely perform a whole maneuver class while
/// the fleet-level frequencies still average out to the configured mix.
const MIX_CONCENTRATION: f64 = 6.0;

/// Per-vehicle driver habits; the source of client heterogeneity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    /// Seconds the indicator goes on before the maneuver starts.
    pub signal_lead_s: f64,
    /// Seconds the indicator stays on after the maneuver ends.
    pub signal_lag_s: f64,
    pub speed_preference_kph: f64,
    /// Personal maneuver propensities in [`Maneuver::ALL`] order; a
    /// Dirichlet perturbation of the fleet mix (maneuvers the fleet mix
    /// assigns zero weight stay exactly zero).
    pub maneuver_weights: [f64; 5],
}

impl DriverProfile {
    pub fn sample(rng: &mut ChaCha8Rng, fleet_mix: &ManeuverMix) -> Self {
        Self {
            signal_lead_s: rng.random_range(0.5..8.0),
            signal_lag_s: rng.random_range(0.5..9.5),
            speed_preference_kph: rng.random_range(30.0..70.0),
            maneuver_weights: dirichlet_around(fleet_mix, rng),
        }
    }

    /// This driver's personal maneuver distribution.
    pub fn maneuver_mix(&self) -> ManeuverMix {
        ManeuverMix::from_weights(self.maneuver_weights)
    }
}

/// Draws normalized propensities from Dirichlet(MIX_CONCENTRATION × mix),
/// component-wise via Gamma draws. Zero-weight components are skipped so
/// degenerate mixes stay degenerate; if every draw underflows to zero the
/// fleet mix itself is returned.
fn dirichlet_around(mix: &ManeuverMix, rng: &mut ChaCha8Rng) -> [f64; 5] {
    let base = mix.weights();
    let mut draws = [0.0f64; 5];
    let mut total = 0.0;
    for (draw, &weight) in draws.iter_mut().zip(&base) {
        if weight > 0.0 {
            let gamma = Gamma::new(MIX_CONCENTRATION * weight, 1.0)
                .expect("shape is positive for positive weights");
            *draw = gamma.sample(rng);
            total += *draw;
        }
    }
    if total <= 0.0 {
        return base;
    }
    draws.map(|d| d / total)
}

/// Ground-truth metadata for one generated trip (analysis only; the
/// training pipeline never reads it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripMeta {
    pub trip_id: String,
    pub maneuver: Maneuver,
    /// The driver performed the maneuver without signaling.
    pub forget: bool,
    pub maneuver_start_s: Option<f64>,
    pub maneuver_end_s: Option<f64>,
    pub signal_on_s: Option<f64>,
    pub signal_off_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub vehicle_id: String,
    pub log_file: String,
    pub profile: DriverProfile,
    pub trips: Vec<TripMeta>,
}

/// Manifest describing everything a fleet generation run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub spec: ScenarioSpec,
    pub vehicles: Vec<VehicleRecord>,
}

impl FleetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Snaps a duration onto the internal integration grid.
fn grid(seconds: f64) -> f64 {
    (seconds / DT).round() * DT
}

/// Cosine ease between two values, u in [0, 1].
fn ramp(from: f64, to: f64, u: f64) -> f64 {
    from + (to - from) * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0
}

/// Wraps an angle to [0, 360), guarding against rounding up to 360.
fn wrap_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Phase layout of one trip on the internal grid, in seconds.
struct TripPhases {
    pre_s: f64,
    maneuver_s: f64,
    post_s: f64,
    /// Turn maneuvers split into approach / wait / sweep / exit.
    approach_s: f64,
    wait_s: f64,
    sweep_s: f64,
}

fn plan_phases(maneuver: Maneuver, rng: &mut ChaCha8Rng) -> TripPhases {
    let pre_s = grid(rng.random_range(60.0..75.0));
    let post_s = grid(rng.random_range(20.0..30.0));
    match maneuver {
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let approach_s = grid(rng.random_range(4.0..7.0));
            let wait_s = if rng.random::<f64>() < 0.5 {
                grid(rng.random_range(0.0..6.0))
            } else {
                0.0
            };
            let sweep_s = grid(rng.random_range(6.0..10.0));
            let exit_s = grid(rng.random_range(4.0..7.0));
            TripPhases {
                pre_s,
                maneuver_s: approach_s + wait_s + sweep_s + exit_s,
                post_s,
                approach_s,
                wait_s,
                sweep_s,
            }
        }
        Maneuver::LeftLaneChange | Maneuver::RightLaneChange => TripPhases {
            pre_s,
            maneuver_s: grid(rng.random_range(3.0..6.0)),
            post_s,
            approach_s: 0.0,
            wait_s: 0.0,
            sweep_s: 0.0,
        },
        Maneuver::Straight => TripPhases {
            pre_s,
            maneuver_s: 0.0,
            post_s,
            approach_s: 0.0,
            wait_s: 0.0,
            sweep_s: 0.0,
        },
    }
}

/// Noise-free trajectory arrays on the internal grid.
struct IdealTrace {
    speed_mps: Vec<f64>,
    /// Unwrapped heading in degrees (monotone across turns).
    heading_deg: Vec<f64>,
    steering_deg: Vec<f64>,
    pedal_pct: Vec<f64>,
    brake: Vec<f64>,
    east_m: Vec<f64>,
    north_m: Vec<f64>,
}

fn build_trace(
    profile: &DriverProfile,
    maneuver: Maneuver,
    phases: &TripPhases,
    rng: &mut ChaCha8Rng,
) -> IdealTrace {
    let total_s = phases.pre_s + phases.maneuver_s + phases.post_s;
    let n = (total_s / DT).round() as usize + 1;
    let v_cruise = (profile.speed_preference_kph + rng.random_range(-3.0..3.0)).max(20.0) / 3.6;
    let v_turn = rng.random_range(12.0..18.0) / 3.6;
    let turn_total_deg = 90.0 + rng.random_range(-8.0..8.0);
    let lane_dev_deg = rng.random_range(4.0..8.0);
    let h0: f64 = rng.random_range(0.0..360.0);
    let direction = match maneuver.signal_side() {
        Some(TurnLabel::Left) => 1.0,
        Some(TurnLabel::Right) => -1.0,
        _ => 0.0,
    };

    let m0 = phases.pre_s;
    let m1 = phases.pre_s + phases.maneuver_s;
    let sweep_start = m0 + phases.approach_s + phases.wait_s;
    let sweep_end = sweep_start + phases.sweep_s;
    let exit_end = m1;

    let mut speed_mps = Vec::with_capacity(n);
    let mut yaw_dps = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * DT;
        let (v, yaw) = if maneuver.is_turn() {
            let v = if t < m0 {
                v_cruise
            } else if t < m0 + phases.approach_s {
                ramp(v_cruise, v_turn, (t - m0) / phases.approach_s)
            } else if t < sweep_end {
                v_turn
            } else if t < exit_end {
                ramp(v_turn, v_cruise, (t - sweep_end) / (exit_end - sweep_end))
            } else {
                v_cruise
            };
            let yaw = if (sweep_start..sweep_end).contains(&t) {
                let u = (t - sweep_start) / phases.sweep_s;
                direction * turn_total_deg * (1.0 - (2.0 * std::f64::consts::PI * u).cos())
                    / phases.sweep_s
            } else {
                0.0
            };
            (v, yaw)
        } else if maneuver.signal_side().is_some() {
            // Lane change: constant speed, S-shaped heading deviation
            // with zero net change.
            let yaw = if (m0..m1).contains(&t) {
                let u = (t - m0) / phases.maneuver_s;
                direction
                    * lane_dev_deg
                    * std::f64::consts::PI
                    * (2.0 * std::f64::consts::PI * u).sin()
                    / phases.maneuver_s
            } else {
                0.0
            };
            (v_cruise, yaw)
        } else {
            (v_cruise, 0.0)
        };
        speed_mps.push(v);
        yaw_dps.push(yaw);
    }

    let mut heading_deg = Vec::with_capacity(n);
    let mut east_m = Vec::with_capacity(n);
    let mut north_m = Vec::with_capacity(n);
    let mut h = h0;
    let (mut east, mut north) = (0.0, 0.0);
    for i in 0..n {
        heading_deg.push(h);
        east_m.push(east);
        north_m.push(north);
        let h_rad = h.to_radians();
        east += speed_mps[i] * h_rad.sin() * DT;
        north += speed_mps[i] * h_rad.cos() * DT;
        h += yaw_dps[i] * DT;
    }

    let mut steering_deg = Vec::with_capacity(n);
    let mut pedal_pct = Vec::with_capacity(n);
    let mut brake = Vec::with_capacity(n);
    for i in 0..n {
        let yaw_rad_s = yaw_dps[i].to_radians();
        let road_wheel = (WHEELBASE_M * yaw_rad_s / speed_mps[i].max(1.0)).atan();
        steering_deg.push(STEERING_RATIO * road_wheel.to_degrees());
        let accel = if i == 0 || i + 1 == n {
            0.0
        } else {
            (speed_mps[i + 1] - speed_mps[i - 1]) / (2.0 * DT)
        };
        brake.push(if accel < -0.4 { 1.0 } else { 0.0 });
        pedal_pct.push(if accel < -0.05 {
            0.0
        } else {
            (8.0 + 0.22 * speed_mps[i] * 3.6 + 28.0 * accel).clamp(0.0, 100.0)
        });
    }

    IdealTrace {
        speed_mps,
        heading_deg,
        steering_deg,
        pedal_pct,
        brake,
        east_m,
        north_m,
    }
}

/// Generates one trip's raw records plus its ground-truth metadata.
///
/// The trip keeps at least 60 s of straight driving before the maneuver
/// and 20 s after it, so the downstream 40 s / 10 s event padding always
/// fits.
pub fn generate_trip(
    profile: &DriverProfile,
    maneuver: Maneuver,
    forget: bool,
    noise: &SensorNoiseStd,
    vehicle_id: &str,
    trip_id: &str,
    rng: &mut ChaCha8Rng,
) -> (TripRecords, TripMeta) {
    let phases = plan_phases(maneuver, rng);
    let trace = build_trace(profile, maneuver, &phases, rng);
    let n = trace.speed_mps.len();
    let total_s = (n - 1) as f64 * DT;
    let m0 = phases.pre_s;
    let m1 = phases.pre_s + phases.maneuver_s;

    let signal = maneuver.signal_side().filter(|_| !forget);
    let (signal_on, signal_off) = if signal.is_some() {
        (m0 - profile.signal_lead_s, m1 + profile.signal_lag_s)
    } else {
        (f64::NAN, f64::NAN)
    };

    let lat0: f64 = 37.0 + rng.random_range(-0.5..0.5);
    let lon0: f64 = -122.0 + rng.random_range(-0.5..0.5);
    let lat0_cos = lat0.to_radians().cos();

    let mut records = TripRecords::new(vehicle_id, trip_id);
    let noise_draw = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
        Normal::new(0.0, std)
            .expect("noise std validated")
            .sample(rng)
    };

    // 4 Hz channels: every internal step.
    for i in 0..n {
        let t = i as f64 * DT;
        let v = (trace.steering_deg[i] + noise_draw(rng, noise.steering_deg)).clamp(-600.0, 600.0);
        records.push(Channel::SteeringWheelAngle, t, v);
    }
    for i in 0..n {
        let t = i as f64 * DT;
        let v = wrap_heading(trace.heading_deg[i] + noise_draw(rng, noise.heading_deg));
        records.push(Channel::Heading, t, v);
    }
    // 2 Hz channels.
    for i in (0..n).step_by(STEPS_PER_S / 2) {
        let t = i as f64 * DT;
        let v = (trace.speed_mps[i] * 3.6 + noise_draw(rng, noise.speed_kph)).max(0.0);
        records.push(Channel::VehicleSpeed, t, v);
    }
    for i in (0..n).step_by(STEPS_PER_S / 2) {
        let t = i as f64 * DT;
        let v = (trace.pedal_pct[i] + noise_draw(rng, noise.pedal_pct)).clamp(0.0, 100.0);
        records.push(Channel::AccelPedalPos, t, v);
    }
    // 1 Hz channels.
    for i in (0..n).step_by(STEPS_PER_S) {
        let t = i as f64 * DT;
        let north = trace.north_m[i] + noise_draw(rng, noise.gps_m);
        records.push(Channel::GpsLat, t, lat0 + north / METERS_PER_DEG_LAT);
    }
    for i in (0..n).step_by(STEPS_PER_S) {
        let t = i as f64 * DT;
        let east = trace.east_m[i] + noise_draw(rng, noise.gps_m);
        records.push(
            Channel::GpsLon,
            t,
            lon0 + east / (METERS_PER_DEG_LAT * lat0_cos),
        );
    }
    for i in (0..n).step_by(STEPS_PER_S) {
        let t = i as f64 * DT;
        records.push(Channel::BrakeStatus, t, trace.brake[i]);
    }
    for i in (0..n).step_by(STEPS_PER_S) {
        let t = i as f64 * DT;
        let value = match signal {
            Some(side) if t >= signal_on && t < signal_off => side.class_index() as f64,
            _ => 0.0,
        };
        records.push(Channel::TurnSignal, t, value);
    }
    debug_assert!(records.channel(Channel::TurnSignal).last().unwrap().0 <= total_s);

    let meta = TripMeta {
        trip_id: trip_id.to_string(),
        maneuver,
        forget,
        maneuver_start_s: (maneuver != Maneuver::Straight).then_some(m0),
        maneuver_end_s: (maneuver != Maneuver::Straight).then_some(m1),
        signal_on_s: signal.map(|_| signal_on),
        signal_off_s: signal.map(|_| signal_off),
    };
    (records, meta)
}

/// Independently drops each non-endpoint sample with probability
/// `drop_prob`, keeping every channel's first and last sample.
pub fn inject_missing_samples(
    records: &TripRecords,
    drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> TripRecords {
    assert!(
        (0.0..=0.5).contains(&drop_prob),
        "drop_prob must lie in [0, 0.5]"
    );
    let mut out = TripRecords::new(records.vehicle_id.clone(), records.trip_id.clone());
    for channel in Channel::ALL {
        let samples = records.channel(channel);
        for (idx, &(t, v)) in samples.iter().enumerate() {
            let endpoint = idx == 0 || idx + 1 == samples.len();
            if endpoint || rng.random::<f64>() >= drop_prob {
                out.push(channel, t, v);
            }
        }
    }
    out
}

fn write_trip_csv<W: Write>(writer: &mut W, records: &TripRecords) -> std::io::Result<()> {
    for channel in Channel::ALL {
        for &(t, v) in records.channel(channel) {
            writeln!(
                writer,
                "{},{},{t},{channel},{v}",
                records.vehicle_id, records.trip_id
            )?;
        }
    }
    Ok(())
}

/// Generates the whole fleet under `out_dir`: one CSV log per vehicle
/// (`veh-XXX.csv`) plus a `fleet.json` manifest. Returns the manifest.
pub fn generate_fleet(spec: &ScenarioSpec, out_dir: &Path) -> Result<FleetManifest, SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut vehicles = Vec::with_capacity(spec.n_vehicles);
    for v_idx in 0..spec.n_vehicles {
        let vehicle_id = format!("veh-{v_idx:03}");
        let mut profile_rng = streams::stream_rng(spec.seed, "synth/profile", v_idx as u64, 0);
        let profile = DriverProfile::sample(&mut profile_rng, &spec.maneuver_mix);
        let vehicle_mix = profile.maneuver_mix();
        let log_file = format!("{vehicle_id}.csv");
        let file = std::fs::File::create(out_dir.join(&log_file))?;
        let mut writer = std::io::BufWriter::new(file);
        writeln!(writer, "vehicle_id,trip_id,timestamp,channel,value")?;
        let mut trips = Vec::with_capacity(spec.trips_per_vehicle);
        for t_idx in 0..spec.trips_per_vehicle {
            let trip_id = format!("trip-{t_idx:03}");
            let mut rng = streams::stream_rng(spec.seed, "synth/trip", v_idx as u64, t_idx as u64);
            let maneuver = vehicle_mix.sample(&mut rng);
            let forget =
                maneuver.signal_side().is_some() && rng.random::<f64>() < spec.forget_signal_prob;
            let (records, meta) = generate_trip(
                &profile,
                maneuver,
                forget,
                &spec.sensor_noise_std,
                &vehicle_id,
                &trip_id,
                &mut rng,
            );
            let mut drop_rng =
                streams::stream_rng(spec.seed, "synth/drop", v_idx as u64, t_idx as u64);
            let records = inject_missing_samples(&records, spec.drop_prob, &mut drop_rng);
            write_trip_csv(&mut writer, &records)?;
            trips.push(meta);
        }
        writer.flush()?;
        vehicles.push(VehicleRecord {
            vehicle_id,
            log_file,
            profile,
            trips,
        });
    }
    let manifest = FleetManifest {
        spec: spec.clone(),
        vehicles,
    };
    manifest.save(&out_dir.join("fleet.json"))?;
    Ok(manifest)
}

/// Path of the manifest inside a fleet directory.
pub fn manifest_path(fleet_dir: &Path) -> PathBuf {
    fleet_dir.join("fleet.json")
}
