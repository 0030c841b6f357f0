//! Raw signal-log ingestion: parses per-channel CSV logs, validates
//! timestamp continuity, resamples every trip onto a uniform 1 Hz grid
//! (linear interpolation for continuous channels, last-known-value for
//! categorical ones), and extracts off-on-off turn events with a fixed
//! 40 s lookback and 10 s trailing context.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

/// Seconds of context kept before each turn signal activation.
pub const LOOKBACK_S: usize = 40;
/// Seconds of context kept after each turn signal deactivation.
pub const TRAILING_S: usize = 10;
/// Largest tolerated spacing (inclusive) between consecutive raw samples
/// of one channel.
pub const MAX_GAP_S: f64 = 5.0;

/// The recorded vehicle signal channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    SteeringWheelAngle,
    VehicleSpeed,
    AccelPedalPos,
    BrakeStatus,
    Heading,
    GpsLat,
    GpsLon,
    TurnSignal,
}

impl Channel {
    pub const ALL: [Channel; 8] = [
        Channel::SteeringWheelAngle,
        Channel::VehicleSpeed,
        Channel::AccelPedalPos,
        Channel::BrakeStatus,
        Channel::Heading,
        Channel::GpsLat,
        Channel::GpsLon,
        Channel::TurnSignal,
    ];

    /// The column value naming this channel in log files.
    pub fn name(self) -> &'static str {
        match self {
            Channel::SteeringWheelAngle => "steering_wheel_angle",
            Channel::VehicleSpeed => "vehicle_speed",
            Channel::AccelPedalPos => "accel_pedal_pos",
            Channel::BrakeStatus => "brake_status",
            Channel::Heading => "heading",
            Channel::GpsLat => "gps_lat",
            Channel::GpsLon => "gps_lon",
            Channel::TurnSignal => "turn_signal",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Categorical channels hold their last known value between samples
    /// instead of being interpolated.
    pub fn is_categorical(self) -> bool {
        matches!(self, Channel::BrakeStatus | Channel::TurnSignal)
    }

    fn index(self) -> usize {
        Channel::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Turn-signal state, which doubles as the per-step class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TurnLabel {
    Off = 0,
    Left = 1,
    Right = 2,
}

impl TurnLabel {
    pub fn from_value(value: f64) -> Option<TurnLabel> {
        if value == 0.0 {
            Some(TurnLabel::Off)
        } else if value == 1.0 {
            Some(TurnLabel::Left)
        } else if value == 2.0 {
            Some(TurnLabel::Right)
        } else {
            None
        }
    }

    /// Class index used by the classifier (Off=0, Left=1, Right=2).
    pub fn class_index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read log file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed row ({reason})")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: unknown channel '{name}'")]
    UnknownChannel { line: u64, name: String },
    #[error("trip {vehicle_id}/{trip_id} channel {channel}: timestamp {next} follows {prev}")]
    NonMonotonicTimestamps {
        vehicle_id: String,
        trip_id: String,
        channel: Channel,
        prev: f64,
        next: f64,
    },
    #[error(
        "trip {vehicle_id}/{trip_id}: channel {channel} is missing or has fewer than 2 samples"
    )]
    ChannelMissing {
        vehicle_id: String,
        trip_id: String,
        channel: Channel,
    },
    #[error("trip {vehicle_id}/{trip_id}: usable span of {span_s:.3} s is too short to resample")]
    SpanTooShort {
        vehicle_id: String,
        trip_id: String,
        span_s: f64,
    },
    #[error(
        "trip {vehicle_id}/{trip_id} channel {channel}: {length_s:.3} s gap starting at t={start_s:.3} exceeds the {max_gap_s} s limit"
    )]
    GapTooLarge {
        vehicle_id: String,
        trip_id: String,
        channel: Channel,
        start_s: f64,
        length_s: f64,
        max_gap_s: f64,
    },
}

/// All raw samples of one trip, separated by channel and ordered by
/// timestamp within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecords {
    pub vehicle_id: String,
    pub trip_id: String,
    /// (timestamp, value) samples per channel, indexed like [`Channel::ALL`].
    pub samples: [Vec<(f64, f64)>; 8],
}

impl TripRecords {
    pub fn new(vehicle_id: impl Into<String>, trip_id: impl Into<String>) -> Self {
        Self {
            vehicle_id: vehicle_id.into(),
            trip_id: trip_id.into(),
            samples: Default::default(),
        }
    }

    pub fn channel(&self, c: Channel) -> &[(f64, f64)] {
        &self.samples[c.index()]
    }

    pub fn push(&mut self, c: Channel, timestamp: f64, value: f64) {
        self.samples[c.index()].push((timestamp, value));
    }
}

fn validate_value(channel: Channel, value: f64) -> Result<(), String> {
    if !value.is_finite() {
        return Err(format!("non-finite value for {channel}"));
    }
    match channel {
        Channel::TurnSignal if TurnLabel::from_value(value).is_none() => {
            Err(format!("turn_signal value {value} is not 0, 1, or 2"))
        }
        Channel::BrakeStatus if value != 0.0 && value != 1.0 => {
            Err(format!("brake_status value {value} is not 0 or 1"))
        }
        Channel::Heading if !(0.0..360.0).contains(&value) => {
            Err(format!("heading {value} outside [0, 360)"))
        }
        _ => Ok(()),
    }
}

/// Reads a raw log CSV (columns `vehicle_id,trip_id,timestamp,channel,value`)
/// and groups its rows into per-trip channel streams, sorted by
/// (vehicle_id, trip_id). Channels outside `schema` are rejected, as are
/// negative or decreasing timestamps within one channel of one trip.
pub fn parse_trip_log(path: &Path, schema: &[Channel]) -> Result<Vec<TripRecords>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => IngestError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                e.to_string(),
            )),
            _ => IngestError::MalformedRow {
                line: 1,
                reason: e.to_string(),
            },
        })?;
    let mut trips: BTreeMap<(String, String), TripRecords> = BTreeMap::new();
    for row in reader.records() {
        let record = row.map_err(|e| IngestError::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 5 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let vehicle_id = record[0].to_string();
        let trip_id = record[1].to_string();
        let timestamp: f64 = record[2].parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("unparseable timestamp '{}'", &record[2]),
        })?;
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(IngestError::MalformedRow {
                line,
                reason: format!("timestamp {timestamp} is not a non-negative finite number"),
            });
        }
        let channel =
            Channel::from_name(&record[3]).ok_or_else(|| IngestError::UnknownChannel {
                line,
                name: record[3].to_string(),
            })?;
        if !schema.contains(&channel) {
            return Err(IngestError::UnknownChannel {
                line,
                name: record[3].to_string(),
            });
        }
        let value: f64 = record[4].parse().map_err(|_| IngestError::MalformedRow {
            line,
            reason: format!("unparseable value '{}'", &record[4]),
        })?;
        validate_value(channel, value)
            .map_err(|reason| IngestError::MalformedRow { line, reason })?;
        let trip = trips
            .entry((vehicle_id.clone(), trip_id.clone()))
            .or_insert_with(|| TripRecords::new(vehicle_id, trip_id));
        if let Some(&(prev, _)) = trip.channel(channel).last() {
            if timestamp < prev {
                return Err(IngestError::NonMonotonicTimestamps {
                    vehicle_id: trip.vehicle_id.clone(),
                    trip_id: trip.trip_id.clone(),
                    channel,
                    prev,
                    next: timestamp,
                });
            }
        }
        trip.push(channel, timestamp, value);
    }
    Ok(trips.into_values().collect())
}

/// Checks that no channel in `schema` goes silent for more than
/// `max_gap_s` seconds (inclusive bound) between consecutive raw samples.
pub fn validate_continuity(
    records: &TripRecords,
    schema: &[Channel],
    max_gap_s: f64,
) -> Result<(), IngestError> {
    for &channel in schema {
        let samples = records.channel(channel);
        for pair in samples.windows(2) {
            let gap = pair[1].0 - pair[0].0;
            if gap > max_gap_s {
                return Err(IngestError::GapTooLarge {
                    vehicle_id: records.vehicle_id.clone(),
                    trip_id: records.trip_id.clone(),
                    channel,
                    start_s: pair[0].0,
                    length_s: gap,
                    max_gap_s,
                });
            }
        }
    }
    Ok(())
}

/// One trip aligned to an implicit 1 Hz grid (step k is second k of the
/// trip); every array has length `duration_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformTrip {
    pub vehicle_id: String,
    pub trip_id: String,
    pub duration_s: usize,
    pub steering_wheel_angle: Vec<f64>,
    pub vehicle_speed: Vec<f64>,
    pub accel_pedal_pos: Vec<f64>,
    pub brake_status: Vec<f64>,
    /// Raw compass heading in degrees, still in [0, 360).
    pub heading: Vec<f64>,
    pub gps_lat: Vec<f64>,
    pub gps_lon: Vec<f64>,
    pub labels: Vec<TurnLabel>,
}

/// Linear interpolation of one continuous channel onto integer grid
/// points `t0..=t1`. Samples that land exactly on a grid point pass
/// through bitwise unchanged.
fn interpolate_continuous(samples: &[(f64, f64)], t0: i64, t1: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity((t1 - t0 + 1) as usize);
    let mut i = 0;
    for t in t0..=t1 {
        let t = t as f64;
        while i + 1 < samples.len() && samples[i + 1].0 <= t {
            i += 1;
        }
        let (ta, va) = samples[i];
        if ta == t || i + 1 == samples.len() {
            out.push(va);
        } else {
            let (tb, vb) = samples[i + 1];
            let w = (t - ta) / (tb - ta);
            out.push(va * (1.0 - w) + vb * w);
        }
    }
    out
}

/// Heading interpolation on the circle: each raw sample is lifted by a
/// whole number of turns so consecutive samples differ by less than
/// 180°, interpolated linearly, and wrapped back to [0, 360). Samples on
/// grid points pass through bitwise unchanged, keeping resampling
/// idempotent.
fn interpolate_heading(samples: &[(f64, f64)], t0: i64, t1: i64) -> Vec<f64> {
    let mut turns = vec![0i64; samples.len()];
    for k in 1..samples.len() {
        let diff = samples[k].1 - samples[k - 1].1;
        turns[k] = turns[k - 1]
            + if diff > 180.0 {
                -1
            } else {
                i64::from(diff < -180.0)
            };
    }
    let mut out = Vec::with_capacity((t1 - t0 + 1) as usize);
    let mut i = 0;
    for t in t0..=t1 {
        let t = t as f64;
        while i + 1 < samples.len() && samples[i + 1].0 <= t {
            i += 1;
        }
        let (ta, va) = samples[i];
        if ta == t || i + 1 == samples.len() {
            out.push(va);
        } else {
            let (tb, vb) = samples[i + 1];
            let lifted_a = va + 360.0 * turns[i] as f64;
            let lifted_b = vb + 360.0 * turns[i + 1] as f64;
            let w = (t - ta) / (tb - ta);
            out.push((lifted_a * (1.0 - w) + lifted_b * w).rem_euclid(360.0));
        }
    }
    out
}

/// Last-known-value sampling of a categorical channel; grid points
/// before the first sample take the first sample's value.
fn sample_categorical(samples: &[(f64, f64)], t0: i64, t1: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity((t1 - t0 + 1) as usize);
    let mut i = 0;
    let mut current = samples[0].1;
    for t in t0..=t1 {
        let t = t as f64;
        while i < samples.len() && samples[i].0 <= t {
            current = samples[i].1;
            i += 1;
        }
        out.push(current);
    }
    out
}

/// Aligns one trip's raw channel streams onto a shared 1 Hz grid. The
/// grid spans the integer seconds covered by every continuous channel;
/// categorical channels extend to the grid edges by their first/last
/// known value.
pub fn resample_to_1hz(records: &TripRecords) -> Result<UniformTrip, IngestError> {
    for channel in Channel::ALL {
        if records.channel(channel).len() < 2 {
            return Err(IngestError::ChannelMissing {
                vehicle_id: records.vehicle_id.clone(),
                trip_id: records.trip_id.clone(),
                channel,
            });
        }
    }
    let continuous = Channel::ALL.into_iter().filter(|c| !c.is_categorical());
    let mut first_common = f64::NEG_INFINITY;
    let mut last_common = f64::INFINITY;
    for channel in continuous {
        let samples = records.channel(channel);
        first_common = first_common.max(samples.first().unwrap().0);
        last_common = last_common.min(samples.last().unwrap().0);
    }
    let t0 = first_common.ceil() as i64;
    let t1 = last_common.floor() as i64;
    if last_common - first_common < 2.0 || t1 - t0 < 1 {
        return Err(IngestError::SpanTooShort {
            vehicle_id: records.vehicle_id.clone(),
            trip_id: records.trip_id.clone(),
            span_s: (last_common - first_common).max(0.0),
        });
    }
    let duration_s = (t1 - t0 + 1) as usize;
    let labels = sample_categorical(records.channel(Channel::TurnSignal), t0, t1)
        .into_iter()
        .map(|v| TurnLabel::from_value(v).expect("turn_signal values validated at parse"))
        .collect();
    let trip = UniformTrip {
        vehicle_id: records.vehicle_id.clone(),
        trip_id: records.trip_id.clone(),
        duration_s,
        steering_wheel_angle: interpolate_continuous(
            records.channel(Channel::SteeringWheelAngle),
            t0,
            t1,
        ),
        vehicle_speed: interpolate_continuous(records.channel(Channel::VehicleSpeed), t0, t1),
        accel_pedal_pos: interpolate_continuous(records.channel(Channel::AccelPedalPos), t0, t1),
        brake_status: sample_categorical(records.channel(Channel::BrakeStatus), t0, t1),
        heading: interpolate_heading(records.channel(Channel::Heading), t0, t1),
        gps_lat: interpolate_continuous(records.channel(Channel::GpsLat), t0, t1),
        gps_lon: interpolate_continuous(records.channel(Channel::GpsLon), t0, t1),
        labels,
    };
    debug_assert!(trip.steering_wheel_angle.len() == duration_s);
    debug_assert!(trip.labels.len() == duration_s);
    Ok(trip)
}

/// One extracted off-on-off turn event. Indices address the owning
/// trip's 1 Hz grid; the slice spans `[slice_start, slice_end]`
/// inclusive with exactly 40 steps before the activation and 10 after
/// the deactivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TurnEvent {
    /// First step of the contiguous non-Off run.
    pub on_start_idx: usize,
    /// Last step (inclusive) of the contiguous non-Off run.
    pub on_end_idx: usize,
}

impl TurnEvent {
    pub fn slice_start(&self) -> usize {
        self.on_start_idx - LOOKBACK_S
    }

    /// Inclusive end of the event slice.
    pub fn slice_end(&self) -> usize {
        self.on_end_idx + TRAILING_S
    }

    pub fn slice_len(&self) -> usize {
        self.slice_end() - self.slice_start() + 1
    }
}

/// Result of scanning one trip for turn events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    /// Qualifying events in temporal order.
    pub events: Vec<TurnEvent>,
    /// Candidate on-runs dropped for lacking 40 s of Off context before
    /// or 10 s after.
    pub dropped: usize,
}

/// Finds every maximal contiguous non-Off run whose 40 preceding and 10
/// following steps all exist and are labeled Off. Runs without that full
/// Off context are counted as dropped.
pub fn segment_turn_events(trip: &UniformTrip) -> Segmentation {
    let labels = &trip.labels;
    let mut events = Vec::new();
    let mut dropped = 0;
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == TurnLabel::Off {
            i += 1;
            continue;
        }
        let on_start = i;
        while i < labels.len() && labels[i] != TurnLabel::Off {
            i += 1;
        }
        let on_end = i - 1;
        let lookback_ok = on_start >= LOOKBACK_S
            && labels[on_start - LOOKBACK_S..on_start]
                .iter()
                .all(|&l| l == TurnLabel::Off);
        let trailing_ok = on_end + TRAILING_S < labels.len()
            && labels[on_end + 1..=on_end + TRAILING_S]
                .iter()
                .all(|&l| l == TurnLabel::Off);
        if lookback_ok && trailing_ok {
            events.push(TurnEvent {
                on_start_idx: on_start,
                on_end_idx: on_end,
            });
        } else {
            dropped += 1;
        }
    }
    Segmentation { events, dropped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_log(rows: &[(&str, &str, f64, Channel, f64)]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "vehicle_id,trip_id,timestamp,channel,value").unwrap();
        for (vehicle, trip, ts, channel, value) in rows {
            writeln!(file, "{vehicle},{trip},{ts},{channel},{value}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn parse_groups_rows_into_trips() {
        let file = write_log(&[
            ("v1", "t1", 0.0, Channel::VehicleSpeed, 42.0),
            ("v1", "t1", 1.0, Channel::VehicleSpeed, 43.5),
            ("v1", "t2", 0.5, Channel::Heading, 359.9),
            ("v2", "t1", 0.0, Channel::TurnSignal, 1.0),
        ]);
        let trips = parse_trip_log(file.path(), &Channel::ALL).unwrap();
        assert_eq!(trips.len(), 3);
        assert_eq!(trips[0].vehicle_id, "v1");
        assert_eq!(trips[0].trip_id, "t1");
        assert_eq!(
            trips[0].channel(Channel::VehicleSpeed),
            &[(0.0, 42.0), (1.0, 43.5)]
        );
        assert_eq!(trips[1].trip_id, "t2");
        assert_eq!(trips[2].vehicle_id, "v2");
    }

    #[test]
    fn parse_rejects_unparseable_timestamp() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "vehicle_id,trip_id,timestamp,channel,value").unwrap();
        writeln!(file, "v1,t1,abc,vehicle_speed,10.0").unwrap();
        file.flush().unwrap();
        let err = parse_trip_log(file.path(), &Channel::ALL).unwrap_err();
        assert!(
            matches!(err, IngestError::MalformedRow { line: 2, .. }),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn parse_rejects_decreasing_timestamps() {
        let file = write_log(&[
            ("v1", "t1", 5.0, Channel::VehicleSpeed, 1.0),
            ("v1", "t1", 3.0, Channel::VehicleSpeed, 2.0),
        ]);
        let err = parse_trip_log(file.path(), &Channel::ALL).unwrap_err();
        assert!(
            matches!(
                err,
                IngestError::NonMonotonicTimestamps {
                    channel: Channel::VehicleSpeed,
                    ..
                }
            ),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn parse_rejects_unknown_channel() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "vehicle_id,trip_id,timestamp,channel,value").unwrap();
        writeln!(file, "v1,t1,0.0,tyre_pressure,2.4").unwrap();
        file.flush().unwrap();
        let err = parse_trip_log(file.path(), &Channel::ALL).unwrap_err();
        assert!(matches!(err, IngestError::UnknownChannel { line: 2, .. }));
    }

    #[test]
    fn parse_rejects_out_of_range_values() {
        for (channel, value) in [
            (Channel::TurnSignal, 3.0),
            (Channel::BrakeStatus, 0.5),
            (Channel::Heading, 360.0),
        ] {
            let file = write_log(&[("v1", "t1", 0.0, channel, value)]);
            let err = parse_trip_log(file.path(), &Channel::ALL).unwrap_err();
            assert!(
                matches!(err, IngestError::MalformedRow { .. }),
                "{channel} value {value} must be rejected, got {err}"
            );
        }
    }

    /// Builds a trip whose channels all carry the given samples, with
    /// constant zeros on the categorical channels.
    fn trip_with_continuous(samples: &[(f64, f64)]) -> TripRecords {
        let mut records = TripRecords::new("v", "t");
        let span_end = samples.last().unwrap().0;
        for channel in Channel::ALL {
            if channel.is_categorical() {
                records.push(channel, samples[0].0, 0.0);
                records.push(channel, span_end, 0.0);
            } else if channel == Channel::Heading {
                for &(t, _) in samples {
                    records.push(channel, t, 10.0);
                }
            } else {
                for &(t, v) in samples {
                    records.push(channel, t, v);
                }
            }
        }
        records
    }

    #[test]
    fn resample_keeps_on_grid_samples_bitwise() {
        let samples: Vec<(f64, f64)> = (0..10).map(|t| (t as f64, 3.7 * t as f64 + 0.1)).collect();
        let trip = resample_to_1hz(&trip_with_continuous(&samples)).unwrap();
        assert_eq!(trip.duration_s, 10);
        for (t, &(_, v)) in samples.iter().enumerate() {
            assert_eq!(trip.vehicle_speed[t], v);
        }
    }

    #[test]
    fn resample_linear_midpoint() {
        let trip = resample_to_1hz(&trip_with_continuous(&[
            (0.0, 0.0),
            (2.0, 10.0),
            (4.0, 10.0),
        ]))
        .unwrap();
        assert_relative_eq!(trip.vehicle_speed[1], 5.0);
    }

    #[test]
    fn resample_holds_last_known_categorical_value() {
        let mut records = trip_with_continuous(&[(0.0, 1.0), (9.0, 1.0)]);
        records.samples[Channel::TurnSignal.index()] =
            vec![(0.0, 0.0), (3.0, 1.0), (6.0, 0.0), (9.0, 0.0)];
        let trip = resample_to_1hz(&records).unwrap();
        let expected =
            [0, 0, 0, 1, 1, 1, 0, 0, 0, 0].map(|v| TurnLabel::from_value(v as f64).unwrap());
        assert_eq!(trip.labels, expected);
    }

    #[test]
    fn resample_backfills_categorical_before_first_sample() {
        let mut records = trip_with_continuous(&[(0.0, 1.0), (9.0, 1.0)]);
        records.samples[Channel::TurnSignal.index()] = vec![(2.0, 1.0), (5.0, 0.0), (9.0, 0.0)];
        let trip = resample_to_1hz(&records).unwrap();
        assert_eq!(trip.labels[0], TurnLabel::Left);
        assert_eq!(trip.labels[1], TurnLabel::Left);
        assert_eq!(trip.labels[5], TurnLabel::Off);
    }

    #[test]
    fn resample_grid_starts_at_latest_continuous_channel() {
        let mut records = trip_with_continuous(&[(0.0, 1.0), (10.0, 1.0)]);
        // Speed data only exists from t=2.5 on, so the grid must too.
        records.samples[Channel::VehicleSpeed.index()] = vec![(2.5, 7.0), (10.0, 7.0)];
        let trip = resample_to_1hz(&records).unwrap();
        assert_eq!(trip.duration_s, 8); // grid points 3..=10
        assert_eq!(trip.vehicle_speed[0], 7.0);
    }

    #[test]
    fn resample_heading_crosses_the_wraparound() {
        let mut records = trip_with_continuous(&[(0.0, 1.0), (4.0, 1.0)]);
        records.samples[Channel::Heading.index()] = vec![(0.0, 359.0), (2.0, 1.0), (4.0, 1.0)];
        let trip = resample_to_1hz(&records).unwrap();
        assert_relative_eq!(trip.heading[1], 0.0, epsilon = 1e-9);
        assert!((0.0..360.0).contains(&trip.heading[1]));
    }

    #[test]
    fn resample_missing_channel_is_rejected() {
        let mut records = trip_with_continuous(&[(0.0, 1.0), (9.0, 1.0)]);
        records.samples[Channel::GpsLon.index()].clear();
        let err = resample_to_1hz(&records).unwrap_err();
        assert!(matches!(
            err,
            IngestError::ChannelMissing {
                channel: Channel::GpsLon,
                ..
            }
        ));
    }

    #[test]
    fn resample_short_span_is_rejected() {
        let records = trip_with_continuous(&[(0.0, 1.0), (1.5, 2.0)]);
        let err = resample_to_1hz(&records).unwrap_err();
        assert!(matches!(err, IngestError::SpanTooShort { .. }));
    }

    #[test]
    fn continuity_accepts_dense_sampling_and_exact_bound() {
        let mut records = TripRecords::new("v", "t");
        for k in 0..20 {
            records.push(Channel::VehicleSpeed, k as f64 * 0.5, 1.0);
        }
        records.push(Channel::Heading, 0.0, 10.0);
        records.push(Channel::Heading, MAX_GAP_S, 10.0);
        let schema = [Channel::VehicleSpeed, Channel::Heading];
        assert!(validate_continuity(&records, &schema, MAX_GAP_S).is_ok());
    }

    #[test]
    fn continuity_rejects_silent_stretch() {
        let mut records = TripRecords::new("v", "t");
        records.push(Channel::VehicleSpeed, 0.0, 1.0);
        records.push(Channel::VehicleSpeed, 30.0, 1.0);
        let err = validate_continuity(&records, &[Channel::VehicleSpeed], MAX_GAP_S).unwrap_err();
        match err {
            IngestError::GapTooLarge {
                channel,
                start_s,
                length_s,
                ..
            } => {
                assert_eq!(channel, Channel::VehicleSpeed);
                assert_eq!(start_s, 0.0);
                assert_eq!(length_s, 30.0);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    fn trip_from_labels(labels: &[TurnLabel]) -> UniformTrip {
        let n = labels.len();
        UniformTrip {
            vehicle_id: "v".into(),
            trip_id: "t".into(),
            duration_s: n,
            steering_wheel_angle: vec![0.0; n],
            vehicle_speed: vec![0.0; n],
            accel_pedal_pos: vec![0.0; n],
            brake_status: vec![0.0; n],
            heading: vec![0.0; n],
            gps_lat: vec![0.0; n],
            gps_lon: vec![0.0; n],
            labels: labels.to_vec(),
        }
    }

    fn labels(spec: &[(TurnLabel, usize)]) -> Vec<TurnLabel> {
        spec.iter()
            .flat_map(|&(label, count)| std::iter::repeat_n(label, count))
            .collect()
    }

    #[test]
    fn segmentation_extracts_padded_event() {
        let trip = trip_from_labels(&labels(&[
            (TurnLabel::Off, 60),
            (TurnLabel::Left, 20),
            (TurnLabel::Off, 30),
        ]));
        let seg = segment_turn_events(&trip);
        assert_eq!(seg.dropped, 0);
        assert_eq!(
            seg.events,
            vec![TurnEvent {
                on_start_idx: 60,
                on_end_idx: 79,
            }]
        );
        assert_eq!(seg.events[0].slice_start(), 20);
        assert_eq!(seg.events[0].slice_end(), 89);
        assert_eq!(seg.events[0].slice_len(), 70);
    }

    #[test]
    fn segmentation_of_all_off_trip_is_empty() {
        let trip = trip_from_labels(&labels(&[(TurnLabel::Off, 120)]));
        let seg = segment_turn_events(&trip);
        assert!(seg.events.is_empty());
        assert_eq!(seg.dropped, 0);
    }

    #[test]
    fn segmentation_drops_event_with_short_lookback() {
        let trip = trip_from_labels(&labels(&[
            (TurnLabel::Off, 10),
            (TurnLabel::Right, 5),
            (TurnLabel::Off, 50),
        ]));
        let seg = segment_turn_events(&trip);
        assert!(seg.events.is_empty());
        assert_eq!(seg.dropped, 1);
    }

    #[test]
    fn segmentation_drops_event_with_short_trailing() {
        let trip = trip_from_labels(&labels(&[
            (TurnLabel::Off, 40),
            (TurnLabel::Right, 5),
            (TurnLabel::Off, 9),
        ]));
        let seg = segment_turn_events(&trip);
        assert!(seg.events.is_empty());
        assert_eq!(seg.dropped, 1);
    }

    #[test]
    fn segmentation_keeps_adjacent_events_with_shared_padding() {
        // Two runs separated by 45 Off steps: both qualify, and their
        // padding regions overlap without conflict.
        let trip = trip_from_labels(&labels(&[
            (TurnLabel::Off, 40),
            (TurnLabel::Left, 8),
            (TurnLabel::Off, 45),
            (TurnLabel::Right, 6),
            (TurnLabel::Off, 10),
        ]));
        let seg = segment_turn_events(&trip);
        assert_eq!(seg.dropped, 0);
        assert_eq!(
            seg.events,
            vec![
                TurnEvent {
                    on_start_idx: 40,
                    on_end_idx: 47,
                },
                TurnEvent {
                    on_start_idx: 93,
                    on_end_idx: 98,
                },
            ]
        );
    }

    /// Brute-force reference: every maximal non-Off run with full Off
    /// padding on both sides.
    fn brute_force_events(labels: &[TurnLabel]) -> (Vec<TurnEvent>, usize) {
        let mut events = Vec::new();
        let mut dropped = 0;
        for start in 0..labels.len() {
            if labels[start] == TurnLabel::Off || (start > 0 && labels[start - 1] != TurnLabel::Off)
            {
                continue;
            }
            let mut end = start;
            while end + 1 < labels.len() && labels[end + 1] != TurnLabel::Off {
                end += 1;
            }
            let ok = start >= LOOKBACK_S
                && end + TRAILING_S < labels.len()
                && labels[start - LOOKBACK_S..start]
                    .iter()
                    .all(|&l| l == TurnLabel::Off)
                && labels[end + 1..=end + TRAILING_S]
                    .iter()
                    .all(|&l| l == TurnLabel::Off);
            if ok {
                events.push(TurnEvent {
                    on_start_idx: start,
                    on_end_idx: end,
                });
            } else {
                dropped += 1;
            }
        }
        (events, dropped)
    }

    proptest! {
        #[test]
        fn segmentation_matches_brute_force(
            runs in proptest::collection::vec((0usize..3, 1usize..60), 1..12)
        ) {
            let spec: Vec<(TurnLabel, usize)> = runs
                .iter()
                .map(|&(class, len)| (TurnLabel::from_value(class as f64).unwrap(), len))
                .collect();
            let trip = trip_from_labels(&labels(&spec));
            let seg = segment_turn_events(&trip);
            let (expected_events, expected_dropped) = brute_force_events(&trip.labels);
            prop_assert_eq!(&seg.events, &expected_events);
            prop_assert_eq!(seg.dropped, expected_dropped);
            // Soundness: every event shows off-on-off with exact padding.
            for event in &seg.events {
                for idx in event.slice_start()..event.on_start_idx {
                    prop_assert_eq!(trip.labels[idx], TurnLabel::Off);
                }
                for idx in event.on_start_idx..=event.on_end_idx {
                    prop_assert_ne!(trip.labels[idx], TurnLabel::Off);
                }
                for idx in event.on_end_idx + 1..=event.slice_end() {
                    prop_assert_eq!(trip.labels[idx], TurnLabel::Off);
                }
            }
        }

        #[test]
        fn interpolation_recovers_affine_channels(
            slope in -5.0f64..5.0,
            intercept in -100.0f64..100.0,
            offsets in proptest::collection::vec(0.01f64..0.99, 3..20)
        ) {
            // Irregular sample times: one sample inside every second.
            let mut records = TripRecords::new("v", "t");
            let n = offsets.len();
            for channel in Channel::ALL {
                match channel {
                    c if c.is_categorical() => {
                        records.push(c, 0.0, 0.0);
                        records.push(c, n as f64, 0.0);
                    }
                    Channel::Heading => {
                        records.push(channel, 0.0, 10.0);
                        records.push(channel, n as f64, 10.0);
                    }
                    _ => {
                        records.push(channel, 0.0, intercept);
                        for (k, &off) in offsets.iter().enumerate() {
                            let t = k as f64 + off;
                            records.push(channel, t, slope * t + intercept);
                        }
                        records.push(channel, n as f64, slope * n as f64 + intercept);
                    }
                }
            }
            let trip = resample_to_1hz(&records).unwrap();
            for (k, &v) in trip.vehicle_speed.iter().enumerate() {
                let expected = slope * k as f64 + intercept;
                prop_assert!((v - expected).abs() < 1e-9, "step {}: {} vs {}", k, v, expected);
            }
        }

        #[test]
        fn resampling_is_idempotent(
            speeds in proptest::collection::vec(0.0f64..140.0, 12..40),
            headings in proptest::collection::vec(0.0f64..360.0, 12..40),
            signal_flips in proptest::collection::vec(0usize..3, 4..10)
        ) {
            let n = speeds_len_min(&speeds, &headings);
            let mut records = TripRecords::new("v", "t");
            for channel in Channel::ALL {
                match channel {
                    Channel::TurnSignal => {
                        for (k, &class) in signal_flips.iter().enumerate() {
                            records.push(channel, (k * 3) as f64, class as f64);
                        }
                        records.push(channel, (n - 1) as f64, 0.0);
                    }
                    Channel::BrakeStatus => {
                        for k in 0..n {
                            records.push(channel, k as f64, (k % 2) as f64);
                        }
                    }
                    Channel::Heading => {
                        for (k, &h) in headings.iter().take(n).enumerate() {
                            records.push(channel, k as f64, h);
                        }
                    }
                    _ => {
                        for (k, &v) in speeds.iter().take(n).enumerate() {
                            records.push(channel, k as f64, v);
                        }
                    }
                }
            }
            let first = resample_to_1hz(&records).unwrap();
            let roundtrip = resample_to_1hz(&serialize_back(&first)).unwrap();
            prop_assert_eq!(first, roundtrip);
        }
    }

    fn speeds_len_min(a: &[f64], b: &[f64]) -> usize {
        a.len().min(b.len())
    }

    /// Re-expresses a uniform trip as raw records sampled exactly on the
    /// 1 Hz grid.
    fn serialize_back(trip: &UniformTrip) -> TripRecords {
        let mut records = TripRecords::new(trip.vehicle_id.clone(), trip.trip_id.clone());
        for k in 0..trip.duration_s {
            let t = k as f64;
            records.push(Channel::SteeringWheelAngle, t, trip.steering_wheel_angle[k]);
            records.push(Channel::VehicleSpeed, t, trip.vehicle_speed[k]);
            records.push(Channel::AccelPedalPos, t, trip.accel_pedal_pos[k]);
            records.push(Channel::BrakeStatus, t, trip.brake_status[k]);
            records.push(Channel::Heading, t, trip.heading[k]);
            records.push(Channel::GpsLat, t, trip.gps_lat[k]);
            records.push(Channel::GpsLon, t, trip.gps_lon[k]);
            records.push(Channel::TurnSignal, t, trip.labels[k].class_index() as f64);
        }
        records
    }
}
