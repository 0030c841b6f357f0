//! Federated-learning simulator for in-vehicle turn-signal prediction.
//!
//! The pipeline, end to end:
//!
//! 1. [`synthgen`] writes a synthetic fleet of raw trip logs (per-channel
//!    CSV signal records) plus a ground-truth manifest.
//! 2. [`signal_ingest`] parses the logs, validates timestamp continuity,
//!    resamples every channel onto a 1 Hz grid, and extracts off-on-off
//!    turn events with fixed lookback/trailing context.
//! 3. [`dataset`] featurizes events, splits them per vehicle at event
//!    level, builds fixed-length windows labeled with the next-step
//!    turn-signal class, and z-scores continuous features.
//! 4. [`nn_core`] is the model: a single-layer LSTM plus dense softmax
//!    head with hand-written exact gradients and an Adam optimizer.
//! 5. [`trainer`] runs centralized training; [`fedavg`] reuses the same
//!    epoch primitive for per-client local training and sample-weighted
//!    parameter averaging.
//! 6. [`evalstats`] computes confusion-matrix metrics, paired t-tests
//!    (native Student-t CDF), and drives hyperparameter grid searches.
//!
//! Everything is deterministic given a seed: random streams are derived
//! per (seed, purpose, index) in [`streams`], aggregation orders are
//! fixed, and artifacts are byte-stable across reruns.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod evalstats;
pub mod fedavg;
pub mod nn_core;
pub mod signal_ingest;
pub mod streams;
pub mod synthgen;
pub mod trainer;
