//! End-to-end tests that drive the compiled `fedsim` binary through the
//! pipeline on small synthetic fleets: artifact contents, exit codes, and
//! byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim::dataset::{
    self, Dataset, FeaturizedEvent, NormalizationStats, Split, SplitFractions, VehicleEvents,
    N_FEATURES,
};
use fedsim::nn_core::{self, flat_len, init_params};
use fedsim::synthgen::FleetManifest;

fn fedsim_cmd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to spawn fedsim")
}

fn assert_success(output: &Output) {
    assert!(
        output.status.success(),
        "fedsim failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// Writes a config for a fleet small enough to train in test time.
fn write_tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.conf");
    // Enough trips that every vehicle clears ten labeled events even when its
    // personal maneuver propensities lean heavily toward straight driving, so
    // the per-vehicle event split always yields nonempty val and test sets.
    let base = "seed = 3\n\
                synth.vehicles = 4\n\
                synth.trips_per_vehicle = 24\n\
                data.fleet_dir = fleet\n\
                data.dataset_dir = prep\n";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

fn synth_and_preprocess(dir: &Path) {
    assert_success(&fedsim_cmd(
        dir,
        &["--config", "tiny.conf", "--out", "fleet", "synth"],
    ));
    assert_success(&fedsim_cmd(
        dir,
        &["--config", "tiny.conf", "--out", "prep", "preprocess"],
    ));
}

#[test]
fn synth_manifest_lists_every_trip_and_creates_missing_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.conf"),
        "synth.vehicles = 3\nsynth.trips_per_vehicle = 4\n",
    )
    .unwrap();
    // `nested/fleet` does not exist yet; the run must create it.
    assert_success(&fedsim_cmd(
        dir.path(),
        &["--config", "tiny.conf", "--out", "nested/fleet", "synth"],
    ));
    let manifest = FleetManifest::load(&dir.path().join("nested/fleet/fleet.json")).unwrap();
    assert_eq!(manifest.vehicles.len(), 3);
    let trips: usize = manifest.vehicles.iter().map(|v| v.trips.len()).sum();
    assert_eq!(trips, 3 * 4);
    for vehicle in &manifest.vehicles {
        assert!(dir
            .path()
            .join("nested/fleet")
            .join(&vehicle.log_file)
            .exists());
    }
    assert!(dir.path().join("nested/fleet/config.txt").exists());
}

#[test]
fn preprocess_manifest_reports_windows_and_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(dir.path(), "");
    synth_and_preprocess(dir.path());

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("prep/manifest.json")).unwrap(),
    )
    .unwrap();
    // The preferred 5-step window is the default and lands in the manifest.
    assert_eq!(manifest["window_steps"], 5);
    assert_eq!(
        manifest["feature_names"].as_array().unwrap().len(),
        N_FEATURES
    );
    let train_windows = manifest["train_windows"].as_u64().unwrap();
    assert!(train_windows > 0);
    assert!(manifest["val_windows"].as_u64().unwrap() > 0);
    assert!(manifest["test_windows"].as_u64().unwrap() > 0);
    let histogram: Vec<u64> = manifest["train_class_histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(histogram.len(), 3);
    assert_eq!(histogram.iter().sum::<u64>(), train_windows);
    assert!(manifest["dropped_events"].is_u64());

    let events_before = std::fs::read(dir.path().join("prep/events.bin")).unwrap();
    let manifest_before = std::fs::read(dir.path().join("prep/manifest.json")).unwrap();
    assert_success(&fedsim_cmd(
        dir.path(),
        &["--config", "tiny.conf", "--out", "prep", "preprocess"],
    ));
    assert_eq!(
        events_before,
        std::fs::read(dir.path().join("prep/events.bin")).unwrap(),
        "events.bin changed across a rerun with identical config"
    );
    assert_eq!(
        manifest_before,
        std::fs::read(dir.path().join("prep/manifest.json")).unwrap(),
        "manifest.json changed across a rerun with identical config"
    );
}

#[test]
fn federated_training_emits_one_report_per_round() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_config(
        dir.path(),
        "fed.rounds = 100\nfed.local_epochs = 1\nmodel.hidden_units = 10\n",
    );
    synth_and_preprocess(dir.path());
    assert_success(&fedsim_cmd(
        dir.path(),
        &["--config", "tiny.conf", "--out", "fed", "train-federated"],
    ));

    let jsonl = std::fs::read_to_string(dir.path().join("fed/rounds.jsonl")).unwrap();
    let lines: Vec<&str> = jsonl.lines().collect();
    assert_eq!(lines.len(), 100);
    for (idx, line) in lines.iter().enumerate() {
        let report: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(report["round"], idx as u64 + 1);
        assert_eq!(report["participants"].as_array().unwrap().len(), 4);
        assert!(report["test_acc_weighted"].as_f64().unwrap() >= 0.0);
        assert!(report["mean_local_loss"].as_f64().unwrap().is_finite());
    }
    let csv = std::fs::read_to_string(dir.path().join("fed/rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101, "header plus one row per round");
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("fed/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["rounds_run"], 100);
    assert!(dir.path().join("fed/model.ckpt").exists());
}

/// An event whose feature rows carry only the one-hot of `class` and
/// whose every step is labeled `class`.
fn constant_class_event(trip_id: &str, class: u8, steps: usize) -> FeaturizedEvent {
    let mut rows = vec![0.0; steps * N_FEATURES];
    for step in 0..steps {
        rows[step * N_FEATURES + 8 + class as usize] = 1.0;
    }
    FeaturizedEvent {
        trip_id: trip_id.to_string(),
        slice_start: 0,
        rows,
        labels: vec![class; steps],
    }
}

/// A model wired by hand to copy the last step's turn-signal one-hot to
/// the output: the input gate and output gate are forced open, the
/// forget gate shut, the cell input reads the one-hot columns, and the
/// readout is a scaled identity.
fn oracle_params() -> nn_core::ModelParams {
    let hidden = 3;
    let features = N_FEATURES;
    let mut flat = vec![0.0; flat_len(hidden, features)];
    let wx_len = 4 * hidden * features;
    let wh_len = 4 * hidden * hidden;
    for j in 0..hidden {
        // Cell-input gate block occupies rows 2H..3H of the stacked input
        // weights; row j reads one-hot column 8 + j.
        flat[(2 * hidden + j) * features + (8 + j)] = 10.0;
        let bias = wx_len + wh_len;
        flat[bias + j] = 20.0; // input gate open
        flat[bias + hidden + j] = -20.0; // forget gate shut
        flat[bias + 3 * hidden + j] = 20.0; // output gate open
                                            // Readout row j amplifies hidden unit j.
        flat[bias + 4 * hidden + j * hidden + j] = 10.0;
    }
    let mut params = init_params(hidden, features, 0);
    params.set_flat(&flat).unwrap();
    params
}

#[test]
fn evaluate_scores_a_perfect_oracle_checkpoint_at_one() {
    let dir = tempfile::tempdir().unwrap();
    // Nine constant-label events on one vehicle, one event per class in
    // each split, so the test split holds every class.
    let mut events = Vec::new();
    let mut splits = Vec::new();
    for class in 0..3u8 {
        for (idx, split) in [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .enumerate()
        {
            events.push(constant_class_event(
                &format!("trip-{class}{idx}"),
                class,
                8,
            ));
            splits.push(split);
        }
    }
    let ds = Dataset {
        vehicles: vec![VehicleEvents {
            vehicle_id: "veh-oracle".to_string(),
            events,
            splits,
        }],
        stats: NormalizationStats {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        },
        fractions: SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        },
        seed: 0,
        excluded: Vec::new(),
    };
    dataset::save(&ds, &dir.path().join("prep"), 5, 0).unwrap();
    nn_core::save_checkpoint(&dir.path().join("oracle.ckpt"), &oracle_params()).unwrap();
    std::fs::write(dir.path().join("eval.conf"), "data.dataset_dir = prep\n").unwrap();

    assert_success(&fedsim_cmd(
        dir.path(),
        &[
            "--config",
            "eval.conf",
            "--out",
            "eval",
            "evaluate",
            "--checkpoint",
            "oracle.ckpt",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("eval/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["split"], "test");
    assert_eq!(report["metrics"]["weighted_accuracy"], 1.0);
    assert_eq!(report["metrics"]["average_f1"], 1.0);
    for k in 0..3 {
        assert_eq!(report["metrics"]["per_class_f1"][k], 1.0);
        assert_eq!(report["metrics"]["per_class_accuracy"][k], 1.0);
    }

    let predictions = std::fs::read_to_string(dir.path().join("eval/predictions.csv")).unwrap();
    let rows: Vec<&str> = predictions.lines().skip(1).collect();
    // Three test events of eight steps each at window five: 3 × (8 − 5).
    assert_eq!(rows.len(), 9);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[3], fields[4], "label and prediction differ in {row}");
    }
}

#[test]
fn ttest_reports_the_pairing_intersection_size() {
    let dir = tempfile::tempdir().unwrap();
    // Central side: three cells at the paired corner (window 5, hidden
    // 50) over keys (64, 1e-3), (64, 1e-4), (128, 1e-3), plus one cell
    // elsewhere in the grid that pairing must ignore.
    std::fs::write(
        dir.path().join("gc.csv"),
        "batch_size,window_steps,hidden_units,learning_rate,weighted_accuracy,f1_off,f1_left,f1_right,average_f1,seed,runtime_seconds\n\
         64,5,50,0.001,0.9,0.9,0.8,0.7,0.8,0,1.0\n\
         64,5,50,0.0001,0.85,0.8,0.7,0.6,0.7,0,1.0\n\
         128,5,50,0.001,0.88,0.85,0.75,0.65,0.75,0,1.0\n\
         64,10,50,0.001,0.99,0.99,0.99,0.99,0.99,0,1.0\n",
    )
    .unwrap();
    // Federated side: keys (64, 1e-3) twice (pairing keeps the better
    // F1), (128, 1e-3), and (64, 1e-5) which the central side lacks.
    std::fs::write(
        dir.path().join("gf.csv"),
        "batch_size,window_steps,hidden_units,learning_rate,clients_per_round,local_epochs,weighted_accuracy,f1_off,f1_left,f1_right,average_f1,seed,runtime_seconds\n\
         64,5,50,0.001,all,5,0.91,0.9,0.85,0.75,0.833,0,1.0\n\
         64,5,50,0.001,10,1,0.89,0.88,0.8,0.7,0.793,0,1.0\n\
         128,5,50,0.001,all,10,0.9,0.9,0.8,0.7,0.8,0,1.0\n\
         64,5,50,0.00001,all,5,0.6,0.6,0.5,0.4,0.5,0,1.0\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("tt.conf"),
        "ttest.central_csv = gc.csv\nttest.federated_csv = gf.csv\n",
    )
    .unwrap();

    assert_success(&fedsim_cmd(
        dir.path(),
        &["--config", "tt.conf", "--out", "tt", "ttest"],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("tt/ttest.json")).unwrap())
            .unwrap();
    // Intersection of (batch, lr) keys at window 5 / hidden 50:
    // (64, 1e-3) and (128, 1e-3).
    assert_eq!(report["n_pairs"], 2);
    let metrics = report["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 2);
    for entry in metrics {
        assert_eq!(entry["n_pairs"], 2);
        assert!(entry["t"].as_f64().unwrap().is_finite());
        let p = entry["p"].as_f64().unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }
    assert_eq!(metrics[0]["metric"], "weighted_accuracy");
    assert_eq!(metrics[1]["metric"], "average_f1");
}

#[test]
fn invalid_maneuver_mix_exits_two_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    // Default weights sum to 1; shrinking left_turn 0.25 → 0.15 leaves 0.9.
    std::fs::write(dir.path().join("bad.conf"), "synth.mix.left_turn = 0.15\n").unwrap();
    let output = fedsim_cmd(dir.path(), &["--config", "bad.conf", "synth"]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = stderr_of(&output);
    assert!(
        stderr.contains("synth.mix"),
        "error should name the offending key, got: {stderr}"
    );
}

#[test]
fn preprocess_of_an_empty_input_dir_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("fleet")).unwrap();
    write_tiny_config(dir.path(), "");
    let output = fedsim_cmd(
        dir.path(),
        &["--config", "tiny.conf", "--out", "prep", "preprocess"],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("fleet"));
}

#[test]
fn unknown_config_key_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "fed.round = 10\n").unwrap();
    let output = fedsim_cmd(dir.path(), &["--config", "bad.conf", "synth"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("fed.round"));
}

#[test]
fn evaluate_without_a_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let output = fedsim_cmd(dir.path(), &["evaluate"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("checkpoint"));
}
