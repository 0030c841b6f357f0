//! Evaluation statistics: confusion matrices and derived classification
//! metrics, a paired Student t-test with a native t-distribution CDF
//! (log-gamma + regularized incomplete beta, no lookup tables), and the
//! hyperparameter grid definitions with a deterministic grid-search
//! executor.

use serde::Serialize;
use thiserror::Error;

use crate::nn_core::{Hyperparams, N_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction and label vectors differ in length ({predictions} vs {labels})")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
}

/// count\[i\]\[j\] = number of samples with true class i predicted as j.
pub type ConfusionMatrix = [[u64; N_CLASSES]; N_CLASSES];

/// Classification quality over one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    /// Per-class accuracy = recall (diagonal over row sum); 0 for an
    /// absent class.
    pub per_class_accuracy: [f64; N_CLASSES],
    /// Support-weighted recall = trace/total (plain accuracy).
    pub weighted_accuracy: f64,
    /// Per-class F1 = 2PR/(P+R); 0 when the class is absent from both
    /// labels and predictions, or when P+R = 0.
    pub per_class_f1: [f64; N_CLASSES],
    /// Unweighted mean of the three class F1 scores.
    pub average_f1: f64,
}

/// Tallies predictions against labels; classes must be in 0..3.
pub fn confusion(predictions: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut cm = [[0u64; N_CLASSES]; N_CLASSES];
    for (&pred, &label) in predictions.iter().zip(labels) {
        assert!(
            pred < N_CLASSES && label < N_CLASSES,
            "class index out of range: prediction {pred}, label {label}"
        );
        cm[label][pred] += 1;
    }
    Ok(cm)
}

/// Derives accuracies and F1 scores from a confusion matrix.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total: u64 = cm.iter().flatten().sum();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut per_class_accuracy = [0.0; N_CLASSES];
    let mut per_class_f1 = [0.0; N_CLASSES];
    let mut trace = 0u64;
    for k in 0..N_CLASSES {
        let row: u64 = cm[k].iter().sum();
        let col: u64 = (0..N_CLASSES).map(|i| cm[i][k]).sum();
        let tp = cm[k][k];
        trace += tp;
        per_class_accuracy[k] = if row > 0 { tp as f64 / row as f64 } else { 0.0 };
        let precision = if col > 0 { tp as f64 / col as f64 } else { 0.0 };
        let recall = per_class_accuracy[k];
        per_class_f1[k] = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    let average_f1 = per_class_f1.iter().sum::<f64>() / N_CLASSES as f64;
    Ok(Metrics {
        confusion: *cm,
        per_class_accuracy,
        weighted_accuracy: trace as f64 / total as f64,
        per_class_f1,
        average_f1,
    })
}

/// Convenience composition of [`confusion`] and [`metrics_from_confusion`].
pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics, EvalError> {
    metrics_from_confusion(&confusion(predictions, labels)?)
}

// ---------------------------------------------------------------------------
// Student t-distribution, computed natively
// ---------------------------------------------------------------------------

/// ln Γ(x) via the Lanczos approximation (g = 5, 6 coefficients);
/// |relative error| < 2e-10 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        1.208_650_973_866_179e-3,
        -5.395_239_384_953e-6,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Continued-fraction kernel for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-30;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b) for a, b > 0 and
/// x ∈ [0, 1]; |error| well under 1e-8 across the t-test range.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(
        a > 0.0 && b > 0.0,
        "inc_beta requires positive shape parameters"
    );
    assert!((0.0..=1.0).contains(&x), "inc_beta requires x in [0,1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fastest for x below the mean;
    // use the symmetry I_x(a,b) = 1 − I_{1−x}(b,a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability of Student's t with `df` degrees of
/// freedom: P(|T| ≥ |t|) = I_{df/(df+t²)}(df/2, 1/2).
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Error, PartialEq)]
pub enum TTestError {
    #[error("paired samples differ in length ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("paired t-test needs at least 2 pairs, got {0}")]
    NTooSmall(usize),
}

/// Result of a paired t-test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value. 1.0 when all differences are zero; 0.0 in the
    /// degenerate case of identical nonzero differences (sd = 0, t
    /// infinite).
    pub p: f64,
}

/// Paired Student t-test on x − y with n−1 degrees of freedom and the
/// sample (n−1) standard deviation.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest, TTestError> {
    if x.len() != y.len() {
        return Err(TTestError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    let n = x.len();
    if n < 2 {
        return Err(TTestError::NTooSmall(n));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTest {
            n,
            mean_diff: 0.0,
            t: 0.0,
            p: 1.0,
        });
    }
    if sd == 0.0 {
        // Identical nonzero differences: the statistic diverges.
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: if mean > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            },
            p: 0.0,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        n,
        mean_diff: mean,
        t,
        p: student_t_two_sided_p(t, (n - 1) as f64),
    })
}

// ---------------------------------------------------------------------------
// Hyperparameter grids
// ---------------------------------------------------------------------------

/// How many clients participate in each federation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientsSpec {
    /// A fixed number of clients sampled per round.
    Count(usize),
    /// Every registered client participates.
    All,
}

impl std::fmt::Display for ClientsSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientsSpec::Count(k) => write!(f, "{k}"),
            ClientsSpec::All => write!(f, "all"),
        }
    }
}

impl std::str::FromStr for ClientsSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ClientsSpec::All);
        }
        s.parse::<usize>()
            .map(ClientsSpec::Count)
            .map_err(|_| format!("expected a client count or 'all', got '{s}'"))
    }
}

/// One federated grid cell: the shared model hyperparameters plus the
/// federation schedule dimensions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederatedCell {
    pub hyper: Hyperparams,
    pub clients_per_round: ClientsSpec,
    pub local_epochs: usize,
}

const GRID_BATCH_CENTRAL: [usize; 3] = [64, 128, 256];
const GRID_BATCH_FEDERATED: [usize; 2] = [64, 128];
const GRID_WINDOW_CENTRAL: [usize; 6] = [5, 10, 15, 20, 30, 40];
const GRID_HIDDEN_CENTRAL: [usize; 3] = [50, 100, 150];
const GRID_LR: [f64; 3] = [1e-3, 1e-4, 1e-5];
const GRID_CLIENTS: [ClientsSpec; 3] = [
    ClientsSpec::Count(10),
    ClientsSpec::Count(25),
    ClientsSpec::All,
];
const GRID_LOCAL_EPOCHS: [usize; 3] = [1, 5, 10];

/// The full centralized search grid: 3 batch sizes × 6 window lengths ×
/// 3 hidden sizes × 3 learning rates = 162 cells, enumerated in that
/// nesting order.
pub fn central_grid() -> Vec<Hyperparams> {
    let mut cells = Vec::new();
    for &batch_size in &GRID_BATCH_CENTRAL {
        for &window_steps in &GRID_WINDOW_CENTRAL {
            for &hidden_units in &GRID_HIDDEN_CENTRAL {
                for &learning_rate in &GRID_LR {
                    cells.push(Hyperparams {
                        batch_size,
                        window_steps,
                        hidden_units,
                        learning_rate,
                    });
                }
            }
        }
    }
    cells
}

/// The full federated search grid: 2 batch sizes × 1 window × 1 hidden ×
/// 3 learning rates × 3 client counts × 3 local-epoch settings =
/// 54 cells, enumerated in that nesting order.
pub fn federated_grid() -> Vec<FederatedCell> {
    let mut cells = Vec::new();
    for &batch_size in &GRID_BATCH_FEDERATED {
        for &learning_rate in &GRID_LR {
            for &clients_per_round in &GRID_CLIENTS {
                for &local_epochs in &GRID_LOCAL_EPOCHS {
                    cells.push(FederatedCell {
                        hyper: Hyperparams {
                            batch_size,
                            window_steps: 5,
                            hidden_units: 50,
                            learning_rate,
                        },
                        clients_per_round,
                        local_epochs,
                    });
                }
            }
        }
    }
    cells
}

/// Quality scores of one completed grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellScore {
    pub weighted_accuracy: f64,
    pub per_class_f1: [f64; N_CLASSES],
    pub average_f1: f64,
}

impl CellScore {
    pub fn from_metrics(m: &Metrics) -> Self {
        Self {
            weighted_accuracy: m.weighted_accuracy,
            per_class_f1: m.per_class_f1,
            average_f1: m.average_f1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRun<C> {
    pub cell: C,
    pub score: CellScore,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridFailure<C> {
    pub cell: C,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome<C> {
    /// Completed cells, sorted by average F1 descending (ties broken by
    /// grid enumeration order, so output never depends on scheduling).
    pub results: Vec<GridRun<C>>,
    pub failures: Vec<GridFailure<C>>,
}

/// Runs `runner` once per cell, up to `workers` cells concurrently, and
/// collects an order-normalized outcome. Individual cell failures are
/// recorded, not fatal.
pub fn grid_search<C, F>(cells: &[C], workers: usize, runner: F) -> GridOutcome<C>
where
    C: Clone + Sync,
    F: Fn(&C) -> Result<CellScore, String> + Sync,
{
    let workers = workers.max(1).min(cells.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<(Result<CellScore, String>, f64)>>> = (0..cells.len())
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= cells.len() {
                    break;
                }
                let start = std::time::Instant::now();
                let outcome = runner(&cells[idx]);
                let runtime = start.elapsed().as_secs_f64();
                *slots[idx].lock().unwrap() = Some((outcome, runtime));
            });
        }
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (idx, slot) in slots.into_iter().enumerate() {
        let (outcome, runtime_seconds) = slot
            .into_inner()
            .unwrap()
            .expect("every grid cell must have been executed");
        match outcome {
            Ok(score) => results.push((
                idx,
                GridRun {
                    cell: cells[idx].clone(),
                    score,
                    runtime_seconds,
                },
            )),
            Err(error) => failures.push(GridFailure {
                cell: cells[idx].clone(),
                error,
            }),
        }
    }
    results.sort_by(|(ia, a), (ib, b)| {
        b.score
            .average_f1
            .partial_cmp(&a.score.average_f1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    GridOutcome {
        results: results.into_iter().map(|(_, r)| r).collect(),
        failures,
    }
}

/// Pairs the best central and federated runs that share a (batch size,
/// learning rate) assignment at the given window and hidden size, and
/// extracts `metric` from each side. Pair order follows ascending
/// (batch, learning rate), so the result is deterministic.
pub fn pair_grid_metric<F>(
    central: &[GridRun<Hyperparams>],
    federated: &[GridRun<FederatedCell>],
    window_steps: usize,
    hidden_units: usize,
    metric: F,
) -> Vec<(f64, f64)>
where
    F: Fn(&CellScore) -> f64,
{
    use std::collections::BTreeMap;
    // Keys order by (batch, lr-bits); lr values are positive, so the bit
    // pattern orders identically to the float value.
    let mut best_central: BTreeMap<(usize, u64), &GridRun<Hyperparams>> = BTreeMap::new();
    for run in central {
        if run.cell.window_steps != window_steps || run.cell.hidden_units != hidden_units {
            continue;
        }
        let key = (run.cell.batch_size, run.cell.learning_rate.to_bits());
        let slot = best_central.entry(key).or_insert(run);
        if run.score.average_f1 > slot.score.average_f1 {
            *slot = run;
        }
    }
    let mut best_federated: BTreeMap<(usize, u64), &GridRun<FederatedCell>> = BTreeMap::new();
    for run in federated {
        if run.cell.hyper.window_steps != window_steps
            || run.cell.hyper.hidden_units != hidden_units
        {
            continue;
        }
        let key = (
            run.cell.hyper.batch_size,
            run.cell.hyper.learning_rate.to_bits(),
        );
        let slot = best_federated.entry(key).or_insert(run);
        if run.score.average_f1 > slot.score.average_f1 {
            *slot = run;
        }
    }
    let mut pairs = Vec::new();
    for (key, c_run) in &best_central {
        if let Some(f_run) = best_federated.get(key) {
            pairs.push((metric(&c_run.score), metric(&f_run.score)));
        }
    }
    pairs
}
