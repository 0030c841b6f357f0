//! The learnable model: a single-layer LSTM over multivariate windows,
//! followed by a dense layer and a 3-way softmax, with hand-written exact
//! gradients (backpropagation through time) and an Adam optimizer.
//!
//! Gate equations per step t (gate order everywhere: input, forget,
//! candidate, output):
//!
//! ```text
//! i_t = sigmoid(W_xi x_t + W_hi h_{t-1} + b_i)
//! f_t = sigmoid(W_xf x_t + W_hf h_{t-1} + b_f)
//! g_t = tanh   (W_xg x_t + W_hg h_{t-1} + b_g)
//! o_t = sigmoid(W_xo x_t + W_ho h_{t-1} + b_o)
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! The window's final hidden state feeds `logits = W_d h_T + b_d`, and
//! probabilities come from a max-subtracted softmax. Initial h and c are
//! zero for every window (windows are independent training units).
//!
//! All parameters live in one flat `Vec<f64>` with a fixed layout (see
//! [`ModelParams`]), because federation averages raw parameter vectors.
//! Everything is 64-bit and bitwise deterministic given identical inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of output classes (turn signal Off / Left / Right).
pub const N_CLASSES: usize = 3;

/// Global-norm threshold applied to batch gradients before every Adam
/// step, identically in the centralized and federated training paths.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Training hyperparameters that identify one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub window_steps: usize,
    pub hidden_units: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("window length {len} is not a positive multiple of feature count {features}")]
    ShapeMismatch { len: usize, features: usize },
    #[error("parameter vector length {actual} does not match expected {expected} for hidden={hidden}, features={features}")]
    LengthMismatch {
        expected: usize,
        actual: usize,
        hidden: usize,
        features: usize,
    },
}

/// All model parameters as one flat vector plus its shape.
///
/// Flat layout, in order (gate blocks ordered input, forget, candidate,
/// output; all matrices row-major):
///
/// | section | rows × cols | offset |
/// |---------|-------------|--------|
/// | W_x     | 4H × F      | 0      |
/// | W_h     | 4H × H      | 4HF    |
/// | b       | 4H          | 4HF + 4H² |
/// | W_d     | 3 × H       | 4HF + 4H² + 4H |
/// | b_d     | 3           | 4HF + 4H² + 4H + 3H |
///
/// This ordering is part of the checkpoint format and must stay stable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    hidden: usize,
    features: usize,
    data: Vec<f64>,
}

/// Flat parameter count for a given shape.
pub fn flat_len(hidden: usize, features: usize) -> usize {
    4 * hidden * features + 4 * hidden * hidden + 4 * hidden + N_CLASSES * hidden + N_CLASSES
}

impl ModelParams {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn features(&self) -> usize {
        self.features
    }

    /// Borrow the flat parameter vector.
    pub fn flatten(&self) -> &[f64] {
        &self.data
    }

    /// Rebuild params from a flat vector; the inverse of [`Self::flatten`].
    pub fn unflatten(data: Vec<f64>, hidden: usize, features: usize) -> Result<Self, NnError> {
        let expected = flat_len(hidden, features);
        if data.len() != expected {
            return Err(NnError::LengthMismatch {
                expected,
                actual: data.len(),
                hidden,
                features,
            });
        }
        Ok(Self {
            hidden,
            features,
            data,
        })
    }

    /// Replace the parameter values, keeping the shape.
    pub fn set_flat(&mut self, data: &[f64]) -> Result<(), NnError> {
        if data.len() != self.data.len() {
            return Err(NnError::LengthMismatch {
                expected: self.data.len(),
                actual: data.len(),
                hidden: self.hidden,
                features: self.features,
            });
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    fn off_wh(&self) -> usize {
        4 * self.hidden * self.features
    }
    fn off_b(&self) -> usize {
        self.off_wh() + 4 * self.hidden * self.hidden
    }
    fn off_wd(&self) -> usize {
        self.off_b() + 4 * self.hidden
    }
    fn off_bd(&self) -> usize {
        self.off_wd() + N_CLASSES * self.hidden
    }

    fn w_x_row(&self, r: usize) -> &[f64] {
        let f = self.features;
        &self.data[r * f..(r + 1) * f]
    }
    fn w_h_row(&self, r: usize) -> &[f64] {
        let h = self.hidden;
        let o = self.off_wh();
        &self.data[o + r * h..o + (r + 1) * h]
    }
    fn b(&self) -> &[f64] {
        &self.data[self.off_b()..self.off_wd()]
    }
    fn w_d_row(&self, k: usize) -> &[f64] {
        let h = self.hidden;
        let o = self.off_wd();
        &self.data[o + k * h..o + (k + 1) * h]
    }
    fn b_d(&self) -> &[f64] {
        &self.data[self.off_bd()..]
    }
}

/// Uniform fan-in initialization in [-1/√H, +1/√H] for all weights,
/// biases zero except the forget-gate block at 1.0. Deterministic per
/// seed; weight draws happen in flat-layout order (W_x, W_h, W_d).
pub fn init_params(hidden: usize, features: usize, seed: u64) -> ModelParams {
    assert!(hidden > 0 && features > 0, "model shape must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut data = vec![0.0; flat_len(hidden, features)];
    let n_wx = 4 * hidden * features;
    let n_wh = 4 * hidden * hidden;
    for v in data[..n_wx + n_wh].iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    let off_b = n_wx + n_wh;
    // Forget-gate bias block starts one gate block (H entries) into b.
    for v in data[off_b + hidden..off_b + 2 * hidden].iter_mut() {
        *v = 1.0;
    }
    let off_wd = off_b + 4 * hidden;
    for v in data[off_wd..off_wd + N_CLASSES * hidden].iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    ModelParams {
        hidden,
        features,
        data,
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh through a single exp; exact at the saturated ends because
/// `exp(±inf)` collapses the expression to ±1.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (1.0 + (2.0 * x).exp())
}

/// Dot product with four independent accumulators (fixed association, so
/// results are bitwise reproducible while still vectorizing well).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc[0] = xa[0].mul_add(xb[0], acc[0]);
        acc[1] = xa[1].mul_add(xb[1], acc[1]);
        acc[2] = xa[2].mul_add(xb[2], acc[2]);
        acc[3] = xa[3].mul_add(xb[3], acc[3]);
    }
    let mut tail = 0.0;
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail = xa.mul_add(*xb, tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += alpha * x, element-wise.
#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

/// Max-subtracted softmax over the three logits.
fn softmax3(logits: [f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = logits[0].max(logits[1]).max(logits[2]);
    let e = [
        (logits[0] - m).exp(),
        (logits[1] - m).exp(),
        (logits[2] - m).exp(),
    ];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

/// Per-step activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    steps: usize,
    /// Post-activation gates, `steps × 4H`, gate blocks i,f,g,o.
    gates: Vec<f64>,
    /// Cell states, `(steps+1) × H`; row 0 is the zero initial state.
    c: Vec<f64>,
    /// Hidden states, `(steps+1) × H`; row 0 is the zero initial state.
    h: Vec<f64>,
    /// tanh of each step's new cell state, `steps × H`.
    tanh_c: Vec<f64>,
    probs: [f64; N_CLASSES],
}

impl ForwardCache {
    fn with_capacity(steps: usize, hidden: usize) -> Self {
        Self {
            steps,
            gates: vec![0.0; steps * 4 * hidden],
            c: vec![0.0; (steps + 1) * hidden],
            h: vec![0.0; (steps + 1) * hidden],
            tanh_c: vec![0.0; steps * hidden],
            probs: [0.0; N_CLASSES],
        }
    }

    /// Class probabilities from the cached forward pass.
    pub fn probs(&self) -> [f64; N_CLASSES] {
        self.probs
    }
}

/// Column-major scratch copies of W_x and W_h (one row per input / hidden
/// dimension, each row 4H long). The gate pre-activation then builds as a
/// series of contiguous length-4H axpys, which vectorizes far better than
/// length-F/H row dots, and the backward pass reads W_h columns (rows
/// here) directly. Rebuilt whenever the parameters change; every forward
/// path uses this same formulation so probabilities agree bitwise.
struct TransposedWeights {
    hidden: usize,
    /// F rows × 4H: row k holds W_x[·][k] over all 4H gate rows.
    wxt: Vec<f64>,
    /// H rows × 4H: row j holds W_h[·][j] over all 4H gate rows.
    wht: Vec<f64>,
}

impl TransposedWeights {
    fn new(hidden: usize, features: usize) -> Self {
        Self {
            hidden,
            wxt: vec![0.0; features * 4 * hidden],
            wht: vec![0.0; hidden * 4 * hidden],
        }
    }

    fn load(&mut self, params: &ModelParams) {
        let h4 = 4 * params.hidden;
        for r in 0..h4 {
            for (k, &v) in params.w_x_row(r).iter().enumerate() {
                self.wxt[k * h4 + r] = v;
            }
            for (j, &v) in params.w_h_row(r).iter().enumerate() {
                self.wht[j * h4 + r] = v;
            }
        }
    }

    fn row_x(&self, k: usize) -> &[f64] {
        let h4 = 4 * self.hidden;
        &self.wxt[k * h4..(k + 1) * h4]
    }

    fn row_h(&self, j: usize) -> &[f64] {
        let h4 = 4 * self.hidden;
        &self.wht[j * h4..(j + 1) * h4]
    }
}

/// Samples processed in lockstep per tile, so each transposed weight row
/// is loaded once and applied to every tile slot while still hot in L1.
/// Per-sample arithmetic order is unchanged by the tiling, so results
/// are bitwise identical for any tile width.
const TILE: usize = 8;

/// pre = b + W_x x + W_h h_prev, accumulated column-wise.
fn gate_preactivations(
    tw: &TransposedWeights,
    b: &[f64],
    x: &[f64],
    h_prev: &[f64],
    pre: &mut [f64],
) {
    pre.copy_from_slice(b);
    for (k, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            axpy(xv, tw.row_x(k), pre);
        }
    }
    for (j, &hv) in h_prev.iter().enumerate() {
        if hv != 0.0 {
            axpy(hv, tw.row_h(j), pre);
        }
    }
}

/// One step's activation math: turns pre-activations (already in
/// `gates`) into stored gate values and the step's c, tanh(c), h.
fn activate_step(
    h_n: usize,
    gates: &mut [f64],
    c_prev: &[f64],
    c_next: &mut [f64],
    tanh_c: &mut [f64],
    h_next: &mut [f64],
) {
    for j in 0..h_n {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h_n + j]);
        let g = tanh(gates[2 * h_n + j]);
        let o = sigmoid(gates[3 * h_n + j]);
        gates[j] = i;
        gates[h_n + j] = f;
        gates[2 * h_n + j] = g;
        gates[3 * h_n + j] = o;
        let c_new = f.mul_add(c_prev[j], i * g);
        c_next[j] = c_new;
        let tc = tanh(c_new);
        tanh_c[j] = tc;
        h_next[j] = o * tc;
    }
}

fn dense_softmax(params: &ModelParams, h_last: &[f64]) -> [f64; N_CLASSES] {
    let b_d = params.b_d();
    softmax3([
        b_d[0] + dot(params.w_d_row(0), h_last),
        b_d[1] + dot(params.w_d_row(1), h_last),
        b_d[2] + dot(params.w_d_row(2), h_last),
    ])
}

/// Lockstep forward over up to [`TILE`] windows of equal step count;
/// each cache receives one sample's activations.
fn forward_tile(
    params: &ModelParams,
    tw: &TransposedWeights,
    windows: &[&[f64]],
    caches: &mut [ForwardCache],
) {
    let h_n = params.hidden;
    let f_n = params.features;
    let h4 = 4 * h_n;
    let ts = windows.len();
    debug_assert!(ts <= caches.len());
    let steps = windows[0].len() / f_n;
    let b = params.b();
    for cache in caches[..ts].iter_mut() {
        debug_assert_eq!(cache.steps, steps);
        cache.c[..h_n].fill(0.0);
        cache.h[..h_n].fill(0.0);
    }
    for t in 0..steps {
        for (s, cache) in caches[..ts].iter_mut().enumerate() {
            debug_assert_eq!(windows[s].len(), steps * f_n);
            cache.gates[t * h4..(t + 1) * h4].copy_from_slice(b);
        }
        for k in 0..f_n {
            let wrow = tw.row_x(k);
            for (s, cache) in caches[..ts].iter_mut().enumerate() {
                let xv = windows[s][t * f_n + k];
                if xv != 0.0 {
                    axpy(xv, wrow, &mut cache.gates[t * h4..(t + 1) * h4]);
                }
            }
        }
        for j in 0..h_n {
            let wrow = tw.row_h(j);
            for cache in caches[..ts].iter_mut() {
                let hv = cache.h[t * h_n + j];
                if hv != 0.0 {
                    axpy(hv, wrow, &mut cache.gates[t * h4..(t + 1) * h4]);
                }
            }
        }
        for cache in caches[..ts].iter_mut() {
            let (_, h_rest) = cache.h.split_at_mut((t + 1) * h_n);
            let (c_past, c_rest) = cache.c.split_at_mut((t + 1) * h_n);
            activate_step(
                h_n,
                &mut cache.gates[t * h4..(t + 1) * h4],
                &c_past[t * h_n..],
                &mut c_rest[..h_n],
                &mut cache.tanh_c[t * h_n..(t + 1) * h_n],
                &mut h_rest[..h_n],
            );
        }
    }
    for cache in caches[..ts].iter_mut() {
        cache.probs = dense_softmax(params, &cache.h[steps * h_n..]);
    }
}

/// Forward pass over one window (`steps × features`, row-major), starting
/// from zero h and c. Returns class probabilities plus the cached
/// activations needed by [`backward`].
pub fn forward(
    params: &ModelParams,
    window: &[f64],
) -> Result<([f64; N_CLASSES], ForwardCache), NnError> {
    let f_n = params.features;
    if window.is_empty() || !window.len().is_multiple_of(f_n) {
        return Err(NnError::ShapeMismatch {
            len: window.len(),
            features: f_n,
        });
    }
    let mut tw = TransposedWeights::new(params.hidden, f_n);
    tw.load(params);
    let mut cache = ForwardCache::with_capacity(window.len() / f_n, params.hidden);
    forward_tile(params, &tw, &[window], std::slice::from_mut(&mut cache));
    Ok((cache.probs, cache))
}

/// Class probabilities for a set of equal-length windows, computed in
/// lockstep tiles; the fast path for whole-split evaluation. Bitwise
/// identical to calling [`forward_probs`] per window.
pub fn probs_batch(
    params: &ModelParams,
    windows: &[&[f64]],
) -> Result<Vec<[f64; N_CLASSES]>, NnError> {
    let f_n = params.features;
    let mut out = Vec::with_capacity(windows.len());
    if windows.is_empty() {
        return Ok(out);
    }
    for w in windows {
        if w.is_empty() || !w.len().is_multiple_of(f_n) || w.len() != windows[0].len() {
            return Err(NnError::ShapeMismatch {
                len: w.len(),
                features: f_n,
            });
        }
    }
    let steps = windows[0].len() / f_n;
    let mut tw = TransposedWeights::new(params.hidden, f_n);
    tw.load(params);
    let mut caches: Vec<ForwardCache> = (0..TILE.min(windows.len()))
        .map(|_| ForwardCache::with_capacity(steps, params.hidden))
        .collect();
    for tile in windows.chunks(TILE) {
        forward_tile(params, &tw, tile, &mut caches);
        out.extend(caches[..tile.len()].iter().map(|c| c.probs));
    }
    Ok(out)
}

/// Reusable inference state for one fixed set of parameters; amortizes
/// the transposed-weight load across many windows.
pub struct Predictor {
    hidden: usize,
    features: usize,
    tw: TransposedWeights,
    b: Vec<f64>,
    w_d: Vec<f64>,
    b_d: [f64; N_CLASSES],
    pre: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl Predictor {
    pub fn new(params: &ModelParams) -> Self {
        let hidden = params.hidden;
        let features = params.features;
        let mut tw = TransposedWeights::new(hidden, features);
        tw.load(params);
        Self {
            hidden,
            features,
            tw,
            b: params.b().to_vec(),
            w_d: params.data[params.off_wd()..params.off_bd()].to_vec(),
            b_d: params.b_d().try_into().unwrap(),
            pre: vec![0.0; 4 * hidden],
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }

    /// Class probabilities for one window, keeping only rolling state.
    pub fn probs(&mut self, window: &[f64]) -> Result<[f64; N_CLASSES], NnError> {
        if window.is_empty() || !window.len().is_multiple_of(self.features) {
            return Err(NnError::ShapeMismatch {
                len: window.len(),
                features: self.features,
            });
        }
        let h_n = self.hidden;
        let steps = window.len() / self.features;
        self.h.fill(0.0);
        self.c.fill(0.0);
        for t in 0..steps {
            let x = &window[t * self.features..(t + 1) * self.features];
            gate_preactivations(&self.tw, &self.b, x, &self.h, &mut self.pre);
            for j in 0..h_n {
                let i = sigmoid(self.pre[j]);
                let f = sigmoid(self.pre[h_n + j]);
                let g = tanh(self.pre[2 * h_n + j]);
                let o = sigmoid(self.pre[3 * h_n + j]);
                self.c[j] = f.mul_add(self.c[j], i * g);
                self.h[j] = o * tanh(self.c[j]);
            }
        }
        Ok(softmax3([
            self.b_d[0] + dot(&self.w_d[..h_n], &self.h),
            self.b_d[1] + dot(&self.w_d[h_n..2 * h_n], &self.h),
            self.b_d[2] + dot(&self.w_d[2 * h_n..], &self.h),
        ]))
    }

    /// Argmax class (lowest index on ties, so prediction is
    /// deterministic).
    pub fn predict(&mut self, window: &[f64]) -> Result<usize, NnError> {
        let p = self.probs(window)?;
        let mut best = 0;
        for k in 1..N_CLASSES {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// One-shot convenience wrapper over [`Predictor::probs`].
pub fn forward_probs(params: &ModelParams, window: &[f64]) -> Result<[f64; N_CLASSES], NnError> {
    Predictor::new(params).probs(window)
}

/// One-shot convenience wrapper over [`Predictor::predict`].
pub fn predict(params: &ModelParams, window: &[f64]) -> Result<usize, NnError> {
    Predictor::new(params).predict(window)
}

/// Cross-entropy of one prediction: −ln p\[label\].
pub fn loss(probs: &[f64; N_CLASSES], label: usize) -> f64 {
    -probs[label].ln()
}

/// One training sample as the model sees it: a flat `steps × features`
/// window plus the class label at the step after the window.
pub type Sample<'a> = (&'a [f64], usize);

/// Per-tile scratch for the backward pass.
struct BackwardScratch {
    /// dLoss/dh per tile slot, `TILE × H`.
    dh: Vec<f64>,
    /// Carried cell-state gradient per tile slot, `TILE × H`.
    dc: Vec<f64>,
    /// Pre-activation gradients for every step and slot,
    /// `steps × TILE × 4H`; kept so weight gradients can be accumulated
    /// in one blocked pass per sample.
    dpre: Vec<f64>,
}

impl BackwardScratch {
    fn new(hidden: usize) -> Self {
        Self {
            dh: vec![0.0; TILE * hidden],
            dc: vec![0.0; TILE * hidden],
            dpre: Vec::new(),
        }
    }

    fn ensure_steps(&mut self, steps: usize, hidden: usize) {
        let need = steps * TILE * 4 * hidden;
        if self.dpre.len() < need {
            self.dpre.resize(need, 0.0);
        }
    }
}

/// Lockstep backward over one tile. Each slot's un-averaged gradient
/// lands in `works[slot]` (transposed work layout: W_x columns F × 4H,
/// W_h columns H × 4H, then b, W_d, b_d; [`permute_grad`] maps back).
/// Weight-row reads are shared across slots; weight-gradient outer
/// products are deferred and accumulated row-blocked in ascending step
/// order, once per sample, so the work buffer is streamed a single time.
fn backward_tile(
    params: &ModelParams,
    tw: &TransposedWeights,
    windows: &[&[f64]],
    labels: &[usize],
    caches: &[ForwardCache],
    scratch: &mut BackwardScratch,
    works: &mut [Vec<f64>],
) {
    let h_n = params.hidden;
    let f_n = params.features;
    let h4 = 4 * h_n;
    let ts = windows.len();
    let steps = caches[0].steps;
    scratch.ensure_steps(steps, h_n);

    let off_gwht = f_n * h4;
    let off_gb = off_gwht + h_n * h4;
    let off_gwd = off_gb + h4;
    let off_gbd = off_gwd + N_CLASSES * h_n;
    let dpre_at = |t: usize, s: usize| (t * TILE + s) * h4;

    for s in 0..ts {
        let cache = &caches[s];
        let mut dlogits = cache.probs;
        dlogits[labels[s]] -= 1.0;
        let h_last = &cache.h[steps * h_n..];
        let work = &mut works[s];
        let dh = &mut scratch.dh[s * h_n..(s + 1) * h_n];
        dh.fill(0.0);
        scratch.dc[s * h_n..(s + 1) * h_n].fill(0.0);
        for k in 0..N_CLASSES {
            work[off_gbd + k] += dlogits[k];
            axpy(
                dlogits[k],
                h_last,
                &mut work[off_gwd + k * h_n..off_gwd + (k + 1) * h_n],
            );
            axpy(dlogits[k], params.w_d_row(k), dh);
        }
    }

    for t in (0..steps).rev() {
        for s in 0..ts {
            let cache = &caches[s];
            let gates = &cache.gates[t * h4..(t + 1) * h4];
            let tanh_c = &cache.tanh_c[t * h_n..(t + 1) * h_n];
            let c_prev = &cache.c[t * h_n..(t + 1) * h_n];
            let dh = &scratch.dh[s * h_n..(s + 1) * h_n];
            let dc = &mut scratch.dc[s * h_n..(s + 1) * h_n];
            let dpre = &mut scratch.dpre[dpre_at(t, s)..dpre_at(t, s) + h4];
            for j in 0..h_n {
                let i = gates[j];
                let f = gates[h_n + j];
                let g = gates[2 * h_n + j];
                let o = gates[3 * h_n + j];
                let tc = tanh_c[j];
                let dh_j = dh[j];
                let d_o = dh_j * tc;
                let d_c = dh_j * o * (1.0 - tc * tc) + dc[j];
                let d_i = d_c * g;
                let d_f = d_c * c_prev[j];
                let d_g = d_c * i;
                dpre[j] = d_i * i * (1.0 - i);
                dpre[h_n + j] = d_f * f * (1.0 - f);
                dpre[2 * h_n + j] = d_g * (1.0 - g * g);
                dpre[3 * h_n + j] = d_o * o * (1.0 - o);
                dc[j] = d_c * f;
            }
            let work = &mut works[s];
            for (gb, d) in work[off_gb..off_gb + h4].iter_mut().zip(dpre.iter()) {
                *gb += *d;
            }
        }
        if t > 0 {
            for j in 0..h_n {
                let wrow = tw.row_h(j);
                for s in 0..ts {
                    let dpre = &scratch.dpre[dpre_at(t, s)..dpre_at(t, s) + h4];
                    scratch.dh[s * h_n + j] = dot(wrow, dpre);
                }
            }
        }
    }

    for s in 0..ts {
        let work = &mut works[s];
        let window = windows[s];
        let cache = &caches[s];
        for k in 0..f_n {
            let row = &mut work[k * h4..(k + 1) * h4];
            for t in 0..steps {
                let xv = window[t * f_n + k];
                if xv != 0.0 {
                    axpy(xv, &scratch.dpre[dpre_at(t, s)..dpre_at(t, s) + h4], row);
                }
            }
        }
        for j in 0..h_n {
            let row = &mut work[off_gwht + j * h4..off_gwht + (j + 1) * h4];
            for t in 0..steps {
                let hv = cache.h[t * h_n + j];
                if hv != 0.0 {
                    axpy(hv, &scratch.dpre[dpre_at(t, s)..dpre_at(t, s) + h4], row);
                }
            }
        }
    }
}

/// Rearranges a work-layout gradient into the canonical flat layout.
/// Pure element permutation, hence bitwise exact.
fn permute_grad(work: &[f64], hidden: usize, features: usize, out: &mut [f64]) {
    let h4 = 4 * hidden;
    let off_gwht = features * h4;
    let off_rest = off_gwht + hidden * h4;
    let off_wh = h4 * features;
    for r in 0..h4 {
        for k in 0..features {
            out[r * features + k] = work[k * h4 + r];
        }
        for j in 0..hidden {
            out[off_wh + r * hidden + j] = work[off_gwht + j * h4 + r];
        }
    }
    out[off_wh + h4 * hidden..].copy_from_slice(&work[off_rest..]);
}

/// Online pairwise (binary-counter) summation of equal-length vectors.
///
/// Each pushed vector enters level 0; two occupied buffers at a level
/// merge and carry upward, so the reduction tree is balanced and fixed
/// by the push count alone. Pushing every vector twice therefore yields
/// exactly twice each partial sum (multiplication by two is exact), and
/// `2S / 2n == S / n` bitwise — mean gradients are invariant under
/// sample duplication, not merely close. Error growth is O(log n).
struct PairwiseSum {
    len: usize,
    levels: Vec<Option<Vec<f64>>>,
    pool: Vec<Vec<f64>>,
    count: usize,
}

impl PairwiseSum {
    fn new(len: usize) -> Self {
        Self {
            len,
            levels: Vec::new(),
            pool: Vec::new(),
            count: 0,
        }
    }

    /// A zeroed buffer for the caller to fill (recycled when possible).
    fn grab(&mut self) -> Vec<f64> {
        match self.pool.pop() {
            Some(mut buf) => {
                buf.fill(0.0);
                buf
            }
            None => vec![0.0; self.len],
        }
    }

    fn push(&mut self, mut carry: Vec<f64>) {
        debug_assert_eq!(carry.len(), self.len);
        self.count += 1;
        let mut k = 0;
        loop {
            if k == self.levels.len() {
                self.levels.push(None);
            }
            match self.levels[k].take() {
                None => {
                    self.levels[k] = Some(carry);
                    return;
                }
                Some(mut acc) => {
                    for (a, c) in acc.iter_mut().zip(&carry) {
                        *a += *c;
                    }
                    self.pool.push(carry);
                    carry = acc;
                    k += 1;
                }
            }
        }
    }

    /// Collapses remaining levels in ascending order and resets. Returns
    /// the total and the number of vectors it sums.
    fn finish(&mut self) -> (Vec<f64>, usize) {
        let mut total: Option<Vec<f64>> = None;
        for k in 0..self.levels.len() {
            if let Some(mut buf) = self.levels[k].take() {
                if let Some(acc) = total {
                    for (b, a) in buf.iter_mut().zip(&acc) {
                        *b += *a;
                    }
                    self.pool.push(acc);
                }
                total = Some(buf);
            }
        }
        let n = self.count;
        self.count = 0;
        (total.expect("finish on an empty sum"), n)
    }

    fn recycle(&mut self, buf: Vec<f64>) {
        if buf.len() == self.len {
            self.pool.push(buf);
        }
    }
}

/// Gradient of the mean batch cross-entropy with respect to every
/// parameter, as a flat vector in the [`ModelParams`] layout. Per-sample
/// gradients are combined by pairwise summation in batch order, so the
/// result is bitwise deterministic and exactly invariant under
/// duplicating every sample. `caches` must come from [`forward`] on the
/// same samples in the same order.
pub fn backward(params: &ModelParams, batch: &[Sample<'_>], caches: &[ForwardCache]) -> Vec<f64> {
    assert_eq!(batch.len(), caches.len(), "one cache per batch sample");
    assert!(!batch.is_empty(), "backward needs a nonempty batch");
    let mut tw = TransposedWeights::new(params.hidden, params.features);
    tw.load(params);
    let mut scratch = BackwardScratch::new(params.hidden);
    let mut sum = PairwiseSum::new(params.data.len());
    let mut works: Vec<Vec<f64>> = Vec::with_capacity(TILE);
    for (tile, tile_caches) in batch.chunks(TILE).zip(caches.chunks(TILE)) {
        let mut wins: [&[f64]; TILE] = [&[]; TILE];
        let mut labs: [usize; TILE] = [0; TILE];
        for (i, (w, l)) in tile.iter().enumerate() {
            wins[i] = w;
            labs[i] = *l;
        }
        works.clear();
        works.extend((0..tile.len()).map(|_| sum.grab()));
        backward_tile(
            params,
            &tw,
            &wins[..tile.len()],
            &labs[..tile.len()],
            tile_caches,
            &mut scratch,
            &mut works,
        );
        for buf in works.drain(..) {
            sum.push(buf);
        }
    }
    let (mut work, n) = sum.finish();
    let n_f = n as f64;
    for g in work.iter_mut() {
        *g /= n_f;
    }
    let mut grad = vec![0.0; params.data.len()];
    permute_grad(&work, params.hidden, params.features, &mut grad);
    grad
}

/// Fused forward+backward over a batch with reusable buffers; the hot
/// path for training loops. Samples are processed in order into a
/// fixed-shape pairwise reduction, so results are bitwise deterministic.
pub struct BatchEvaluator {
    tw: TransposedWeights,
    caches: Vec<ForwardCache>,
    scratch: BackwardScratch,
    sum: PairwiseSum,
    works: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

impl BatchEvaluator {
    pub fn new(hidden: usize, features: usize, window_steps: usize) -> Self {
        Self {
            tw: TransposedWeights::new(hidden, features),
            caches: (0..TILE)
                .map(|_| ForwardCache::with_capacity(window_steps, hidden))
                .collect(),
            scratch: BackwardScratch::new(hidden),
            sum: PairwiseSum::new(flat_len(hidden, features)),
            works: Vec::with_capacity(TILE),
            grad: vec![0.0; flat_len(hidden, features)],
        }
    }

    /// Mean gradient and mean loss over the batch. The returned slice
    /// borrows this evaluator's accumulator and is valid until the next
    /// call.
    pub fn grad_mean_loss(&mut self, params: &ModelParams, batch: &[Sample<'_>]) -> (&[f64], f64) {
        assert!(!batch.is_empty(), "gradient needs a nonempty batch");
        let expected_len = self.caches[0].steps * params.features;
        self.tw.load(params);
        let mut loss_sum = 0.0;
        for tile in batch.chunks(TILE) {
            let mut wins: [&[f64]; TILE] = [&[]; TILE];
            let mut labs: [usize; TILE] = [0; TILE];
            for (i, (w, l)) in tile.iter().enumerate() {
                assert_eq!(
                    w.len(),
                    expected_len,
                    "window length must match evaluator shape"
                );
                wins[i] = w;
                labs[i] = *l;
            }
            forward_tile(params, &self.tw, &wins[..tile.len()], &mut self.caches);
            for (cache, &lab) in self.caches[..tile.len()].iter().zip(&labs) {
                loss_sum += loss(&cache.probs, lab);
            }
            self.works.clear();
            for _ in 0..tile.len() {
                let buf = self.sum.grab();
                self.works.push(buf);
            }
            backward_tile(
                params,
                &self.tw,
                &wins[..tile.len()],
                &labs[..tile.len()],
                &self.caches,
                &mut self.scratch,
                &mut self.works,
            );
            for buf in self.works.drain(..) {
                self.sum.push(buf);
            }
        }
        let (mut work, n) = self.sum.finish();
        let n_f = n as f64;
        for g in work.iter_mut() {
            *g /= n_f;
        }
        permute_grad(&work, params.hidden, params.features, &mut self.grad);
        self.sum.recycle(work);
        (&self.grad, loss_sum / batch.len() as f64)
    }
}

/// Scales `grad` in place so its L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = dot(grad, grad).sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Adam optimizer state; one moment pair per flat parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update, in place:
///
/// ```text
/// m ← β1 m + (1−β1) g        v ← β2 v + (1−β2) g²
/// m̂ = m/(1−β1^t)             v̂ = v/(1−β2^t)
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
pub fn adam_step(
    params: &mut ModelParams,
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    if grad.len() != params.data.len() || state.m.len() != params.data.len() {
        return Err(NnError::LengthMismatch {
            expected: params.data.len(),
            actual: grad.len(),
            hidden: params.hidden,
            features: params.features,
        });
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for (((p, g), m), v) in params
        .data
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"FSIMLSTM";
const CKPT_VERSION: u32 = 1;
/// Gate-block ordering tag; a checkpoint with a different tag was written
/// by an incompatible layout and must be rejected.
const CKPT_GATE_TAG: &[u8; 4] = b"ifgo";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("incompatible gate ordering tag {0:?}")]
    BadGateTag([u8; 4]),
    #[error("checkpoint payload holds {actual} parameters, expected {expected} for hidden={hidden}, features={features}")]
    PayloadLength {
        expected: usize,
        actual: usize,
        hidden: usize,
        features: usize,
    },
    #[error("checkpoint contains a non-finite parameter at flat index {0}")]
    NonFinite(usize),
}

/// Writes `header(magic, version, H, F, gate tag)` followed by the flat
/// parameter vector as little-endian f64. Byte-exact round trip.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), CheckpointError> {
    let mut buf = Vec::with_capacity(24 + params.data.len() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.hidden as u32).to_le_bytes());
    buf.extend_from_slice(&(params.features as u32).to_le_bytes());
    buf.extend_from_slice(CKPT_GATE_TAG);
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let hidden = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let features = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let tag: [u8; 4] = bytes[20..24].try_into().unwrap();
    if &tag != CKPT_GATE_TAG {
        return Err(CheckpointError::BadGateTag(tag));
    }
    let payload = &bytes[24..];
    let expected = flat_len(hidden, features);
    if payload.len() != expected * 8 {
        return Err(CheckpointError::PayloadLength {
            expected,
            actual: payload.len() / 8,
            hidden,
            features,
        });
    }
    let mut data = Vec::with_capacity(expected);
    for (idx, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(CheckpointError::NonFinite(idx));
        }
        data.push(v);
    }
    Ok(ModelParams {
        hidden,
        features,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_window(rng: &mut ChaCha8Rng, steps: usize, features: usize) -> Vec<f64> {
        (0..steps * features)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect()
    }

    /// Mean batch loss as a plain function of a flat parameter vector;
    /// the quantity the finite-difference oracle differentiates.
    fn batch_loss(
        flat: &[f64],
        hidden: usize,
        features: usize,
        batch: &[(Vec<f64>, usize)],
    ) -> f64 {
        let p = ModelParams::unflatten(flat.to_vec(), hidden, features).unwrap();
        let mut sum = 0.0;
        for (w, label) in batch {
            let (probs, _) = forward(&p, w).unwrap();
            sum += loss(&probs, *label);
        }
        sum / batch.len() as f64
    }

    #[test]
    fn flat_len_matches_shape_arithmetic() {
        assert_eq!(flat_len(50, 11), 12_553);
        assert_eq!(flat_len(1, 1), 18);
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(5, 3, 99);
        let b = init_params(5, 3, 99);
        assert_eq!(a, b);
        assert_ne!(a, init_params(5, 3, 100));
        assert_eq!(a.flatten().len(), flat_len(5, 3));
        // Forget-gate bias block is 1, all other biases 0.
        let off_b = 4 * 5 * 3 + 4 * 5 * 5;
        let b_slice = &a.flatten()[off_b..off_b + 20];
        assert!(b_slice[..5].iter().all(|&v| v == 0.0));
        assert!(b_slice[5..10].iter().all(|&v| v == 1.0));
        assert!(b_slice[10..].iter().all(|&v| v == 0.0));
        let bound = 1.0 / 5.0_f64.sqrt();
        assert!(a
            .flatten()
            .iter()
            .all(|v| v.abs() <= 1.0 && v.abs() <= bound || *v == 1.0));
    }

    #[test]
    fn flatten_round_trip_is_bit_identical() {
        let p = init_params(4, 3, 7);
        let q = ModelParams::unflatten(p.flatten().to_vec(), 4, 3).unwrap();
        assert_eq!(p, q);
        let err = ModelParams::unflatten(vec![0.0; 10], 4, 3).unwrap_err();
        assert!(matches!(err, NnError::LengthMismatch { .. }));
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let p = ModelParams::unflatten(vec![0.0; flat_len(4, 2)], 4, 2).unwrap();
        let (probs, _) = forward(&p, &[0.3, -0.7, 1.1, 0.0]).unwrap();
        for p_k in probs {
            assert_eq!(p_k, 1.0 / 3.0);
        }
    }

    #[test]
    fn dense_bias_one_zero_zero_matches_softmax_table() {
        let mut flat = vec![0.0; flat_len(3, 2)];
        let bd_off = flat_len(3, 2) - 3;
        flat[bd_off] = 1.0;
        let p = ModelParams::unflatten(flat, 3, 2).unwrap();
        let (probs, _) = forward(&p, &[0.5, -0.5]).unwrap();
        assert_relative_eq!(probs[0], 0.5761, max_relative = 2e-4);
        assert_relative_eq!(probs[1], 0.2119, max_relative = 5e-4);
        assert_relative_eq!(probs[2], 0.2119, max_relative = 5e-4);
    }

    #[test]
    fn probabilities_form_a_simplex_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = init_params(6, 4, rng.random());
            let w = tiny_window(&mut rng, 5, 4);
            let (probs, _) = forward(&p, &w).unwrap();
            assert!(probs.iter().all(|&x| x >= 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// Scalar model (H=1, F=1, W=1) against an explicitly written-out
    /// trace of the gate equations.
    #[test]
    fn scalar_forward_matches_hand_trace() {
        // Layout for H=1,F=1: [wx_i, wx_f, wx_g, wx_o, wh_i, wh_f, wh_g,
        // wh_o, b_i, b_f, b_g, b_o, wd_0, wd_1, wd_2, bd_0, bd_1, bd_2]
        let flat = vec![
            0.5, -0.3, 0.8, 0.2, // W_x
            0.7, -0.6, 0.4, 0.9, // W_h (multiplies h0 = 0)
            0.1, 1.0, -0.2, 0.05, // b
            1.5, -0.7, 0.3, // W_d
            0.01, -0.02, 0.0, // b_d
        ];
        let p = ModelParams::unflatten(flat, 1, 1).unwrap();
        let x = 0.6;
        let (probs, _) = forward(&p, &[x]).unwrap();

        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(0.5 * x + 0.1);
        let f = sig(-0.3 * x + 1.0);
        let g = (0.8 * x - 0.2_f64).tanh();
        let o = sig(0.2 * x + 0.05);
        let c = f * 0.0 + i * g;
        let h = o * c.tanh();
        let logits = [1.5 * h + 0.01, -0.7 * h - 0.02, 0.3 * h];
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for k in 0..N_CLASSES {
            assert_relative_eq!(probs[k], exps[k] / sum, max_relative = 1e-12);
        }
    }

    #[test]
    fn loss_known_values() {
        assert_relative_eq!(loss(&[1.0 / 3.0; 3], 1), 3.0_f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(loss(&[1.0 / 3.0; 3], 1), 1.098612, max_relative = 1e-6);
        assert_eq!(loss(&[0.2, 1.0, 0.3], 1), 0.0);
        assert_relative_eq!(
            loss(&[0.5, 0.25, 0.25], 0),
            2.0_f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn perfect_prediction_has_exactly_zero_gradient() {
        // b_d[0] so large that softmax underflows the other classes to
        // exactly 0.0 and p[0] to exactly 1.0.
        let mut flat = vec![0.0; flat_len(2, 2)];
        let bd_off = flat_len(2, 2) - 3;
        flat[bd_off] = 1000.0;
        let p = ModelParams::unflatten(flat, 2, 2).unwrap();
        let w1 = vec![0.4, -0.2, 0.9, 0.1];
        let w2 = vec![-1.0, 0.3, 0.2, 0.8];
        let batch: Vec<Sample> = vec![(&w1, 0), (&w2, 0)];
        let caches: Vec<ForwardCache> = batch
            .iter()
            .map(|(w, _)| forward(&p, w).unwrap().1)
            .collect();
        assert_eq!(caches[0].probs()[0], 1.0);
        let grad = backward(&p, &batch, &caches);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_has_identical_gradient() {
        let p = init_params(3, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Odd batch size exercises the unbalanced reduction-tree path.
        let windows: Vec<Vec<f64>> = (0..3).map(|_| tiny_window(&mut rng, 4, 2)).collect();
        let base: Vec<Sample> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_slice(), i % N_CLASSES))
            .collect();
        let doubled: Vec<Sample> = base
            .iter()
            .flat_map(|s| std::iter::repeat_n(*s, 2))
            .collect();
        let run = |batch: &[Sample]| {
            let caches: Vec<ForwardCache> = batch
                .iter()
                .map(|(w, _)| forward(&p, w).unwrap().1)
                .collect();
            backward(&p, batch, &caches)
        };
        assert_eq!(run(&base), run(&doubled));
    }

    /// The central oracle: analytic BPTT gradients against central finite
    /// differences on randomized small instances.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for trial in 0..120 {
            let hidden = rng.random_range(1..=8);
            let features = rng.random_range(1..=4);
            let steps = rng.random_range(1..=5);
            let batch_n = rng.random_range(1..=4);
            let params = init_params(hidden, features, rng.random());
            let batch_owned: Vec<(Vec<f64>, usize)> = (0..batch_n)
                .map(|_| {
                    (
                        tiny_window(&mut rng, steps, features),
                        rng.random_range(0..N_CLASSES),
                    )
                })
                .collect();
            let batch: Vec<Sample> = batch_owned
                .iter()
                .map(|(w, l)| (w.as_slice(), *l))
                .collect();
            let caches: Vec<ForwardCache> = batch
                .iter()
                .map(|(w, _)| forward(&params, w).unwrap().1)
                .collect();
            let analytic = backward(&params, &batch, &caches);

            let h = 1e-5;
            let mut flat = params.flatten().to_vec();
            for idx in 0..flat.len() {
                let orig = flat[idx];
                flat[idx] = orig + h;
                let up = batch_loss(&flat, hidden, features, &batch_owned);
                flat[idx] = orig - h;
                let down = batch_loss(&flat, hidden, features, &batch_owned);
                flat[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
                let rel = (analytic[idx] - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "trial {trial}: flat index {idx} analytic {} vs numeric {} (rel {rel:.2e})",
                    analytic[idx],
                    numeric
                );
            }
        }
        println!("gradient check worst relative error: {worst:.3e}");
    }

    #[test]
    fn batch_evaluator_matches_forward_backward_composition() {
        let p = init_params(5, 3, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let windows: Vec<Vec<f64>> = (0..7).map(|_| tiny_window(&mut rng, 4, 3)).collect();
        let batch: Vec<Sample> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_slice(), i % N_CLASSES))
            .collect();
        let caches: Vec<ForwardCache> = batch
            .iter()
            .map(|(w, _)| forward(&p, w).unwrap().1)
            .collect();
        let reference = backward(&p, &batch, &caches);
        let ref_loss = batch
            .iter()
            .zip(&caches)
            .map(|((_, l), c)| loss(&c.probs(), *l))
            .sum::<f64>()
            / batch.len() as f64;

        let mut eval = BatchEvaluator::new(5, 3, 4);
        let (grad, mean_loss) = eval.grad_mean_loss(&p, &batch);
        assert_eq!(grad, reference.as_slice());
        assert_eq!(mean_loss, ref_loss);
    }

    #[test]
    fn forward_probs_agrees_with_cached_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = init_params(6, 3, rng.random());
            let w = tiny_window(&mut rng, 5, 3);
            let (probs, _) = forward(&p, &w).unwrap();
            assert_eq!(probs, forward_probs(&p, &w).unwrap());
        }
    }

    /// Tiled batch inference must be bitwise identical to per-sample
    /// inference regardless of how samples fall into tiles.
    #[test]
    fn probs_batch_is_tile_width_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_params(6, 3, 42);
        // 19 windows: two full tiles of 8 plus a tail of 3.
        let windows: Vec<Vec<f64>> = (0..19).map(|_| tiny_window(&mut rng, 4, 3)).collect();
        let refs: Vec<&[f64]> = windows.iter().map(|w| w.as_slice()).collect();
        let batched = probs_batch(&p, &refs).unwrap();
        for (w, got) in windows.iter().zip(&batched) {
            assert_eq!(*got, forward_probs(&p, w).unwrap());
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_params(2, 3, 1);
        assert!(matches!(
            forward(&p, &[1.0, 2.0]),
            Err(NnError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            forward(&p, &[]),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = init_params(2, 2, 5);
        let before = p.clone();
        let len = p.flatten().len();
        let mut state = AdamState::new(len);
        adam_step(&mut p, &vec![0.0; len], &mut state, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
        assert!(state.m.iter().all(|&m| m == 0.0));
        assert!(state.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let len = flat_len(1, 1);
        let mut p = ModelParams::unflatten(vec![0.5; len], 1, 1).unwrap();
        let mut state = AdamState::new(len);
        let g = 0.7;
        adam_step(&mut p, &vec![g; len], &mut state, 0.01).unwrap();
        for &v in p.flatten() {
            assert!((v - (0.5 - 0.01)).abs() < 1e-6);
        }
    }

    /// Two constant-gradient steps against a scalar Adam trace computed
    /// longhand in the test.
    #[test]
    fn adam_two_step_trace() {
        let len = flat_len(1, 1);
        let theta0 = 0.25;
        let lr = 0.004;
        let g = -0.3;
        let mut p = ModelParams::unflatten(vec![theta0; len], 1, 1).unwrap();
        let mut state = AdamState::new(len);
        adam_step(&mut p, &vec![g; len], &mut state, lr).unwrap();
        let after1 = p.flatten()[0];
        adam_step(&mut p, &vec![g; len], &mut state, lr).unwrap();
        let after2 = p.flatten()[0];

        // Hand trace, step 1.
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let mh1 = m1 / (1.0 - 0.9_f64);
        let vh1 = v1 / (1.0 - 0.999_f64);
        let t1 = theta0 - lr * mh1 / (vh1.sqrt() + 1e-8);
        // Step 2.
        let m2 = 0.9 * m1 + 0.1 * g;
        let v2 = 0.999 * v1 + 0.001 * g * g;
        let mh2 = m2 / (1.0 - 0.9_f64 * 0.9);
        let vh2 = v2 / (1.0 - 0.999_f64 * 0.999);
        let t2 = t1 - lr * mh2 / (vh2.sqrt() + 1e-8);

        assert_relative_eq!(after1, t1, max_relative = 1e-12);
        assert_relative_eq!(after2, t2, max_relative = 1e-12);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = vec![3.0, 4.0]; // norm 5 exactly: untouched
        assert_eq!(clip_global_norm(&mut g, 5.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let mut big = vec![6.0, 8.0]; // norm 10 → scaled by 0.5
        assert_eq!(clip_global_norm(&mut big, 5.0), 10.0);
        assert_eq!(big, vec![3.0, 4.0]);
    }

    #[test]
    fn forward_and_backward_are_bitwise_deterministic() {
        let p = init_params(7, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let w = tiny_window(&mut rng, 5, 4);
        let batch: Vec<Sample> = vec![(&w, 1)];
        let run = || {
            let cache = forward(&p, &w).unwrap().1;
            (cache.probs(), backward(&p, &batch, &[cache]))
        };
        assert_eq!(run(), run());
    }

    /// Manual throughput probe for the production shape (H=50, F=11,
    /// W=5, batch 64): run with `cargo test -- --ignored --nocapture`.
    #[test]
    #[ignore = "manual benchmark"]
    fn bench_train_step_throughput() {
        let hidden = 50;
        let features = 11;
        let steps = 5;
        let batch_n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_params(hidden, features, 2);
        let windows: Vec<Vec<f64>> = (0..batch_n)
            .map(|_| tiny_window(&mut rng, steps, features))
            .collect();
        let batch: Vec<Sample> = windows
            .iter()
            .map(|w| (w.as_slice(), rng.random_range(0..N_CLASSES)))
            .collect();
        let mut eval = BatchEvaluator::new(hidden, features, steps);
        let mut adam = AdamState::new(p.flatten().len());
        let mut clipped = vec![0.0; p.flatten().len()];
        // Warm up, then time.
        for _ in 0..5 {
            let _ = eval.grad_mean_loss(&p, &batch);
        }
        let iters = 200;
        let start = std::time::Instant::now();
        for _ in 0..iters {
            let (grad, _) = eval.grad_mean_loss(&p, &batch);
            clipped.copy_from_slice(grad);
            clip_global_norm(&mut clipped, GRAD_CLIP_NORM);
            adam_step(&mut p, &clipped, &mut adam, 1e-3).unwrap();
        }
        let elapsed = start.elapsed().as_secs_f64();
        let per_sample = elapsed / (iters * batch_n) as f64 * 1e6;
        println!(
            "train step: {:.1} µs/sample ({:.2} ms/batch of {batch_n})",
            per_sample,
            elapsed / iters as f64 * 1e3
        );

        let start = std::time::Instant::now();
        for _ in 0..iters {
            for w in &windows {
                let _ = forward_probs(&p, w).unwrap();
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "inference (per sample): {:.1} µs/sample",
            elapsed / (iters * batch_n) as f64 * 1e6
        );

        let refs: Vec<&[f64]> = windows.iter().map(|w| w.as_slice()).collect();
        let start = std::time::Instant::now();
        for _ in 0..iters {
            let _ = probs_batch(&p, &refs).unwrap();
        }
        let elapsed = start.elapsed().as_secs_f64();
        println!(
            "inference (tiled): {:.1} µs/sample",
            elapsed / (iters * batch_n) as f64 * 1e6
        );
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = init_params(6, 5, 123);
        save_checkpoint(&path, &p).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(p, loaded);
        // Saving the loaded model reproduces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = init_params(3, 2, 9);
        save_checkpoint(&path, &p).unwrap();

        let good = std::fs::read(&path).unwrap();
        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        std::fs::write(&path, bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));

        let truncated = &good[..good.len() - 8];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::PayloadLength { .. })
        ));

        let bad_tag = {
            let mut b = good.clone();
            b[20] = b'x';
            b
        };
        std::fs::write(&path, bad_tag).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadGateTag(_))
        ));
    }
}
