//! The 632-512-512-88 feed-forward network: forward pass, masked ternary
//! cross-entropy, analytic gradients, the ADAM loop, and model files.
//!
//! Unknown-labeled pitches are masked out of the loss entirely, so the
//! network is never penalized for onsets that sit one or two frames away
//! from the window center. Everything runs at 64 bits; model files persist
//! 32-bit tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::cqt::CqtConfig;
use crate::datagen::{self, DatagenConfig, Ternary, TernaryLabel, TrainingExample};
use crate::error::{Error, Result};

/// Flattened reading-window size (8 frames × 79 bins).
pub const INPUT_DIM: usize = 632;
/// Width of both hidden layers.
pub const HIDDEN_DIM: usize = 512;
/// One output per piano key.
pub const OUTPUT_DIM: usize = 88;

/// Magic tag of the model file format.
pub const MODEL_MAGIC: &[u8; 4] = b"ONNW";
const MODEL_VERSION: u32 = 1;

#[inline]
pub(crate) fn softsign(z: f64) -> f64 {
    z / (1.0 + z.abs())
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Weights and biases. `w1` is 512×632, `w2` 512×512, `w3` 88×512; layer
/// output is `activation(W·x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Parameter-shaped tensors; used for gradients and ADAM moments.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl Gradients {
    pub fn zeros() -> Self {
        Gradients {
            w1: Array2::zeros((HIDDEN_DIM, INPUT_DIM)),
            b1: Array1::zeros(HIDDEN_DIM),
            w2: Array2::zeros((HIDDEN_DIM, HIDDEN_DIM)),
            b2: Array1::zeros(HIDDEN_DIM),
            w3: Array2::zeros((OUTPUT_DIM, HIDDEN_DIM)),
            b3: Array1::zeros(OUTPUT_DIM),
        }
    }
}

/// Uniform fan-based initialization: weights from
/// ±sqrt(6 / (fan_in + fan_out)), biases zero. Deterministic per RNG state.
pub fn init_params(rng: &mut impl Rng) -> NetworkParams {
    let mut layer = |rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
    };
    let w1 = layer(HIDDEN_DIM, INPUT_DIM);
    let w2 = layer(HIDDEN_DIM, HIDDEN_DIM);
    let w3 = layer(OUTPUT_DIM, HIDDEN_DIM);
    NetworkParams {
        w1,
        b1: Array1::zeros(HIDDEN_DIM),
        w2,
        b2: Array1::zeros(HIDDEN_DIM),
        w3,
        b3: Array1::zeros(OUTPUT_DIM),
    }
}

/// Activations of a batched forward pass.
pub struct ForwardPass {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    /// Sigmoid outputs in (0, 1), one row per example.
    pub outputs: Array2<f64>,
}

/// Runs a batch (rows are flattened reading windows) through the network.
pub fn forward_batch(params: &NetworkParams, x: &Array2<f64>) -> ForwardPass {
    assert_eq!(x.ncols(), INPUT_DIM, "network input must be {INPUT_DIM} wide");
    let mut h1 = x.dot(&params.w1.t());
    h1 += &params.b1;
    h1.mapv_inplace(softsign);
    let mut h2 = h1.dot(&params.w2.t());
    h2 += &params.b2;
    h2.mapv_inplace(softsign);
    let mut outputs = h2.dot(&params.w3.t());
    outputs += &params.b3;
    outputs.mapv_inplace(sigmoid);
    ForwardPass { h1, h2, outputs }
}

/// Single-window forward pass.
pub fn forward(params: &NetworkParams, window: &[f64]) -> Result<[f64; OUTPUT_DIM]> {
    if window.len() != INPUT_DIM {
        return Err(Error::invalid(format!(
            "network: input has {} values, expected {INPUT_DIM}",
            window.len()
        )));
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("network: non-finite input value"));
    }
    let x = Array2::from_shape_vec((1, INPUT_DIM), window.to_vec()).unwrap();
    let pass = forward_batch(params, &x);
    let row = pass.outputs.row(0);
    Ok(std::array::from_fn(|i| row[i]))
}

const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy over the non-unknown pitches of one example. Unknown
/// labels contribute exactly zero regardless of the output.
pub fn masked_loss(outputs: &[f64], labels: &TernaryLabel) -> f64 {
    assert_eq!(outputs.len(), OUTPUT_DIM);
    let mut loss = 0.0;
    for (p, t) in outputs.iter().zip(&labels.0) {
        match t {
            Ternary::Unknown => {}
            Ternary::True => loss -= p.max(PROB_FLOOR).ln(),
            Ternary::False => loss -= (1.0 - p).max(PROB_FLOOR).ln(),
        }
    }
    loss
}

/// A batch laid out for the network: windows, encoded targets, loss mask.
pub struct Batch {
    pub x: Array2<f64>,
    /// Encoded labels (1, ½, 0); the ½ entries are masked out.
    pub y: Array2<f64>,
    /// 1.0 where the label participates in the loss, 0.0 at unknowns.
    pub mask: Array2<f64>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::invalid("network: empty batch"));
        }
        let n = examples.len();
        let mut x = Array2::zeros((n, INPUT_DIM));
        let mut y = Array2::zeros((n, OUTPUT_DIM));
        let mut mask = Array2::zeros((n, OUTPUT_DIM));
        for (i, ex) in examples.iter().enumerate() {
            if ex.window.len() != INPUT_DIM {
                return Err(Error::invalid(format!(
                    "network: example {i} has window length {}, expected {INPUT_DIM}",
                    ex.window.len()
                )));
            }
            x.row_mut(i)
                .iter_mut()
                .zip(&ex.window)
                .for_each(|(slot, &v)| *slot = v);
            for (j, t) in ex.labels.0.iter().enumerate() {
                y[(i, j)] = t.encoded();
                mask[(i, j)] = if *t == Ternary::Unknown { 0.0 } else { 1.0 };
            }
        }
        Ok(Batch { x, y, mask })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn l2_sum(params: &NetworkParams) -> f64 {
    [&params.w1, &params.w2, &params.w3]
        .iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

fn masked_ce(outputs: &Array2<f64>, y: &Array2<f64>, mask: &Array2<f64>) -> f64 {
    let mut loss = 0.0;
    for ((p, &t), &m) in outputs.iter().zip(y.iter()).zip(mask.iter()) {
        if m == 0.0 {
            continue;
        }
        loss -= if t >= 0.5 {
            p.max(PROB_FLOOR).ln()
        } else {
            (1.0 - p).max(PROB_FLOOR).ln()
        };
    }
    loss / outputs.nrows() as f64
}

/// The training objective: mean masked cross-entropy over the batch plus
/// `l2_lambda · Σw²` (weights only, not biases).
pub fn batch_objective(params: &NetworkParams, batch: &Batch, l2_lambda: f64) -> f64 {
    let pass = forward_batch(params, &batch.x);
    masked_ce(&pass.outputs, &batch.y, &batch.mask) + l2_lambda * l2_sum(params)
}

/// Analytic gradient of [`batch_objective`]; also returns the objective.
pub fn gradient(params: &NetworkParams, batch: &Batch, l2_lambda: f64) -> (Gradients, f64) {
    let n = batch.len() as f64;
    let pass = forward_batch(params, &batch.x);
    let loss = masked_ce(&pass.outputs, &batch.y, &batch.mask) + l2_lambda * l2_sum(params);

    // d(objective)/d(logit) of the sigmoid + masked CE head
    let mut dz3 = &pass.outputs - &batch.y;
    dz3 *= &batch.mask;
    dz3 /= n;

    let gb3 = dz3.sum_axis(Axis(0));
    let mut gw3 = dz3.t().dot(&pass.h2);
    gw3.scaled_add(2.0 * l2_lambda, &params.w3);

    let mut dz2 = dz3.dot(&params.w3);
    dz2.zip_mut_with(&pass.h2, |d, &h| {
        let s = 1.0 - h.abs();
        *d *= s * s; // softsign'(z) = (1 - |softsign(z)|)^2
    });
    let gb2 = dz2.sum_axis(Axis(0));
    let mut gw2 = dz2.t().dot(&pass.h1);
    gw2.scaled_add(2.0 * l2_lambda, &params.w2);

    let mut dz1 = dz2.dot(&params.w2);
    dz1.zip_mut_with(&pass.h1, |d, &h| {
        let s = 1.0 - h.abs();
        *d *= s * s;
    });
    let gb1 = dz1.sum_axis(Axis(0));
    let mut gw1 = dz1.t().dot(&batch.x);
    gw1.scaled_add(2.0 * l2_lambda, &params.w1);

    (Gradients { w1: gw1, b1: gb1, w2: gw2, b2: gb2, w3: gw3, b3: gb3 }, loss)
}

/// Optimizer hyperparameters and run length. Defaults give the
/// full-scale training setup (1.5 million iterations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub l2_lambda: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Metrics are recorded every this many iterations.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            l2_lambda: 5e-10,
            iterations: 1_500_000,
            seed: 0,
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train: learning_rate must be positive"));
        }
        for (beta, name) in [(self.adam_beta1, "beta1"), (self.adam_beta2, "beta2")] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::invalid(format!("train: adam_{name} must be in [0, 1)")));
            }
        }
        if !self.adam_epsilon.is_finite() || self.adam_epsilon <= 0.0 {
            return Err(Error::invalid("train: adam_epsilon must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train: batch_size must be >= 1"));
        }
        if !self.l2_lambda.is_finite() || self.l2_lambda < 0.0 {
            return Err(Error::invalid("train: l2_lambda must be >= 0"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("train: log_every must be >= 1"));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter.
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { m: Gradients::zeros(), v: Gradients::zeros(), t: 0 }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One bias-corrected ADAM update, in place.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let bc1 = 1.0 - cfg.adam_beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.adam_beta2.powi(state.t as i32);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    };
    update(
        params.w1.as_slice_mut().unwrap(),
        grads.w1.as_slice().unwrap(),
        state.m.w1.as_slice_mut().unwrap(),
        state.v.w1.as_slice_mut().unwrap(),
    );
    update(
        params.b1.as_slice_mut().unwrap(),
        grads.b1.as_slice().unwrap(),
        state.m.b1.as_slice_mut().unwrap(),
        state.v.b1.as_slice_mut().unwrap(),
    );
    update(
        params.w2.as_slice_mut().unwrap(),
        grads.w2.as_slice().unwrap(),
        state.m.w2.as_slice_mut().unwrap(),
        state.v.w2.as_slice_mut().unwrap(),
    );
    update(
        params.b2.as_slice_mut().unwrap(),
        grads.b2.as_slice().unwrap(),
        state.m.b2.as_slice_mut().unwrap(),
        state.v.b2.as_slice_mut().unwrap(),
    );
    update(
        params.w3.as_slice_mut().unwrap(),
        grads.w3.as_slice().unwrap(),
        state.m.w3.as_slice_mut().unwrap(),
        state.v.w3.as_slice_mut().unwrap(),
    );
    update(
        params.b3.as_slice_mut().unwrap(),
        grads.b3.as_slice().unwrap(),
        state.m.b3.as_slice_mut().unwrap(),
        state.v.b3.as_slice_mut().unwrap(),
    );
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: f64,
}

/// Full training loop: generate a batch, take the gradient, apply ADAM.
///
/// Parameter initialization and data generation draw from separate streams
/// of a ChaCha generator seeded with `train.seed`, so runs are bit-for-bit
/// reproducible. The observer fires at every logging point with the current
/// iteration, batch loss, and parameters.
pub fn train(
    set: &BasisSet,
    datagen_cfg: &DatagenConfig,
    train_cfg: &TrainConfig,
    mut observer: impl FnMut(u64, f64, &NetworkParams),
) -> Result<(NetworkParams, Vec<MetricsRow>)> {
    datagen_cfg.validate()?;
    train_cfg.validate()?;
    if set.config().bins != datagen::WINDOW_BINS {
        return Err(Error::invalid(format!(
            "train: basis has {} bins, the network needs {}",
            set.config().bins,
            datagen::WINDOW_BINS
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = init_params(&mut init_rng);
    let mut data_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    data_rng.set_stream(1);

    let mut state = AdamState::new();
    let mut metrics = Vec::new();
    for iter in 1..=train_cfg.iterations {
        let examples = datagen::generate_batch(&mut data_rng, set, datagen_cfg, train_cfg.batch_size);
        let batch = Batch::from_examples(&examples)?;
        let (grads, loss) = gradient(&params, &batch, train_cfg.l2_lambda);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: loss became non-finite at iteration {iter}"
            )));
        }
        adam_step(&mut params, &grads, &mut state, train_cfg);
        if iter % train_cfg.log_every == 0 || iter == train_cfg.iterations {
            metrics.push(MetricsRow { iteration: iter, train_loss: loss });
            observer(iter, loss, &params);
        }
    }
    Ok((params, metrics))
}

/// Identifies the transform a model was trained against. Stored in the
/// model file and checked before transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct CqtFingerprint {
    pub min_freq: f64,
    pub bins: u32,
    pub hop: u32,
    pub q_factor: f64,
    pub sample_rate: f64,
}

impl From<&CqtConfig> for CqtFingerprint {
    fn from(cfg: &CqtConfig) -> Self {
        CqtFingerprint {
            min_freq: cfg.min_freq,
            bins: cfg.bins as u32,
            hop: cfg.hop as u32,
            q_factor: cfg.q_factor,
            sample_rate: cfg.sample_rate,
        }
    }
}

impl CqtFingerprint {
    pub fn matches(&self, cfg: &CqtConfig) -> bool {
        *self == CqtFingerprint::from(cfg)
    }
}

fn tensor_dims() -> [u32; 4] {
    [INPUT_DIM as u32, HIDDEN_DIM as u32, HIDDEN_DIM as u32, OUTPUT_DIM as u32]
}

/// Writes the model: layer dimensions, f32 tensors in declared order, and
/// the transform fingerprint.
pub fn save_model(
    params: &NetworkParams,
    fingerprint: &CqtFingerprint,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LE>(MODEL_VERSION)?;
    for dim in tensor_dims() {
        w.write_u32::<LE>(dim)?;
    }
    for tensor in [
        params.w1.as_slice().unwrap(),
        params.b1.as_slice().unwrap(),
        params.w2.as_slice().unwrap(),
        params.b2.as_slice().unwrap(),
        params.w3.as_slice().unwrap(),
        params.b3.as_slice().unwrap(),
    ] {
        for &v in tensor {
            w.write_f32::<LE>(v as f32)?;
        }
    }
    w.write_f64::<LE>(fingerprint.min_freq)?;
    w.write_u32::<LE>(fingerprint.bins)?;
    w.write_u32::<LE>(fingerprint.hop)?;
    w.write_f64::<LE>(fingerprint.q_factor)?;
    w.write_f64::<LE>(fingerprint.sample_rate)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetworkParams, CqtFingerprint)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let fail = |reason: &str| Error::format(path, reason);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail("truncated model header"))?;
    if &magic != MODEL_MAGIC {
        return Err(fail("bad magic (expected ONNW)"));
    }
    let version = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
    if version != MODEL_VERSION {
        return Err(fail(&format!("unsupported model version {version}")));
    }
    let mut dims = [0u32; 4];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
    }
    if dims != tensor_dims() {
        return Err(fail(&format!(
            "model topology {dims:?} does not match the expected {:?}",
            tensor_dims()
        )));
    }
    let mut read_tensor = |len: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let v = r.read_f32::<LE>().map_err(|_| fail("truncated tensor data"))? as f64;
            if !v.is_finite() {
                return Err(fail("non-finite model parameter"));
            }
            out.push(v);
        }
        Ok(out)
    };
    let w1 = read_tensor(HIDDEN_DIM * INPUT_DIM)?;
    let b1 = read_tensor(HIDDEN_DIM)?;
    let w2 = read_tensor(HIDDEN_DIM * HIDDEN_DIM)?;
    let b2 = read_tensor(HIDDEN_DIM)?;
    let w3 = read_tensor(OUTPUT_DIM * HIDDEN_DIM)?;
    let b3 = read_tensor(OUTPUT_DIM)?;
    let params = NetworkParams {
        w1: Array2::from_shape_vec((HIDDEN_DIM, INPUT_DIM), w1).unwrap(),
        b1: Array1::from_vec(b1),
        w2: Array2::from_shape_vec((HIDDEN_DIM, HIDDEN_DIM), w2).unwrap(),
        b2: Array1::from_vec(b2),
        w3: Array2::from_shape_vec((OUTPUT_DIM, HIDDEN_DIM), w3).unwrap(),
        b3: Array1::from_vec(b3),
    };
    let fingerprint = CqtFingerprint {
        min_freq: r.read_f64::<LE>().map_err(|_| fail("truncated fingerprint"))?,
        bins: r.read_u32::<LE>().map_err(|_| fail("truncated fingerprint"))?,
        hop: r.read_u32::<LE>().map_err(|_| fail("truncated fingerprint"))?,
        q_factor: r.read_f64::<LE>().map_err(|_| fail("truncated fingerprint"))?,
        sample_rate: r.read_f64::<LE>().map_err(|_| fail("truncated fingerprint"))?,
    };
    Ok((params, fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::fake_basis_set;

    fn random_example(rng: &mut impl Rng, with_unknowns: bool) -> TrainingExample {
        let mut window: Vec<f64> = (0..INPUT_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
        let max = window.iter().cloned().fold(0.0, f64::max);
        window.iter_mut().for_each(|v| *v /= max);
        let mut labels = TernaryLabel::all_false();
        for t in labels.0.iter_mut() {
            let u: f64 = rng.random_range(0.0..1.0);
            *t = if with_unknowns && u < 0.3 {
                Ternary::Unknown
            } else if u < 0.6 {
                Ternary::True
            } else {
                Ternary::False
            };
        }
        TrainingExample { window, labels }
    }

    fn random_batch(seed: u64, n: usize, with_unknowns: bool) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples: Vec<_> = (0..n).map(|_| random_example(&mut rng, with_unknowns)).collect();
        Batch::from_examples(&examples).unwrap()
    }

    #[test]
    fn softsign_and_sigmoid_reference_values() {
        assert_eq!(softsign(1.0), 0.5);
        assert_eq!(softsign(-1.0), -0.5);
        assert_eq!(softsign(0.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let a = init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let b = init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.b1.iter().chain(a.b2.iter()).chain(a.b3.iter()).all(|&v| v == 0.0));
        let bound = (6.0 / (INPUT_DIM + HIDDEN_DIM) as f64).sqrt();
        assert!((bound - 0.0724).abs() < 1e-3);
        assert!(a.w1.iter().all(|&v| v.abs() <= bound));
        let c = init_params(&mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, c);
    }

    #[test]
    fn zero_params_output_one_half_everywhere() {
        let params = NetworkParams {
            w1: Array2::zeros((HIDDEN_DIM, INPUT_DIM)),
            b1: Array1::zeros(HIDDEN_DIM),
            w2: Array2::zeros((HIDDEN_DIM, HIDDEN_DIM)),
            b2: Array1::zeros(HIDDEN_DIM),
            w3: Array2::zeros((OUTPUT_DIM, HIDDEN_DIM)),
            b3: Array1::zeros(OUTPUT_DIM),
        };
        let out = forward(&params, &vec![0.3; INPUT_DIM]).unwrap();
        assert!(out.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn outputs_stay_strictly_inside_unit_interval() {
        let params = init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let window: Vec<f64> = (0..INPUT_DIM).map(|_| rng.random_range(-1.0..2.0)).collect();
            let out = forward(&params, &window).unwrap();
            assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(forward(&params, &vec![f64::NAN; INPUT_DIM]).is_err());
        assert!(forward(&params, &[0.0; 3]).is_err());
    }

    #[test]
    fn unknown_labels_never_touch_the_loss() {
        let all_unknown = TernaryLabel([Ternary::Unknown; OUTPUT_DIM]);
        let outputs: Vec<f64> = (0..OUTPUT_DIM).map(|i| (i as f64 + 1.0) / 100.0).collect();
        assert_eq!(masked_loss(&outputs, &all_unknown), 0.0);

        let mut labels = TernaryLabel::all_false();
        labels.0[10] = Ternary::True;
        labels.0[20] = Ternary::Unknown;
        let mut outputs = vec![0.1; OUTPUT_DIM];
        outputs[10] = 0.9;
        let base = masked_loss(&outputs, &labels);
        outputs[20] = 0.999; // perturb a masked position
        assert_eq!(masked_loss(&outputs, &labels), base);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut labels = TernaryLabel([Ternary::Unknown; OUTPUT_DIM]);
        labels.0[0] = Ternary::True;
        let mut outputs = vec![0.5; OUTPUT_DIM];
        assert!((masked_loss(&outputs, &labels) - std::f64::consts::LN_2).abs() < 1e-12);
        outputs[0] = 1.0 - 1e-9;
        assert!(masked_loss(&outputs, &labels) < 1e-8);
    }

    #[test]
    fn all_unknown_batch_with_no_l2_has_zero_gradient() {
        let mut batch = random_batch(5, 4, false);
        batch.mask.fill(0.0);
        let params = init_params(&mut ChaCha8Rng::seed_from_u64(6));
        let (grads, loss) = gradient(&params, &batch, 0.0);
        assert_eq!(loss, 0.0);
        for g in [&grads.w1, &grads.w2, &grads.w3] {
            assert!(g.iter().all(|&v| v == 0.0));
        }
        for g in [&grads.b1, &grads.b2, &grads.b3] {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l2_gradient_is_two_lambda_w_at_masked_batch() {
        let mut batch = random_batch(7, 2, false);
        batch.mask.fill(0.0);
        let params = init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let lambda = 0.37;
        let (grads, _) = gradient(&params, &batch, lambda);
        for (g, w) in [(&grads.w1, &params.w1), (&grads.w2, &params.w2), (&grads.w3, &params.w3)] {
            for (gv, wv) in g.iter().zip(w.iter()) {
                assert!((gv - 2.0 * lambda * wv).abs() < 1e-15);
            }
        }
        assert!(grads.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let batch = random_batch(9, 4, true);
        let mut params = init_params(&mut ChaCha8Rng::seed_from_u64(10));
        let lambda = 1e-4;
        let (grads, _) = gradient(&params, &batch, lambda);
        let step = 1e-5;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        // sampled coordinates in every tensor, biases included
        for tensor in 0..6 {
            let len = match tensor {
                0 => HIDDEN_DIM * INPUT_DIM,
                1 => HIDDEN_DIM,
                2 => HIDDEN_DIM * HIDDEN_DIM,
                3 => HIDDEN_DIM,
                4 => OUTPUT_DIM * HIDDEN_DIM,
                _ => OUTPUT_DIM,
            };
            for _ in 0..8 {
                let i = rng.random_range(0..len);
                let slot = |p: &mut NetworkParams| -> *mut f64 {
                    match tensor {
                        0 => &mut p.w1.as_slice_mut().unwrap()[i],
                        1 => &mut p.b1.as_slice_mut().unwrap()[i],
                        2 => &mut p.w2.as_slice_mut().unwrap()[i],
                        3 => &mut p.b2.as_slice_mut().unwrap()[i],
                        4 => &mut p.w3.as_slice_mut().unwrap()[i],
                        _ => &mut p.b3.as_slice_mut().unwrap()[i],
                    }
                };
                let analytic = match tensor {
                    0 => grads.w1.as_slice().unwrap()[i],
                    1 => grads.b1.as_slice().unwrap()[i],
                    2 => grads.w2.as_slice().unwrap()[i],
                    3 => grads.b2.as_slice().unwrap()[i],
                    4 => grads.w3.as_slice().unwrap()[i],
                    _ => grads.b3.as_slice().unwrap()[i],
                };
                let numeric = unsafe {
                    let p = slot(&mut params);
                    let orig = *p;
                    *p = orig + step;
                    let up = batch_objective(&params, &batch, lambda);
                    *p = orig - step;
                    let down = batch_objective(&params, &batch, lambda);
                    *p = orig;
                    (up - down) / (2.0 * step)
                };
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = init_params(&mut ChaCha8Rng::seed_from_u64(12));
        let before = params.clone();
        let mut state = AdamState::new();
        adam_step(&mut params, &Gradients::zeros(), &mut state, &TrainConfig::default());
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_about_the_learning_rate() {
        let mut params = init_params(&mut ChaCha8Rng::seed_from_u64(13));
        let before = params.clone();
        let mut grads = Gradients::zeros();
        grads.w1.fill(0.25);
        let cfg = TrainConfig::default();
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &cfg);
        for (after, prior) in params.w1.iter().zip(before.w1.iter()) {
            let delta = prior - after;
            assert!((delta - cfg.learning_rate).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_iterations_returns_init() {
        let set = fake_basis_set();
        let dg = DatagenConfig::default();
        let tc = TrainConfig { iterations: 20, seed: 1, log_every: 5, ..TrainConfig::default() };
        let (a, metrics_a) = train(&set, &dg, &tc, |_, _, _| {}).unwrap();
        let (b, _) = train(&set, &dg, &tc, |_, _, _| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_a.len(), 4);

        let tc0 = TrainConfig { iterations: 0, ..tc };
        let (p0, metrics0) = train(&set, &dg, &tc0, |_, _, _| {}).unwrap();
        assert_eq!(p0, init_params(&mut ChaCha8Rng::seed_from_u64(1)));
        assert!(metrics0.is_empty());
    }

    #[test]
    fn training_loss_trends_down_on_toy_data() {
        use crate::basis::{synth_toy_basis, BasisSet, ToyInstrument};

        assert_eq!(TrainConfig::default().iterations, 1_500_000);

        let cqt_cfg = CqtConfig::default();
        let inst = ToyInstrument { partials: 3, ..ToyInstrument::default() };
        let toy = synth_toy_basis(&cqt_cfg, 21, &inst, 90).unwrap();
        let set = BasisSet::new(vec![toy]).unwrap();
        let dg = DatagenConfig::default();

        // a fixed probe batch from its own stream, independent of training
        let mut probe_rng = ChaCha8Rng::seed_from_u64(77);
        let probe =
            Batch::from_examples(&datagen::generate_batch(&mut probe_rng, &set, &dg, 64)).unwrap();

        let tc = TrainConfig { iterations: 1000, seed: 3, log_every: 50, ..TrainConfig::default() };
        let mut series: Vec<(f64, f64)> = Vec::new();
        train(&set, &dg, &tc, |iter, _, params| {
            series.push((iter as f64, batch_objective(params, &probe, 0.0)));
        })
        .unwrap();
        assert_eq!(series.len(), 20);

        // least-squares slope of probe loss against iteration
        let n = series.len() as f64;
        let mx = series.iter().map(|p| p.0).sum::<f64>() / n;
        let my = series.iter().map(|p| p.1).sum::<f64>() / n;
        let slope: f64 = series.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / series.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "probe loss slope {slope}, series {series:?}");
    }

    #[test]
    fn divergence_aborts_with_a_numeric_error() {
        let set = fake_basis_set();
        let dg = DatagenConfig::default();
        // an absurd learning rate overflows the L2 term within a few steps
        let tc = TrainConfig {
            iterations: 10,
            seed: 2,
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        match train(&set, &dg, &tc, |_, _, _| {}) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("iteration")),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn model_file_round_trip_and_validation() {
        let params = init_params(&mut ChaCha8Rng::seed_from_u64(14));
        let fp = CqtFingerprint::from(&CqtConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.onnw");
        save_model(&params, &fp, &path).unwrap();

        let (loaded, fp2) = load_model(&path).unwrap();
        assert_eq!(fp, fp2);
        assert!(fp2.matches(&CqtConfig::default()));
        // values survive one f32 rounding; a reload is then exact
        for (a, b) in loaded.w1.iter().zip(params.w1.iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let bytes_a = std::fs::read(&path).unwrap();
        save_model(&loaded, &fp2, &path).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path).unwrap());

        // corrupt magic
        let mut bad = bytes_a.clone();
        bad[1] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));

        // wrong input width is refused
        let mut wrong = bytes_a.clone();
        wrong[8..12].copy_from_slice(&100u32.to_le_bytes());
        std::fs::write(&path, &wrong).unwrap();
        let err = load_model(&path).unwrap_err();
        assert!(err.to_string().contains("topology"));

        // truncation
        std::fs::write(&path, &bytes_a[..bytes_a.len() - 7]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }
}
