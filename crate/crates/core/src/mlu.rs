//! The fixed learned controller: a one-hidden-layer sigmoid network with a
//! linear output, its training loop, and LQR demonstration data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{atomic_write, Dataset};
use crate::error::{Error, Result};
use crate::plant::{self, ScenarioSampler, DEFAULT_DT, DEFAULT_REFERENCE};

/// Controller input order.
pub const FEATURES: [&str; 6] = ["m", "l", "r", "theta", "v", "q"];
pub const OUTPUT: &str = "f";
pub const HIDDEN_UNITS: usize = 70;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
}

/// `y = w2 · σ(W1 x + b1) + b2`, single output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    inputs: usize,
    hidden: usize,
    /// `hidden × inputs`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    train_config_fingerprint: String,
}

impl MlpModel {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        MlpModel {
            inputs,
            hidden,
            w1: vec![0.0; inputs * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            fingerprint: String::new(),
        }
    }

    pub fn from_weights(
        inputs: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self> {
        if w1.len() != inputs * hidden || b1.len() != hidden || w2.len() != hidden {
            return Err(Error::DimensionMismatch { expected: inputs * hidden, got: w1.len() });
        }
        if w1.iter().chain(&b1).chain(&w2).any(|v| !v.is_finite()) || !b2.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(MlpModel { inputs, hidden, w1, b1, w2, b2, fingerprint: String::new() })
    }

    /// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
    pub fn xavier<R: Rng + ?Sized>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(inputs, hidden);
        let a1 = (6.0 / (inputs + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        for w in &mut m.w1 {
            *w = rng.random_range(-a1..=a1);
        }
        for w in &mut m.w2 {
            *w = rng.random_range(-a2..=a2);
        }
        m
    }

    pub fn layer_sizes(&self) -> [usize; 3] {
        [self.inputs, self.hidden, 1]
    }

    pub fn input_dim(&self) -> usize {
        self.inputs
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Flat parameter vector: `w1, b1, w2, b2`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_parameters());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch { expected: self.num_parameters(), got: p.len() });
        }
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden);
        let (c, d) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
        Ok(())
    }

    /// Inference without input validation.
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut y = self.b2;
        for h in 0..self.hidden {
            let row = &self.w1[h * self.inputs..(h + 1) * self.inputs];
            let z = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            y += self.w2[h] * sigmoid(z);
        }
        y
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.inputs {
            return Err(Error::DimensionMismatch { expected: self.inputs, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(self.predict(x))
    }

    /// Mean squared error over `rows` (inputs followed by the target in the last column).
    pub fn mse(&self, data: &Dataset) -> Result<f64> {
        if data.dim() != self.inputs + 1 {
            return Err(Error::DimensionMismatch { expected: self.inputs + 1, got: data.dim() });
        }
        if data.is_empty() {
            return Err(Error::EmptyColumn);
        }
        let sum: f64 = data
            .rows()
            .map(|r| {
                let e = self.predict(&r[..self.inputs]) - r[self.inputs];
                e * e
            })
            .sum();
        Ok(sum / data.len() as f64)
    }

    /// Mean-squared-error loss and its gradient (flat, same layout as
    /// [`parameters`](Self::parameters)) over the given rows.
    pub fn loss_and_gradient<'a, I>(&self, rows: I, grad: &mut [f64]) -> f64
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (n_w1, h) = (self.w1.len(), self.hidden);
        let mut act = vec![0.0; h];
        let mut loss = 0.0;
        let mut count = 0usize;
        for r in rows {
            let x = &r[..self.inputs];
            let target = r[self.inputs];
            let mut y = self.b2;
            for j in 0..h {
                let row = &self.w1[j * self.inputs..(j + 1) * self.inputs];
                let z = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                act[j] = sigmoid(z);
                y += self.w2[j] * act[j];
            }
            let err = y - target;
            loss += err * err;
            count += 1;
            // d(err²)/dy
            let dy = 2.0 * err;
            let (g_w1, rest) = grad.split_at_mut(n_w1);
            let (g_b1, rest) = rest.split_at_mut(h);
            let (g_w2, g_b2) = rest.split_at_mut(h);
            g_b2[0] += dy;
            for j in 0..h {
                g_w2[j] += dy * act[j];
                let dz = dy * self.w2[j] * act[j] * (1.0 - act[j]);
                g_b1[j] += dz;
                let gw = &mut g_w1[j * self.inputs..(j + 1) * self.inputs];
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += dz * v;
                }
            }
        }
        if count == 0 {
            return 0.0;
        }
        let inv = 1.0 / count as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            layer_sizes: self.layer_sizes().to_vec(),
            activations: vec![Activation::Sigmoid, Activation::Linear],
            weights: vec![self.w1.clone(), self.w2.clone()],
            biases: vec![self.b1.clone(), vec![self.b2]],
            train_config_fingerprint: self.fingerprint.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(s)?;
        if f.layer_sizes.len() != 3 || f.layer_sizes[2] != 1 {
            return Err(Error::InvalidArgument(format!("unsupported layer sizes {:?}", f.layer_sizes)));
        }
        if f.activations != [Activation::Sigmoid, Activation::Linear] {
            return Err(Error::InvalidArgument(format!("unsupported activations {:?}", f.activations)));
        }
        if f.weights.len() != 2 || f.biases.len() != 2 || f.biases[1].len() != 1 {
            return Err(Error::InvalidArgument("model file needs two weight and bias arrays".into()));
        }
        let mut it_w = f.weights.into_iter();
        let mut it_b = f.biases.into_iter();
        let (w1, w2) = (it_w.next().unwrap_or_default(), it_w.next().unwrap_or_default());
        let (b1, b2) = (it_b.next().unwrap_or_default(), it_b.next().unwrap_or_default());
        let mut m = MlpModel::from_weights(f.layer_sizes[0], f.layer_sizes[1], w1, b1, w2, b2[0])?;
        m.fingerprint = f.train_config_fingerprint;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Free-function form of [`MlpModel::forward`].
pub fn forward(model: &MlpModel, x: &[f64]) -> Result<f64> {
    model.forward(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub validation_ratio: f64,
    /// Hard cap on epochs, reached only if early stopping never triggers.
    pub max_epochs: usize,
    pub hidden_units: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 1000,
            patience_epochs: 50,
            validation_ratio: 1.0 / 3.0,
            max_epochs: 3000,
            hidden_units: HIDDEN_UNITS,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.patience_epochs == 0 || self.hidden_units == 0 {
            return Err(Error::InvalidArgument("batch size, patience and hidden units must be positive".into()));
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(Error::InvalidArgument("validation ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        crate::fingerprint(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// LQR demonstrations: rows `[m, l, r, θ, v, q, f]`, sequences stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub seq_len: usize,
    /// Scenarios whose LQR design failed and were redrawn.
    pub redraws: usize,
}

impl DemoDataset {
    pub fn n_train_sequences(&self) -> usize {
        self.train.len() / self.seq_len
    }

    pub fn n_test_sequences(&self) -> usize {
        self.test.len() / self.seq_len
    }
}

pub fn demo_labels() -> Vec<String> {
    FEATURES.iter().chain(std::iter::once(&OUTPUT)).map(|s| s.to_string()).collect()
}

/// Roll LQR controllers on random bars and record `(x, f)` pairs.
pub fn generate_lqr_dataset(n_train_seq: usize, n_test_seq: usize, seq_len: usize, seed: u64) -> Result<DemoDataset> {
    generate_lqr_dataset_with(&ScenarioSampler::default(), n_train_seq, n_test_seq, seq_len, seed)
}

pub fn generate_lqr_dataset_with(
    sampler: &ScenarioSampler,
    n_train_seq: usize,
    n_test_seq: usize,
    seq_len: usize,
    seed: u64,
) -> Result<DemoDataset> {
    if n_train_seq == 0 || seq_len == 0 {
        return Err(Error::InvalidArgument("sequence counts and length must be positive".into()));
    }
    let labels = demo_labels();
    let mut train = Dataset::with_labels(&labels);
    let mut test = Dataset::with_labels(&labels);
    let mut redraws = 0;
    for seq in 0..n_train_seq + n_test_seq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(seq as u64);
        let (ep, design) = loop {
            let ep = sampler.sample(&mut rng);
            match plant::design_default(&ep.params) {
                Ok(d) => break (ep, d),
                Err(e) => {
                    redraws += 1;
                    log::warn!("sequence {seq}: LQR design failed ({e}), redrawing");
                }
            }
        };
        let traj = plant::rollout(
            &ep.params,
            |s| design.control(s, DEFAULT_REFERENCE),
            ep.initial,
            seq_len as f64 * DEFAULT_DT,
            DEFAULT_DT,
        )?;
        let out = if seq < n_train_seq { &mut train } else { &mut test };
        let (m, l) = (ep.params.pendulum_mass, ep.params.length);
        for (s, f) in traj.states.iter().zip(&traj.forces) {
            out.push_row(&[m, l, s.r, s.theta, s.v, s.q, *f])?;
        }
    }
    if redraws > 0 {
        log::info!("{redraws} scenario(s) redrawn after LQR failure");
    }
    Ok(DemoDataset { train, test, seq_len, redraws })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test_mse: Option<f64>,
    pub stopped_early: bool,
}

/// Mini-batch gradient descent with early stopping on a sequence-level validation split.
///
/// The last `validation_ratio` of the training sequences are held out. The
/// returned model is the snapshot with the lowest validation loss.
pub fn train_mlp(data: &DemoDataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainingLog)> {
    cfg.validate()?;
    let n_seq = data.n_train_sequences();
    let n_val = ((n_seq as f64) * cfg.validation_ratio).round() as usize;
    if n_seq < 2 || n_val == 0 || n_val >= n_seq {
        return Err(Error::InvalidArgument(format!("cannot split {n_seq} sequences for validation")));
    }
    let split = (n_seq - n_val) * data.seq_len;
    let d = data.train.dim();
    let rows = data.train.as_slice();
    let (fit_rows, val_rows) = rows.split_at(split * d);
    let val = Dataset::new(data.train.labels().to_vec(), val_rows.to_vec())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::xavier(d - 1, cfg.hidden_units, &mut rng);
    model.fingerprint = cfg.fingerprint();

    let mut params = model.parameters();
    let mut grad = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..split).collect();
    let mut best = model.clone();
    let mut best_val = model.mse(&val)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = model.loss_and_gradient(batch.iter().map(|&i| &fit_rows[i * d..(i + 1) * d]), &mut grad);
            train_loss += loss * batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            model.set_parameters(&params)?;
        }
        train_loss /= split as f64;
        let val_loss = model.mse(&val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        epochs.push(EpochLog { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience_epochs {
            stopped_early = true;
            break;
        }
        if epoch % 50 == 0 {
            log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        }
    }
    let test_mse = if data.test.is_empty() { None } else { Some(best.mse(&data.test)?) };
    Ok((best, TrainingLog { epochs, best_epoch, best_val_loss: best_val, test_mse, stopped_early }))
}
