//! Synthetic data generation, MSE loss, ADAM with per-epoch exponential
//! learning-rate decay, and the training loop for [`NetworkParams`].

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::DiagonalGram;
use crate::error::{Error, Result};
use crate::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel, RealSystem, SnrConvention,
    TransmitFrame,
};
use crate::unfolded::{forward_soft_with_gram, param_gradients, NetworkParams};

/// Per-epoch learning-rate decay factor.
pub const LR_DECAY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_antennas: usize,
    pub n_users: usize,
    pub n_layers: usize,
    pub modulation: Modulation,
    /// Closed interval the per-sample SNR (dB) is drawn from uniformly.
    pub snr_range_db: [f64; 2],
    pub snr_convention: SnrConvention,
    pub lr0: f64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_antennas: 128,
            n_users: 8,
            n_layers: 8,
            modulation: Modulation::Qpsk,
            snr_range_db: [-1.0, 21.0],
            snr_convention: SnrConvention::Receive,
            lr0: 1e-4,
            batch_size: 5000,
            n_train: 20000,
            n_epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_antennas < self.n_users {
            return Err(Error::Config(format!(
                "need n_antennas >= n_users >= 1, got {} and {}",
                self.n_antennas, self.n_users
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..=n_train ({})",
                self.batch_size, self.n_train
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!(
                "snr_range_db [{lo}, {hi}] is not an interval"
            )));
        }
        Ok(())
    }

    /// Full mini-batches per epoch; a trailing partial batch is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.n_train / self.batch_size
    }
}

/// One synthetic training example.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub system: RealSystem,
    pub frame: TransmitFrame,
    pub snr_db: f64,
}

/// Fresh channel, uniform bits and an SNR drawn uniformly (in dB) from the
/// configured range.
pub fn generate_sample<R: Rng + ?Sized>(
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let c = Constellation::new(config.modulation);
    let [lo, hi] = config.snr_range_db;
    let snr_db = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let h = ComplexChannel::generate(config.n_antennas, config.n_users, rng)?.to_real();
    let frame = c.modulate(&c.random_bits(config.n_users, rng))?;
    let system = awgn_receive(
        &h,
        &frame.x,
        NoiseLevel::SnrDb {
            snr_db,
            convention: config.snr_convention,
        },
        rng,
    )?;
    Ok(TrainingSample {
        system,
        frame,
        snr_db,
    })
}

/// `(1 / 2K) * sum (x_i - x_hat_i)^2`.
pub fn mse_loss(x_true: &DVector<f64>, x_hat: &DVector<f64>) -> Result<f64> {
    if x_true.len() != x_hat.len() || x_true.is_empty() {
        return Err(Error::Length {
            expected: x_true.len(),
            got: x_hat.len(),
        });
    }
    Ok((x_true - x_hat).norm_squared() / x_true.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `x_hat`: `(x_hat - x) / K`.
pub fn mse_grad(x_true: &DVector<f64>, x_hat: &DVector<f64>) -> DVector<f64> {
    (x_hat - x_true) * (2.0 / x_true.len() as f64)
}

pub fn lr_schedule(lr0: f64, epoch: usize) -> f64 {
    lr0 * LR_DECAY.powi(epoch as i32)
}

/// Bias-corrected ADAM moments over the flattened trainable set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One ADAM update of the trainable parameters. `grads` follows
/// [`NetworkParams::trainable_vector`] ordering, so the fixed first layer is
/// never touched.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let len = params.trainable_len();
    if grads.len() != len || state.m.len() != len || state.v.len() != len {
        return Err(Error::Length {
            expected: len,
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            history: Vec::new(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let mut theta = params.trainable_vector();
    for i in 0..len {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    params.set_trainable(&theta)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

struct Example {
    gram: DiagonalGram,
    x: DVector<f64>,
}

fn build_dataset(config: &TrainConfig) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_train)
        .map(|_| {
            let sample = generate_sample(config, &mut rng)?;
            Ok(Example {
                gram: DiagonalGram::precompute(&sample.system)?,
                x: sample.frame.x,
            })
        })
        .collect()
}

/// Mean loss and mean gradient over `batch`, summed in index order.
fn batch_gradient(
    batch: &[usize],
    data: &[Example],
    c: &Constellation,
    params: &NetworkParams,
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.trainable_len()];
    for &i in batch {
        let ex = &data[i];
        let (out, tape) = forward_soft_with_gram(&ex.gram, c, params);
        loss += mse_loss(&ex.x, &out)?;
        let g = param_gradients(&tape, params, &mse_grad(&ex.x, &out))?;
        for (acc, gi) in grad.iter_mut().zip(g.trainable_vector()) {
            *acc += gi;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Train from the default initialization.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(config, |_| {})
}

/// Train, calling `observe` after each epoch.
pub fn train_with_observer(
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = NetworkParams::init(config.modulation, config.n_users, config.n_layers)?;
    let mut history = Vec::with_capacity(config.n_epochs);
    if config.n_epochs == 0 {
        return Ok(TrainOutcome { params, history });
    }

    let c = Constellation::new(config.modulation);
    let data = build_dataset(config)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = AdamState::new(params.trainable_len());
    let n_batches = config.batches_per_epoch();

    for epoch in 0..config.n_epochs {
        let lr = lr_schedule(config.lr0, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks_exact(config.batch_size).take(n_batches) {
            let (loss, grad) = batch_gradient(batch, &data, &c, &params)?;
            let diverged = || Error::Divergence {
                epoch,
                history: history.iter().map(|e: &EpochLog| e.mean_loss).collect(),
            };
            if !loss.is_finite() {
                return Err(diverged());
            }
            adam_step(&mut params, &grad, &mut adam, lr).map_err(|e| match e {
                Error::Divergence { .. } => diverged(),
                other => other,
            })?;
            epoch_loss += loss;
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: epoch_loss / n_batches as f64,
        };
        observe(&entry);
        history.push(entry);
    }
    Ok(TrainOutcome { params, history })
}
