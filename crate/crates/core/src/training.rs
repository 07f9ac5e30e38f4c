//! Loss functions, Adam and the training loop.
//!
//! Losses are computed in standardized space and normalized per
//! window-step, so `loss = -(1 / (N h)) Σ_t Σ_τ log p(y_{t+τ} | x_t)`.
//! The un-normalized sum differs by the constant `N h`, which only rescales
//! the gradient.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{Standardizer, Window};
use crate::likelihood::log_pdf_var;
use crate::nets::{HeadOutputs, ModelState, NetsError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training windows")]
    NoWindows,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("window {window} has width {actual}, expected {expected}")]
    WindowShape {
        window: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite loss contribution from window {window}")]
    NonFiniteLoss { window: usize },
    #[error("loss kind does not match the model's output heads")]
    WrongHeads,
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Parameters after the last epoch that finished with a finite loss.
        checkpoint: Box<ModelState>,
        log: TrainLog,
    },
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    /// Reshuffle window order each epoch (seeded).
    pub shuffle: bool,
    pub seed: u64,
    pub gradient_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: None,
            shuffle: false,
            seed: 0,
            gradient_clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return err("adam epsilon must be positive");
        }
        if self.batch_size == Some(0) {
            return err("batch size must be positive");
        }
        if let Some(c) = self.gradient_clip_norm {
            if !(c > 0.0) {
                return err("clip norm must be positive");
            }
        }
        Ok(())
    }
}

/// Standardized inputs and targets for a set of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, c]`
    pub x: Tensor,
    /// `[N, h]`
    pub y: Tensor,
    /// Caller's index of each row, used in error reports.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(standardizer: &Standardizer, windows: &[Window], context: usize, horizon: usize) -> Result<Self> {
        Self::select(standardizer, windows, &(0..windows.len()).collect::<Vec<_>>(), context, horizon)
    }

    pub fn select(
        standardizer: &Standardizer,
        windows: &[Window],
        indices: &[usize],
        context: usize,
        horizon: usize,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(TrainError::NoWindows);
        }
        let mut x = Vec::with_capacity(indices.len() * context);
        let mut y = Vec::with_capacity(indices.len() * horizon);
        for &i in indices {
            let w = &windows[i];
            if w.context.len() != context {
                return Err(TrainError::WindowShape {
                    window: i,
                    expected: context,
                    actual: w.context.len(),
                });
            }
            if w.target.len() != horizon {
                return Err(TrainError::WindowShape {
                    window: i,
                    expected: horizon,
                    actual: w.target.len(),
                });
            }
            x.extend(w.context.iter().map(|&v| standardizer.apply(v)));
            y.extend(w.target.iter().map(|&v| standardizer.apply(v)));
        }
        let n = indices.len();
        Ok(Self {
            x: Tensor::new(vec![n, context], x)?,
            y: Tensor::new(vec![n, horizon], y)?,
            indices: indices.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn horizon(&self) -> usize {
        self.y.shape()[1]
    }

    fn locate(&self, flat: usize) -> TrainError {
        TrainError::NonFiniteLoss {
            window: self.indices[flat / self.horizon()],
        }
    }

    /// First window whose row in `values` (shape `[N, h]`) is non-finite.
    fn first_bad_row(&self, values: &Tensor) -> Option<usize> {
        values
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .map(|flat| self.indices[flat / self.horizon()])
    }
}

/// Mean negative log-likelihood per window-step.
pub fn nll_loss<'t>(model: &ModelState, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
    let tape = params
        .first()
        .map(|p| p.tape())
        .ok_or_else(|| TrainError::Config("model has no parameters".into()))?;
    let x = tape.leaf(batch.x.clone());
    let y = tape.leaf(batch.y.clone());
    let HeadOutputs::Distribution { mu, sigma, nu } = model.forward(params, x)? else {
        return Err(TrainError::WrongHeads);
    };
    let family = model.config.likelihood.family().ok_or(TrainError::WrongHeads)?;
    let logp = log_pdf_var(family, mu, sigma, nu, y).map_err(|e| match e {
        AutodiffError::Domain { index, .. } => batch.locate(index),
        e => e.into(),
    })?;
    if let Some(window) = batch.first_bad_row(&logp.value()) {
        return Err(TrainError::NonFiniteLoss { window });
    }
    Ok(logp.mean()?.affine(-1.0, 0.0))
}

/// Mean squared error per window-step, on the point head.
pub fn mse_loss<'t>(model: &ModelState, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
    let tape = params
        .first()
        .map(|p| p.tape())
        .ok_or_else(|| TrainError::Config("model has no parameters".into()))?;
    let x = tape.leaf(batch.x.clone());
    let y = tape.leaf(batch.y.clone());
    let HeadOutputs::Point(pred) = model.forward(params, x)? else {
        return Err(TrainError::WrongHeads);
    };
    let sq = pred.sub(y)?.square()?;
    if let Some(window) = batch.first_bad_row(&sq.value()) {
        return Err(TrainError::NonFiniteLoss { window });
    }
    Ok(sq.mean()?)
}

/// NLL for probabilistic models, MSE for point models.
pub fn model_loss<'t>(model: &ModelState, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
    if model.config.family.is_point() {
        mse_loss(model, params, batch)
    } else {
        nll_loss(model, params, batch)
    }
}

/// Loss value without keeping gradients around.
pub fn evaluate_loss(model: &ModelState, windows: &[Window]) -> Result<f64> {
    let batch = Batch::new(&model.standardizer, windows, model.config.context, model.config.horizon)?;
    let tape = Tape::new();
    let params = model.bind(&tape);
    Ok(model_loss(model, &params, &batch)?.value().data()[0])
}

/// Loss value and gradient (flattened in [`ModelState::params`] order).
pub fn loss_and_gradient(model: &ModelState, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let loss = model_loss(model, &params, batch)?;
    tape.backward(loss)?;
    let value = loss.value().data()[0];
    Ok((value, params.iter().map(|p| p.grad().into_data()).collect()))
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self::new(&params.iter().map(|t| t.len()).collect::<Vec<_>>())
    }
}

/// Global L2 norm across all gradient blocks.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// One bias-corrected Adam update, clipping first when configured.
pub fn adam_step(params: &mut [&mut Tensor], grads: &mut [Vec<f64>], state: &mut AdamState, config: &TrainConfig) {
    if let Some(max_norm) = config.gradient_clip_norm {
        clip_global_norm(grads, max_norm);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss over the epoch, measured before each update.
    pub losses: Vec<f64>,
    pub seconds: Vec<f64>,
    /// CRC-32 of the final parameters.
    pub checksum: u32,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// `epoch,loss,seconds` rows, epochs counted from 1.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,seconds")?;
        for (i, (loss, secs)) in self.losses.iter().zip(&self.seconds).enumerate() {
            writeln!(w, "{},{},{:.6}", i + 1, loss, secs)?;
        }
        Ok(())
    }
}

/// Trains a copy of `model` on `windows`. Window order is fixed unless
/// `config.shuffle` is set, in which case it is drawn from `config.seed`.
pub fn train(model: &ModelState, windows: &[Window], config: &TrainConfig) -> Result<(ModelState, TrainLog)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(TrainError::NoWindows);
    }
    let (c, h) = (model.config.context, model.config.horizon);
    let std = model.standardizer;
    let mut state = model.clone();
    let mut checkpoint = model.clone();
    let mut adam = AdamState::for_params(&state.params_mut());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let batch_size = config.batch_size.unwrap_or(windows.len()).min(windows.len());

    let full = if batch_size == windows.len() && !config.shuffle {
        Some(Batch::new(&std, windows, c, h)?)
    } else {
        None
    };

    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let step_result: Result<()> = (|| {
            for chunk in order.chunks(batch_size) {
                let owned;
                let batch = match &full {
                    Some(b) => b,
                    None => {
                        owned = Batch::select(&std, windows, chunk, c, h)?;
                        &owned
                    }
                };
                let (loss, mut grads) = loss_and_gradient(&state, batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { window: chunk[0] });
                }
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(TrainError::Config("non-finite gradient".into()));
                }
                total += loss * chunk.len() as f64;
                adam_step(&mut state.params_mut(), &mut grads, &mut adam, config);
            }
            Ok(())
        })();
        if let Err(e) = step_result {
            log.checksum = checkpoint.checksum();
            return Err(TrainError::Diverged {
                epoch,
                reason: e.to_string(),
                checkpoint: Box::new(checkpoint),
                log,
            });
        }
        if state.flatten().iter().any(|v| !v.is_finite()) {
            log.checksum = checkpoint.checksum();
            return Err(TrainError::Diverged {
                epoch,
                reason: "non-finite parameters after update".into(),
                checkpoint: Box::new(checkpoint),
                log,
            });
        }
        log.losses.push(total / windows.len() as f64);
        log.seconds.push(started.elapsed().as_secs_f64());
        checkpoint.clone_from(&state);
    }
    log.checksum = state.checksum();
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut adam = AdamState::new(&[2]);
        adam.m[0] = vec![0.5, 0.5];
        let cfg = TrainConfig::default();
        adam_step(&mut [&mut p], &mut [vec![0.0, 0.0]], &mut adam, &cfg);
        // nonzero momentum still moves the parameter, so use fresh moments
        let mut q = Tensor::from_vec(vec![1.0, -2.0]);
        let mut fresh = AdamState::new(&[2]);
        adam_step(&mut [&mut q], &mut [vec![0.0, 0.0]], &mut fresh, &cfg);
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert_eq!(adam.m[0], vec![0.45, 0.45]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        let mut adam = AdamState::new(&[3]);
        let cfg = TrainConfig {
            gradient_clip_norm: None,
            ..TrainConfig::default()
        };
        adam_step(&mut [&mut p], &mut [vec![3.0, -0.2, 1e-3]], &mut adam, &cfg);
        let expected = [1.0 - 1e-3, 1.0 + 1e-3, 1.0 - 1e-3];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: Some(0), ..TrainConfig::default() }.validate().is_err());
    }
}
