//! Low-precision asynchronous accumulation.
//!
//! Gradients produced at ultra-low widths are summed over `N` such batches
//! and applied as one update; every other width updates immediately. The
//! counter only advances on low-width batches, so an accumulation window
//! survives interleaved high-precision batches.

use thiserror::Error;

use crate::sefp::BitWidthConfig;
use crate::tensor::{DenseTensor, RngState};

pub const DEFAULT_DELAY: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccumulatorError {
    #[error("delay step must be at least 1")]
    ZeroDelay,
    #[error("gradient {index} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} gradient tensors, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("gradient {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("need at least one trial")]
    NoTrials,
    #[error("full-precision gradient stream is identically zero")]
    DegenerateSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateDecision {
    /// Apply this gradient now (`w <- w - eta * g`).
    Apply(Vec<DenseTensor>),
    /// Gradient absorbed into the running sum.
    Defer,
}

impl UpdateDecision {
    pub fn is_apply(&self) -> bool {
        matches!(self, UpdateDecision::Apply(_))
    }
}

#[derive(Debug, Clone)]
pub struct AccumulatorState {
    delay: usize,
    counter: usize,
    shapes: Vec<Vec<usize>>,
    grad_sum: Vec<DenseTensor>,
    low_set: Vec<BitWidthConfig>,
    average: bool,
}

impl AccumulatorState {
    /// `shapes` lists the model's parameter tensors in submission order.
    pub fn new(
        shapes: Vec<Vec<usize>>,
        delay: usize,
        low_set: Vec<BitWidthConfig>,
    ) -> Result<Self, AccumulatorError> {
        if delay == 0 {
            return Err(AccumulatorError::ZeroDelay);
        }
        let grad_sum = shapes.iter().map(|s| DenseTensor::zeros(s)).collect();
        Ok(Self {
            delay,
            counter: 0,
            shapes,
            grad_sum,
            low_set,
            average: false,
        })
    }

    /// `{E5M4, E5M3}`.
    pub fn default_low_set() -> Vec<BitWidthConfig> {
        vec![BitWidthConfig::e5(4), BitWidthConfig::e5(3)]
    }

    /// Divide the released sum by `N`. Off by default.
    pub fn with_averaging(mut self, average: bool) -> Self {
        self.average = average;
        self
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn low_set(&self) -> &[BitWidthConfig] {
        &self.low_set
    }

    pub fn is_low(&self, width: &BitWidthConfig) -> bool {
        self.low_set.contains(width)
    }

    pub fn pending(&self) -> &[DenseTensor] {
        &self.grad_sum
    }

    fn check(&self, grads: &[DenseTensor]) -> Result<(), AccumulatorError> {
        if grads.len() != self.shapes.len() {
            return Err(AccumulatorError::CountMismatch {
                expected: self.shapes.len(),
                found: grads.len(),
            });
        }
        for (index, (g, s)) in grads.iter().zip(&self.shapes).enumerate() {
            if g.shape() != s.as_slice() {
                return Err(AccumulatorError::ShapeMismatch {
                    index,
                    expected: s.clone(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AccumulatorError::NonFinite(index));
            }
        }
        Ok(())
    }

    /// Routes one batch's gradient. `width` is `None` for unquantized batches.
    pub fn submit(
        &mut self,
        width: Option<&BitWidthConfig>,
        grads: Vec<DenseTensor>,
    ) -> Result<UpdateDecision, AccumulatorError> {
        self.check(&grads)?;
        if !width.is_some_and(|w| self.is_low(w)) {
            return Ok(UpdateDecision::Apply(grads));
        }
        if self.counter == 0 {
            self.grad_sum = grads;
        } else {
            for (acc, g) in self.grad_sum.iter_mut().zip(&grads) {
                acc.axpy(1.0, g).expect("shapes checked");
            }
        }
        self.counter += 1;
        if self.counter == self.delay {
            Ok(UpdateDecision::Apply(self.release()))
        } else {
            Ok(UpdateDecision::Defer)
        }
    }

    /// Releases a partial window (`0 < i < N`) as one update.
    pub fn flush(&mut self) -> Option<Vec<DenseTensor>> {
        (self.counter > 0).then(|| self.release())
    }

    fn release(&mut self) -> Vec<DenseTensor> {
        let zeros = self.shapes.iter().map(|s| DenseTensor::zeros(s)).collect();
        let mut out = std::mem::replace(&mut self.grad_sum, zeros);
        if self.average {
            let n = self.counter as f64;
            for g in &mut out {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
        }
        self.counter = 0;
        out
    }
}

/// Synthetic gradient stream for the perturbation-decay study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationModel {
    pub dim: usize,
    /// Scale of the per-trial true gradient direction.
    pub signal_scale: f64,
    /// Batch-to-batch spread of the full-precision gradient around that direction.
    pub signal_jitter: f64,
    /// Standard deviation of each residual coordinate `Y_i`.
    pub noise_scale: f64,
}

impl Default for PerturbationModel {
    fn default() -> Self {
        Self {
            dim: 64,
            signal_scale: 1.0,
            signal_jitter: 0.1,
            noise_scale: 1.0,
        }
    }
}

/// Mean over `trials` of `‖Σ Y_i‖ / ‖Σ ∇fp_i‖` for windows of `n` batches.
///
/// Each trial draws a direction `mu`, then `∇fp_i = mu + jitter·z_i` and
/// i.i.d. zero-mean `Y_i`, so the SEFP-side gradient is `∇fp_i + Y_i`.
pub fn perturbation_decay_trial(
    n: usize,
    trials: usize,
    rng: &mut RngState,
    model: &PerturbationModel,
) -> Result<f64, AccumulatorError> {
    if n == 0 {
        return Err(AccumulatorError::ZeroDelay);
    }
    if trials == 0 {
        return Err(AccumulatorError::NoTrials);
    }
    if model.signal_scale == 0.0 && model.signal_jitter == 0.0 {
        return Err(AccumulatorError::DegenerateSignal);
    }
    let d = model.dim;
    let mut total = 0.0;
    for _ in 0..trials {
        let mu = rng.normal_vec(d, model.signal_scale);
        let mut sum_fp = vec![0.0; d];
        let mut sum_y = vec![0.0; d];
        for _ in 0..n {
            for k in 0..d {
                sum_fp[k] += mu[k] + model.signal_jitter * rng.normal();
                sum_y[k] += model.noise_scale * rng.normal();
            }
        }
        let fp = sum_fp.iter().map(|v| v * v).sum::<f64>().sqrt();
        if fp == 0.0 {
            return Err(AccumulatorError::DegenerateSignal);
        }
        total += sum_y.iter().map(|v| v * v).sum::<f64>().sqrt() / fp;
    }
    Ok(total / trials as f64)
}
