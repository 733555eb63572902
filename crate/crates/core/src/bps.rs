//! Exploitation-exploration bit-width path search.
//!
//! Every batch each width `b` is scored as
//!
//! ```text
//! score(b) = lambda * sqrt(ln t / t_b) - L_b
//! ```
//!
//! and the argmax trains that batch. `t` counts batches including the one
//! being scheduled, `t_b` counts earlier selections of `b` and `L_b` is the
//! width's running loss. Each width is pulled once, highest mantissa first,
//! before scoring starts.

use thiserror::Error;

use crate::sefp::{BitWidthConfig, BitWidthSet};

pub const DEFAULT_LAMBDA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("{0} has not been selected yet; warm-up required before scoring")]
    WarmUpRequired(String),
    #[error("no loss reported for {0}")]
    LossMissing(String),
    #[error("{0} is not in the bit-width set")]
    UnknownWidth(String),
    #[error("loss reported for {reported} but {selected} was selected")]
    NotSelected { reported: String, selected: String },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("exploration coefficient must be positive, got {0}")]
    BadLambda(f64),
    #[error("loss smoothing must lie in [0, 1), got {0}")]
    BadBeta(f64),
}

/// How reported losses become `L_b`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossEstimate {
    /// `L_b <- beta * L_b + (1 - beta) * loss`; first report initializes.
    #[default]
    Ema,
    /// `L_b <- loss`.
    Latest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub width: BitWidthConfig,
    pub index: usize,
    /// Scores that decided this batch, aligned with the width set. `None` during warm-up.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct ScheduleState {
    widths: BitWidthSet,
    lambda: f64,
    beta: f64,
    estimate: LossEstimate,
    t: u64,
    counts: Vec<u64>,
    losses: Vec<Option<f64>>,
    current: Option<usize>,
}

impl ScheduleState {
    pub fn new(widths: BitWidthSet, lambda: f64) -> Result<Self, ScheduleError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ScheduleError::BadLambda(lambda));
        }
        let n = widths.len();
        Ok(Self {
            widths,
            lambda,
            beta: DEFAULT_BETA,
            estimate: LossEstimate::Ema,
            t: 0,
            counts: vec![0; n],
            losses: vec![None; n],
            current: None,
        })
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self, ScheduleError> {
        if !(0.0..1.0).contains(&beta) {
            return Err(ScheduleError::BadBeta(beta));
        }
        self.beta = beta;
        Ok(self)
    }

    pub fn with_estimate(mut self, estimate: LossEstimate) -> Self {
        self.estimate = estimate;
        self
    }

    pub fn widths(&self) -> &BitWidthSet {
        &self.widths
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Batches scheduled so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn losses(&self) -> &[Option<f64>] {
        &self.losses
    }

    pub fn count(&self, width: &BitWidthConfig) -> Option<u64> {
        self.widths.position(width).map(|i| self.counts[i])
    }

    pub fn loss(&self, width: &BitWidthConfig) -> Option<f64> {
        self.widths.position(width).and_then(|i| self.losses[i])
    }

    pub fn in_warm_up(&self) -> bool {
        self.counts.contains(&0)
    }

    fn index_of(&self, width: &BitWidthConfig) -> Result<usize, ScheduleError> {
        self.widths
            .position(width)
            .ok_or_else(|| ScheduleError::UnknownWidth(width.label()))
    }

    /// Score of `width` at the current batch counter.
    pub fn score(&self, width: &BitWidthConfig) -> Result<f64, ScheduleError> {
        let i = self.index_of(width)?;
        self.score_at(self.t, i)
    }

    fn score_at(&self, t: u64, i: usize) -> Result<f64, ScheduleError> {
        let tb = self.counts[i];
        if tb == 0 || t == 0 {
            return Err(ScheduleError::WarmUpRequired(self.widths.widths()[i].label()));
        }
        let loss = self.losses[i].ok_or_else(|| ScheduleError::LossMissing(self.widths.widths()[i].label()))?;
        Ok(score_value(self.lambda, t, tb, loss))
    }

    /// Picks the width for the next batch and records the pull.
    ///
    /// Ties go to the wider mantissa.
    pub fn select(&mut self) -> Result<Selection, ScheduleError> {
        let t = self.t + 1;
        let (index, scores) = match self.counts.iter().position(|&c| c == 0) {
            Some(i) => (i, vec![None; self.counts.len()]),
            None => {
                let scores = (0..self.counts.len())
                    .map(|i| self.score_at(t, i))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut best = 0;
                for (i, s) in scores.iter().enumerate().skip(1) {
                    if *s > scores[best] {
                        best = i;
                    }
                }
                (best, scores.into_iter().map(Some).collect())
            }
        };
        self.t = t;
        self.counts[index] += 1;
        self.current = Some(index);
        Ok(Selection {
            width: self.widths.widths()[index],
            index,
            scores,
        })
    }

    /// Folds the loss observed at the width selected this batch into `L_b`.
    pub fn report_loss(&mut self, width: &BitWidthConfig, loss: f64) -> Result<(), ScheduleError> {
        if !loss.is_finite() {
            return Err(ScheduleError::NonFiniteLoss(loss));
        }
        let i = self.index_of(width)?;
        if let Some(cur) = self.current {
            if cur != i {
                return Err(ScheduleError::NotSelected {
                    reported: width.label(),
                    selected: self.widths.widths()[cur].label(),
                });
            }
        }
        self.losses[i] = Some(match (self.estimate, self.losses[i]) {
            (LossEstimate::Ema, Some(prev)) => self.beta * prev + (1.0 - self.beta) * loss,
            _ => loss,
        });
        Ok(())
    }
}

/// `lambda * sqrt(ln t / t_b) - loss`.
pub fn score_value(lambda: f64, t: u64, t_b: u64, loss: f64) -> f64 {
    lambda * ((t as f64).ln() / t_b as f64).sqrt() - loss
}
