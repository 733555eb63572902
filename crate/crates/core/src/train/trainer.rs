use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::bps::{LossEstimate, ScheduleError, ScheduleState, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::fakequant::Precision;
use crate::laa::{AccumulatorError, AccumulatorState, UpdateDecision, DEFAULT_DELAY};
use crate::sefp::{self, BitWidthConfig, BitWidthSet, CodecError, DEFAULT_GROUP_SIZE};

use super::data::Dataset;
use super::model::{ModelError, QuantModel};

/// Loss above this multiple of the first batch loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Accumulator(#[from] AccumulatorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("diverged at batch {batch}: loss {loss} vs initial {initial}")]
    Diverged { batch: u64, loss: f64, initial: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Bandit width selection plus delayed low-width accumulation.
    Otaro,
    /// Unquantized fine-tuning.
    FullPrecision,
    /// Every batch at one width.
    Fixed(BitWidthConfig),
    /// Round-robin over the width set.
    Uniform,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Otaro => f.write_str("otaro"),
            Strategy::FullPrecision => f.write_str("fp"),
            Strategy::Fixed(w) => write!(f, "fixed:{w}"),
            Strategy::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "otaro" => Ok(Strategy::Otaro),
            "fp" | "fp-baseline" => Ok(Strategy::FullPrecision),
            "uniform" => Ok(Strategy::Uniform),
            other => match other.strip_prefix("fixed:") {
                Some(label) => label
                    .parse()
                    .map(Strategy::Fixed)
                    .map_err(|e: CodecError| e.to_string()),
                None => Err(format!("unknown strategy {other:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    /// Stop after this many batches (`T`) if set.
    pub max_batches: Option<u64>,
    pub lambda: f64,
    pub beta: f64,
    pub loss_estimate: LossEstimate,
    pub delay: usize,
    pub average_accumulation: bool,
    pub group_size: usize,
    pub widths: BitWidthSet,
    pub low_set: Vec<BitWidthConfig>,
    pub seed: u64,
    pub strategy: Strategy,
    /// Evaluate every width at the end of each epoch (needs eval data).
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-5,
            epochs: 1,
            max_batches: None,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            loss_estimate: LossEstimate::Ema,
            delay: DEFAULT_DELAY,
            average_accumulation: false,
            group_size: DEFAULT_GROUP_SIZE,
            widths: BitWidthSet::standard(),
            low_set: AccumulatorState::default_low_set(),
            seed: 0,
            strategy: Strategy::Otaro,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self, batches_per_epoch: usize) -> Result<u64, TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.eta));
        }
        if self.epochs == 0 || batches_per_epoch == 0 {
            return bad("no batches to train on".into());
        }
        let total = (self.epochs * batches_per_epoch) as u64;
        let total = self.max_batches.map_or(total, |m| m.min(total));
        if total < self.widths.len() as u64 {
            return bad(format!(
                "{total} batches cannot cover the {}-width warm-up",
                self.widths.len()
            ));
        }
        if let Strategy::Fixed(w) = self.strategy {
            if w.exponent_bits() != self.widths.highest().exponent_bits() {
                return bad(format!("{w} does not share the width set's exponent field"));
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub batch: u64,
    pub epoch: usize,
    /// Width label, or `FP` for unquantized batches.
    pub selected: String,
    pub loss: f64,
    /// Aligned with the width set; empty for strategies without scoring.
    pub scores: Vec<Option<f64>>,
    pub loss_estimates: Vec<Option<f64>>,
    /// Accumulation counter after this batch.
    pub laa_counter: usize,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthEval {
    pub label: String,
    pub mantissa_bits: u8,
    pub mean_loss: f64,
    pub perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub widths: Vec<WidthEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub strategy: Strategy,
    pub widths: BitWidthSet,
    pub trace: Vec<TraceRow>,
    pub epoch_evals: Vec<EpochEval>,
    /// Whether a partial accumulation window was applied after the last batch.
    pub flushed_residue: bool,
    pub initial_loss: f64,
}

impl TrainReport {
    /// Times each width (or `FP`) trained a batch, in width-set order with `FP` last.
    pub fn selection_histogram(&self) -> Vec<(String, usize)> {
        let mut labels: Vec<String> = self.widths.iter().map(|w| w.label()).collect();
        labels.push(Precision::Full.label());
        labels
            .into_iter()
            .map(|l| {
                let n = self.trace.iter().filter(|r| r.selected == l).count();
                (l, n)
            })
            .filter(|(l, n)| *n > 0 || l != "FP")
            .collect()
    }
}

/// Runs the once-for-all training loop over `data`.
///
/// Per batch: pick a precision by strategy, compute the STE loss and
/// gradient there, report the loss to the scheduler, route the gradient
/// through the accumulator and apply whatever update it releases.
pub fn train<M: QuantModel>(
    model: &mut M,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let total = config.validate(data.batches_per_epoch())?;
    let widths = config.widths.clone();
    let mut schedule = ScheduleState::new(widths.clone(), config.lambda)?
        .with_beta(config.beta)?
        .with_estimate(config.loss_estimate);
    let mut accumulator = AccumulatorState::new(model.param_shapes(), config.delay, config.low_set.clone())?
        .with_averaging(config.average_accumulation);

    let mut trace = Vec::with_capacity(total as usize);
    let mut epoch_evals = Vec::new();
    let mut initial = None;
    let mut t = 0u64;

    'epochs: for epoch in 0..config.epochs {
        for batch in data.epoch(config.seed, epoch) {
            if t == total {
                break 'epochs;
            }
            t += 1;
            let (precision, scores) = match config.strategy {
                Strategy::Otaro => {
                    let sel = schedule.select()?;
                    (Precision::Sefp(sel.width), sel.scores)
                }
                Strategy::Uniform => {
                    let w = widths.widths()[((t - 1) % widths.len() as u64) as usize];
                    (Precision::Sefp(w), vec![])
                }
                Strategy::Fixed(w) => (Precision::Sefp(w), vec![]),
                Strategy::FullPrecision => (Precision::Full, vec![]),
            };

            let (loss, grads) = model.loss_and_grads(&batch, precision)?;
            let initial_loss = *initial.get_or_insert(loss);
            if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial_loss.max(f64::MIN_POSITIVE) {
                return Err(TrainError::Diverged {
                    batch: t,
                    loss,
                    initial: initial_loss,
                });
            }

            let decision = match (config.strategy, precision) {
                (Strategy::Otaro, Precision::Sefp(w)) => {
                    schedule.report_loss(&w, loss)?;
                    accumulator.submit(Some(&w), grads)?
                }
                _ => UpdateDecision::Apply(grads),
            };
            let updated = match decision {
                UpdateDecision::Apply(g) => {
                    model.apply_update(&g, config.eta)?;
                    true
                }
                UpdateDecision::Defer => false,
            };

            let loss_estimates = match config.strategy {
                Strategy::Otaro => schedule.losses().to_vec(),
                _ => vec![],
            };
            trace.push(TraceRow {
                batch: t,
                epoch,
                selected: precision.label(),
                loss,
                scores,
                loss_estimates,
                laa_counter: accumulator.counter(),
                updated,
            });
        }
        if config.eval_each_epoch {
            if let Some(eval) = eval {
                epoch_evals.push(EpochEval {
                    epoch,
                    widths: evaluate_all_widths(model, eval, &widths)?,
                });
            }
        }
    }

    let flushed_residue = match accumulator.flush() {
        Some(g) => {
            model.apply_update(&g, config.eta)?;
            true
        }
        None => false,
    };

    Ok(TrainReport {
        strategy: config.strategy,
        widths,
        trace,
        epoch_evals,
        flushed_residue,
        initial_loss: initial.unwrap_or(f64::NAN),
    })
}

/// Mean loss of `model` over every example of `data` at `precision`.
pub fn evaluate<M: QuantModel>(model: &M, data: &Dataset, precision: Precision) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in data.sequential() {
        total += model.loss(&batch, precision)? * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count as f64)
}

/// Evaluates every width from a single encoding at the highest width.
///
/// Each lower width is reached by mantissa truncation of that one encoding,
/// the same path a deployed model takes when switching precision.
pub fn evaluate_all_widths<M: QuantModel>(
    model: &M,
    data: &Dataset,
    widths: &BitWidthSet,
) -> Result<Vec<WidthEval>, TrainError> {
    let master: Vec<_> = model
        .encode(widths.highest())?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    widths
        .iter()
        .map(|&w| {
            let narrowed = master
                .iter()
                .map(|t| sefp::truncate_precision(t, w))
                .collect::<Result<Vec<_>, _>>()?;
            let mut view = model.clone();
            view.load_quantized(&narrowed)?;
            let mean_loss = evaluate(&view, data, Precision::Full)?;
            Ok(WidthEval {
                label: w.label(),
                mantissa_bits: w.mantissa_bits(),
                mean_loss,
                perplexity: model.reports_perplexity().then(|| mean_loss.exp()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;
    use crate::train::data::synthetic_regression;
    use crate::train::model::MlpRegressor;

    fn setup() -> (MlpRegressor, Dataset) {
        let mut rng = RngState::new(1);
        let model = MlpRegressor::new(8, 32, 1, 64, &mut rng);
        let data = synthetic_regression(512, 8, 3, 4, 16).unwrap();
        (model, data)
    }

    fn config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            eta: 0.02,
            epochs: 2,
            strategy,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn strategy_labels_parse() {
        for s in ["otaro", "fp", "uniform", "fixed:E5M4"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert!("fixed:Q4".parse::<Strategy>().is_err());
        assert!("adam".parse::<Strategy>().is_err());
    }

    #[test]
    fn fixed_equals_otaro_on_singleton_set() {
        let (model, data) = setup();
        let w = BitWidthConfig::e5(8);
        let mut a = model.clone();
        let mut b = model.clone();
        let ra = train(&mut a, &data, None, &config(Strategy::Fixed(w))).unwrap();
        let cfg = TrainConfig {
            widths: BitWidthSet::singleton(w),
            ..config(Strategy::Otaro)
        };
        let rb = train(&mut b, &data, None, &cfg).unwrap();
        assert_eq!(a, b);
        let la: Vec<f64> = ra.trace.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = rb.trace.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn uniform_is_round_robin() {
        let (mut model, data) = setup();
        let cfg = TrainConfig {
            epochs: 1,
            ..config(Strategy::Uniform)
        };
        let report = train(&mut model, &data, None, &cfg).unwrap();
        let hist = report.selection_histogram();
        let counts: Vec<usize> = hist.iter().map(|(_, n)| *n).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
        assert_eq!(report.trace[0].selected, "E5M8");
        assert_eq!(report.trace[5].selected, "E5M3");
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (model, data) = setup();
        let mut a = model.clone();
        let mut b = model;
        let ra = train(&mut a, &data, None, &config(Strategy::Otaro)).unwrap();
        let rb = train(&mut b, &data, None, &config(Strategy::Otaro)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn divergence_aborts() {
        let (mut model, data) = setup();
        let cfg = TrainConfig {
            eta: 50.0,
            ..config(Strategy::FullPrecision)
        };
        assert!(matches!(
            train(&mut model, &data, None, &cfg),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        let (mut model, data) = setup();
        let mut cfg = config(Strategy::Otaro);
        cfg.eta = 0.0;
        assert!(train(&mut model, &data, None, &cfg).is_err());
        let cfg = TrainConfig {
            max_batches: Some(3),
            ..config(Strategy::Otaro)
        };
        assert!(matches!(train(&mut model, &data, None, &cfg), Err(TrainError::Config(_))));
    }

    #[test]
    fn partial_window_is_flushed() {
        let (mut model, data) = setup();
        let cfg = TrainConfig {
            max_batches: Some(7),
            widths: BitWidthSet::singleton(BitWidthConfig::e5(3)),
            delay: 5,
            ..config(Strategy::Otaro)
        };
        let report = train(&mut model, &data, None, &cfg).unwrap();
        let updates = report.trace.iter().filter(|r| r.updated).count();
        assert_eq!(updates, 1);
        assert_eq!(report.trace.last().unwrap().laa_counter, 2);
        assert!(report.flushed_residue);
    }

    #[test]
    fn top_width_evaluation_matches_direct_encoding() {
        let (model, data) = setup();
        let widths = BitWidthSet::standard();
        let evals = evaluate_all_widths(&model, &data, &widths).unwrap();
        let direct = evaluate(&model, &data, Precision::Sefp(widths.highest())).unwrap();
        assert_eq!(evals[0].mean_loss, direct);
        assert_eq!(evals.len(), 6);
        assert!(evals.iter().all(|e| e.perplexity.is_none()));
    }
}
