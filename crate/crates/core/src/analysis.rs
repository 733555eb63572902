//! Gradient diagnostics: how SEFP gradients relate to unquantized ones.
//!
//! The central model is `∇sefp = X·∇fp + Y`. Stacking `N` batches row-wise
//! gives `G = G_fp·X + Y`, and `X` is the least-squares fit of that system.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::fakequant::Precision;
use crate::sefp::{quantization_error_grad, BitWidthConfig, BitWidthSet};
use crate::tensor::{norms_and_cosine, DenseTensor, RngState};
use crate::train::{Batch, ModelError, QuantModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("gradient matrices differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("full-precision gradient matrix is identically zero")]
    ZeroGradients,
    #[error("gradient matrix contains non-finite values")]
    NonFinite,
    #[error("need at least one batch")]
    NoBatches,
    #[error("parameter index {0} out of range")]
    BadParam(usize),
    #[error("coordinate {0} out of range")]
    BadCoordinate(usize),
    #[error("sawtooth scan needs at least {needed} samples for m={m}, got {got}")]
    TooFewSamples { m: u8, needed: usize, got: usize },
    #[error("least-squares solve failed: {0}")]
    Solver(String),
}

/// Row-aligned per-batch gradients, unquantized and SEFP, each `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrixPair {
    g_fp: DenseTensor,
    g: DenseTensor,
}

impl GradientMatrixPair {
    pub fn new(g_fp: DenseTensor, g: DenseTensor) -> Result<Self, AnalysisError> {
        if g_fp.shape() != g.shape() || g_fp.shape().len() != 2 {
            return Err(AnalysisError::ShapeMismatch(g_fp.shape().to_vec(), g.shape().to_vec()));
        }
        if !g_fp.is_finite() || !g.is_finite() {
            return Err(AnalysisError::NonFinite);
        }
        Ok(Self { g_fp, g })
    }

    pub fn g_fp(&self) -> &DenseTensor {
        &self.g_fp
    }

    pub fn g(&self) -> &DenseTensor {
        &self.g
    }

    pub fn batches(&self) -> usize {
        self.g.rows()
    }

    pub fn dim(&self) -> usize {
        self.g.cols()
    }

    /// `‖G_i − G_fp,i‖` for every batch row.
    pub fn row_differences(&self) -> Vec<f64> {
        (0..self.batches())
            .map(|i| {
                self.g
                    .row(i)
                    .iter()
                    .zip(self.g_fp.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMapEstimate {
    /// `d × d`.
    pub x: DenseTensor,
    /// `N × d`, exactly `G − G_fp·X`.
    pub y: DenseTensor,
    /// Column means of `Y`.
    pub residual_mean: Vec<f64>,
    /// `σ_max / σ_min` of `G_fp` over all `d` directions; infinite when rank-deficient.
    pub condition: f64,
    pub rank: usize,
}

fn to_matrix(t: &DenseTensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> DenseTensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    DenseTensor::new(vec![r, c], data).expect("matrix shape")
}

/// Least-squares `X = argmin ‖G − G_fp X‖_F` via SVD, minimum-norm when `G_fp` is rank-deficient.
pub fn estimate_linear_map(pair: &GradientMatrixPair) -> Result<LinearMapEstimate, AnalysisError> {
    if pair.g_fp.data().iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::ZeroGradients);
    }
    let (n, d) = (pair.batches(), pair.dim());
    let a = to_matrix(&pair.g_fp);
    let b = to_matrix(&pair.g);
    let svd = a.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let s_max = sigma.max();
    let tol = s_max * (n.max(d) as f64) * f64::EPSILON;
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    let condition = if rank < d {
        f64::INFINITY
    } else {
        s_max / sigma.min()
    };
    let x = svd.solve(&b, tol).map_err(|e| AnalysisError::Solver(e.to_string()))?;
    let y = &b - &a * &x;
    let residual_mean = (0..d).map(|j| y.column(j).sum() / n as f64).collect();
    Ok(LinearMapEstimate {
        x: from_matrix(&x),
        y: from_matrix(&y),
        residual_mean,
        condition,
        rank,
    })
}

/// Which gradient coordinates an analysis looks at.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientView {
    /// All parameters, concatenated.
    All,
    Param(usize),
    /// Selected flat coordinates of one parameter tensor.
    Coords { param: usize, coords: Vec<usize> },
}

impl GradientView {
    /// The last quantized weight matrix of the model.
    pub fn last_quantized<M: QuantModel>(model: &M) -> Self {
        GradientView::Param(*model.quantized_params().last().expect("model has quantized layers"))
    }

    fn extract(&self, grads: &[DenseTensor]) -> Result<Vec<f64>, AnalysisError> {
        match self {
            GradientView::All => Ok(grads.iter().flat_map(|g| g.data().iter().copied()).collect()),
            GradientView::Param(p) => grads
                .get(*p)
                .map(|g| g.data().to_vec())
                .ok_or(AnalysisError::BadParam(*p)),
            GradientView::Coords { param, coords } => {
                let g = grads.get(*param).ok_or(AnalysisError::BadParam(*param))?;
                coords
                    .iter()
                    .map(|&c| g.data().get(c).copied().ok_or(AnalysisError::BadCoordinate(c)))
                    .collect()
            }
        }
    }
}

/// Gradient of `model`'s loss on `batch` at `precision`, restricted to `view`.
pub fn gradient_at<M: QuantModel>(
    model: &M,
    batch: &Batch,
    precision: Precision,
    view: &GradientView,
) -> Result<DenseTensor, AnalysisError> {
    let (_, grads) = model.loss_and_grads(batch, precision)?;
    Ok(DenseTensor::from_vec(view.extract(&grads)?))
}

/// Per-batch STE gradients at `width` next to unquantized ones on the same batches.
pub fn collect_gradient_pairs<M: QuantModel>(
    model: &M,
    batches: &[Batch],
    width: BitWidthConfig,
    view: &GradientView,
) -> Result<GradientMatrixPair, AnalysisError> {
    if batches.is_empty() {
        return Err(AnalysisError::NoBatches);
    }
    let mut fp_rows = Vec::new();
    let mut q_rows = Vec::new();
    for batch in batches {
        fp_rows.extend(gradient_at(model, batch, Precision::Full, view)?.into_data());
        q_rows.extend(gradient_at(model, batch, Precision::Sefp(width), view)?.into_data());
    }
    let d = fp_rows.len() / batches.len();
    let shape = vec![batches.len(), d];
    GradientMatrixPair::new(
        DenseTensor::new(shape.clone(), fp_rows).expect("rows"),
        DenseTensor::new(shape, q_rows).expect("rows"),
    )
}

/// `k` distinct coordinates out of `d`, seed-fixed.
pub fn sample_coordinates(d: usize, k: usize, rng: &mut RngState) -> Vec<usize> {
    let mut all: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut all);
    all.truncate(k.min(d));
    all.sort_unstable();
    all
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineTable {
    pub labels: Vec<String>,
    /// Symmetric; `NaN` where a zero gradient makes the cosine undefined.
    pub entries: Vec<Vec<f64>>,
    /// Widths whose gradient was identically zero.
    pub flagged: Vec<String>,
}

impl CosineTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.entries[i][j])
    }
}

/// Pairwise cosine similarity of the loss gradients at every width on one batch.
pub fn cross_width_cosine_table<M: QuantModel>(
    model: &M,
    batch: &Batch,
    widths: &BitWidthSet,
    view: &GradientView,
) -> Result<CosineTable, AnalysisError> {
    let grads = widths
        .iter()
        .map(|&w| gradient_at(model, batch, Precision::Sefp(w), view))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<String> = widths.iter().map(|w| w.label()).collect();
    let zero: Vec<bool> = grads.iter().map(|g| g.norm() == 0.0).collect();
    let k = grads.len();
    let mut entries = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        for j in i..k {
            if zero[i] || zero[j] {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                norms_and_cosine(&grads[i], &grads[j]).expect("nonzero, same shape").2
            };
            entries[i][j] = c;
            entries[j][i] = c;
        }
    }
    let flagged = labels.iter().zip(&zero).filter(|(_, z)| **z).map(|(l, _)| l.clone()).collect();
    Ok(CosineTable {
        labels,
        entries,
        flagged,
    })
}

/// `‖∇sefp‖ − ‖∇fp‖` per batch.
pub fn norm_error_series<M: QuantModel>(
    model: &M,
    batches: &[Batch],
    width: BitWidthConfig,
    view: &GradientView,
) -> Result<Vec<f64>, AnalysisError> {
    batches
        .iter()
        .map(|b| {
            let fp = gradient_at(model, b, Precision::Full, view)?.norm();
            let q = gradient_at(model, b, Precision::Sefp(width), view)?.norm();
            Ok(q - fp)
        })
        .collect()
}

pub fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SawtoothProfile {
    pub mantissa_bits: u8,
    pub grid: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Spacing of the zeros of `ε` on the grid.
    pub period: f64,
    pub peak_to_peak: f64,
}

/// Scans `ε(w)` over `[0, 1)` on `samples` equally spaced points.
///
/// Zeros sit exactly on the lattice `k/2^m`, so their spacing is the period.
/// Exact results need `samples` to be a multiple of `2^(m+1)` so the half-way
/// points (the extremes) land on the grid.
pub fn sawtooth_profile(m: u8, samples: usize) -> Result<SawtoothProfile, AnalysisError> {
    let needed = 16usize << m;
    if samples < needed {
        return Err(AnalysisError::TooFewSamples { m, needed, got: samples });
    }
    let grid: Vec<f64> = (0..samples).map(|j| j as f64 / samples as f64).collect();
    let epsilon = quantization_error_grad(&grid, m);
    let amplitude = 1.0 / f64::from(1u32 << m);
    let zeros: Vec<usize> = epsilon
        .iter()
        .enumerate()
        .filter(|(_, e)| e.abs() <= 1e-12 * amplitude)
        .map(|(i, _)| i)
        .collect();
    let period = match zeros.as_slice() {
        [first, .., last] => (last - first) as f64 / (zeros.len() - 1) as f64 / samples as f64,
        _ => f64::NAN,
    };
    let max = epsilon.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = epsilon.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SawtoothProfile {
        mantissa_bits: m,
        grid,
        epsilon,
        period,
        peak_to_peak: max - min,
    })
}
