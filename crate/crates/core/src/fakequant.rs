//! Straight-through fake quantization for linear layers.
//!
//! The forward pass multiplies by the SEFP round trip of the master weights;
//! the backward pass treats the quantizer as the identity, so the gradient
//! w.r.t. the quantized weights is handed to the masters unchanged.

use std::fmt;

use thiserror::Error;

use crate::sefp::{self, BitWidthConfig, CodecError, RoundingMode, DEFAULT_GROUP_SIZE};
use crate::tensor::{matmul, matmul_transposed, DenseTensor, RngState, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Weight precision used by a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    /// Unquantized working precision.
    Full,
    Sefp(BitWidthConfig),
}

impl Precision {
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Full => f.write_str("FP"),
            Precision::Sefp(w) => write!(f, "{w}"),
        }
    }
}

impl From<BitWidthConfig> for Precision {
    fn from(w: BitWidthConfig) -> Self {
        Precision::Sefp(w)
    }
}

/// SEFP round trip of `weights` at `width`, grouped row-major.
pub fn quantized_weights(
    weights: &DenseTensor,
    width: BitWidthConfig,
    group_size: usize,
) -> Result<DenseTensor, CodecError> {
    let q = sefp::quantize_with_shape(
        weights.data(),
        weights.shape().to_vec(),
        width,
        group_size,
        RoundingMode::TruncateTowardZero,
    )?;
    Ok(DenseTensor::new(weights.shape().to_vec(), sefp::dequantize(&q))
        .expect("codec preserves element count"))
}

/// `y = x · Q(W)ᵀ + bias` with `W` stored `[out, in]`, so groups run along input features.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantLinear {
    weights: DenseTensor,
    bias: DenseTensor,
    active: Precision,
    group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
    pub input: DenseTensor,
}

impl FakeQuantLinear {
    pub fn new(weights: DenseTensor, bias: DenseTensor, group_size: usize) -> Result<Self, LayerError> {
        if group_size == 0 {
            return Err(CodecError::ZeroGroupSize.into());
        }
        if weights.shape().len() != 2 || bias.shape() != [weights.rows()] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: weights.shape().to_vec(),
                right: bias.shape().to_vec(),
            }
            .into());
        }
        Ok(Self {
            weights,
            bias,
            active: Precision::Full,
            group_size,
        })
    }

    /// He-style init: `N(0, 2/in)` weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            weights: rng.normal_tensor(&[outputs, inputs], std),
            bias: DenseTensor::zeros(&[outputs]),
            active: Precision::Full,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        assert!(group_size > 0, "group size must be positive");
        self.group_size = group_size;
        self
    }

    pub fn weights(&self) -> &DenseTensor {
        &self.weights
    }

    pub fn bias(&self) -> &DenseTensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut DenseTensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut DenseTensor {
        &mut self.bias
    }

    pub fn parts_mut(&mut self) -> (&mut DenseTensor, &mut DenseTensor) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn active(&self) -> Precision {
        self.active
    }

    pub fn set_active(&mut self, precision: Precision) {
        self.active = precision;
    }

    /// Weights the forward pass multiplies by. Recomputed on every call.
    pub fn effective_weights(&self) -> Result<DenseTensor, LayerError> {
        self.weights_at(self.active)
    }

    /// Master weights seen through `precision`, independent of the active setting.
    pub fn weights_at(&self, precision: Precision) -> Result<DenseTensor, LayerError> {
        match precision {
            Precision::Full => Ok(self.weights.clone()),
            Precision::Sefp(w) => Ok(quantized_weights(&self.weights, w, self.group_size)?),
        }
    }

    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor, LayerError> {
        let w = self.effective_weights()?;
        self.forward_with(&w, x)
    }

    pub(crate) fn forward_with(&self, w: &DenseTensor, x: &DenseTensor) -> Result<DenseTensor, LayerError> {
        let mut y = matmul_transposed(x, w)?;
        let out = self.outputs();
        for row in y.data_mut().chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, upstream: &DenseTensor, x: &DenseTensor) -> Result<LinearGrads, LayerError> {
        let w = self.effective_weights()?;
        self.backward_with(&w, upstream, x)
    }

    /// STE backward: `dW = upstreamᵀ · x` lands on the masters as-is,
    /// `dx = upstream · Q(W)`.
    pub(crate) fn backward_with(
        &self,
        w: &DenseTensor,
        upstream: &DenseTensor,
        x: &DenseTensor,
    ) -> Result<LinearGrads, LayerError> {
        if upstream.rows() != x.rows() || upstream.cols() != self.outputs() || x.cols() != self.inputs() {
            return Err(TensorError::ShapeMismatch {
                op: "linear backward",
                left: upstream.shape().to_vec(),
                right: x.shape().to_vec(),
            }
            .into());
        }
        let weight = matmul(&upstream.transpose(), x)?;
        let bias = upstream.sum_rows();
        let input = matmul(upstream, w)?;
        Ok(LinearGrads { weight, bias, input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ElementwiseOp;

    fn layer(rng: &mut RngState, inputs: usize, outputs: usize) -> FakeQuantLinear {
        let mut l = FakeQuantLinear::random(inputs, outputs, rng);
        *l.bias_mut() = rng.normal_tensor(&[outputs], 0.1);
        l
    }

    #[test]
    fn representable_weights_match_unquantized_forward() {
        let w = DenseTensor::new(vec![2, 3], vec![0.5, -0.25, 0.125, 1.0, 0.75, -1.5]).unwrap();
        let mut l = FakeQuantLinear::new(w, DenseTensor::zeros(&[2]), 64).unwrap();
        let x = DenseTensor::new(vec![1, 3], vec![0.3, -1.1, 2.0]).unwrap();
        let fp = l.forward(&x).unwrap();
        l.set_active(Precision::Sefp(BitWidthConfig::e5(4)));
        assert_eq!(l.forward(&x).unwrap(), fp);
    }

    #[test]
    fn eleven_bit_mantissa_keeps_half_precision_weights() {
        // k/1024 in [1,2) is an FP16 value with a shared exponent of 0
        let mut rng = RngState::new(5);
        let data: Vec<f64> = (0..128)
            .map(|_| {
                let k = 1024 + rng.index(1024);
                let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                s * k as f64 / 1024.0
            })
            .collect();
        let w = DenseTensor::new(vec![4, 32], data).unwrap();
        let mut l = FakeQuantLinear::new(w, DenseTensor::zeros(&[4]), 32).unwrap();
        let x = rng.normal_tensor(&[3, 32], 1.0);
        let fp = l.forward(&x).unwrap();
        l.set_active(Precision::Sefp(BitWidthConfig::e5(11)));
        assert_eq!(l.forward(&x).unwrap(), fp);
    }

    #[test]
    fn low_precision_error_is_bounded_by_round_trip() {
        let mut rng = RngState::new(9);
        let mut l = layer(&mut rng, 64, 8);
        let x = rng.normal_tensor(&[5, 64], 1.0);
        let fp = l.forward(&x).unwrap();
        let width = BitWidthConfig::e5(3);
        l.set_active(Precision::Sefp(width));
        let q = l.forward(&x).unwrap();
        let codes = sefp::quantize_with_shape(
            l.weights().data(),
            l.weights().shape().to_vec(),
            width,
            64,
            RoundingMode::TruncateTowardZero,
        )
        .unwrap();
        for r in 0..5 {
            let x_l1: f64 = x.row(r).iter().map(|v| v.abs()).sum();
            for o in 0..8 {
                // one group per output row
                let e = codes.unbiased_exponent(o).unwrap();
                let elem_bound = 2f64.powi(e - 2);
                let row_bound = x_l1 * elem_bound;
                assert!((q.row(r)[o] - fp.row(r)[o]).abs() <= row_bound);
            }
        }
    }

    #[test]
    fn forward_leaves_masters_untouched() {
        let mut rng = RngState::new(1);
        let mut l = layer(&mut rng, 16, 4);
        l.set_active(Precision::Sefp(BitWidthConfig::e5(3)));
        let before = l.weights().clone();
        let x = rng.normal_tensor(&[2, 16], 1.0);
        for _ in 0..5 {
            l.forward(&x).unwrap();
        }
        assert_eq!(l.weights().data(), before.data());
    }

    #[test]
    fn backward_without_truncation_is_standard() {
        let mut rng = RngState::new(2);
        let l = layer(&mut rng, 6, 3);
        let x = rng.normal_tensor(&[4, 6], 1.0);
        let up = rng.normal_tensor(&[4, 3], 1.0);
        let g = l.backward(&up, &x).unwrap();
        assert_eq!(g.weight, matmul(&up.transpose(), &x).unwrap());
        assert_eq!(g.input, matmul(&up, l.weights()).unwrap());
        let zero = l.backward(&DenseTensor::zeros(&[4, 3]), &x).unwrap();
        assert!(zero.weight.data().iter().all(|&v| v == 0.0));
    }

    /// Loss `0.5 ‖x·Wqᵀ + b − t‖²` evaluated with `Wq` as the free variable.
    fn quantized_loss(wq: &DenseTensor, l: &FakeQuantLinear, x: &DenseTensor, t: &DenseTensor) -> f64 {
        let y = l.forward_with(wq, x).unwrap();
        let d = crate::tensor::elementwise(ElementwiseOp::Sub, &y, Some(t)).unwrap();
        0.5 * d.norm().powi(2)
    }

    #[test]
    fn ste_gradient_matches_finite_differences_in_quantized_weights() {
        for seed in 0..5 {
            let mut rng = RngState::new(100 + seed);
            let mut l = layer(&mut rng, 8, 3);
            l.set_active(Precision::Sefp(BitWidthConfig::e5(3)));
            let x = rng.normal_tensor(&[4, 8], 1.0);
            let t = rng.normal_tensor(&[4, 3], 1.0);
            let wq = l.effective_weights().unwrap();
            let y = l.forward_with(&wq, &x).unwrap();
            let up = crate::tensor::elementwise(ElementwiseOp::Sub, &y, Some(&t)).unwrap();
            let g = l.backward(&up, &x).unwrap();
            let h = 1e-6;
            for i in 0..wq.len() {
                let mut plus = wq.clone();
                plus.data_mut()[i] += h;
                let mut minus = wq.clone();
                minus.data_mut()[i] -= h;
                let fd = (quantized_loss(&plus, &l, &x, &t) - quantized_loss(&minus, &l, &x, &t)) / (2.0 * h);
                let an = g.weight.data()[i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "seed {seed} idx {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = RngState::new(4);
        let l = layer(&mut rng, 5, 2);
        assert!(l.forward(&DenseTensor::zeros(&[1, 4])).is_err());
        assert!(l.backward(&DenseTensor::zeros(&[1, 3]), &DenseTensor::zeros(&[1, 5])).is_err());
        assert!(FakeQuantLinear::new(DenseTensor::zeros(&[2, 2]), DenseTensor::zeros(&[3]), 64).is_err());
    }
}
