//! Toy models trained with fake-quantized linear layers.

use thiserror::Error;

use crate::fakequant::{FakeQuantLinear, LayerError, Precision};
use crate::sefp::{self, BitWidthConfig, CodecError, RoundingMode, SefpTensor};
use crate::tensor::{DenseTensor, RngState, TensorError};

use super::data::Batch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("batch does not fit the model: {0}")]
    BadBatch(String),
    #[error("expected {expected} tensors, got {found}")]
    TensorCount { expected: usize, found: usize },
}

/// A model whose quantizable weights can be evaluated at any precision.
pub trait QuantModel: Clone {
    fn architecture(&self) -> &'static str;

    /// Parameter names, in the order used by every gradient vector.
    fn param_names(&self) -> Vec<String>;

    fn params(&self) -> Vec<&DenseTensor>;

    fn params_mut(&mut self) -> Vec<&mut DenseTensor>;

    /// Indices (into `params`) of the weights that pass through the quantizer.
    fn quantized_params(&self) -> Vec<usize>;

    fn group_size(&self) -> usize;

    /// Mean batch loss with quantizable weights seen through `precision`.
    fn loss(&self, batch: &Batch, precision: Precision) -> Result<f64, ModelError>;

    /// Loss plus STE gradients for every parameter.
    fn loss_and_grads(&self, batch: &Batch, precision: Precision) -> Result<(f64, Vec<DenseTensor>), ModelError>;

    /// Cross-entropy models report perplexity alongside loss.
    fn reports_perplexity(&self) -> bool {
        false
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape().to_vec()).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Plain SGD step `w <- w - eta * g`.
    fn apply_update(&mut self, grads: &[DenseTensor], eta: f64) -> Result<(), ModelError> {
        let mut params = self.params_mut();
        if grads.len() != params.len() {
            return Err(ModelError::TensorCount {
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (p, g) in params.iter_mut().zip(grads) {
            p.axpy(-eta, g)?;
        }
        Ok(())
    }

    /// SEFP encodings of the quantizable weights at `width`.
    fn encode(&self, width: BitWidthConfig) -> Result<Vec<(String, SefpTensor)>, ModelError> {
        let names = self.param_names();
        let params = self.params();
        self.quantized_params()
            .into_iter()
            .map(|i| {
                let p = params[i];
                let q = sefp::quantize_with_shape(
                    p.data(),
                    p.shape().to_vec(),
                    width,
                    self.group_size(),
                    RoundingMode::TruncateTowardZero,
                )?;
                Ok((names[i].clone(), q))
            })
            .collect()
    }

    /// Replaces the quantizable weights by decoded SEFP tensors (same order as `encode`).
    fn load_quantized(&mut self, tensors: &[SefpTensor]) -> Result<(), ModelError> {
        let idx = self.quantized_params();
        if idx.len() != tensors.len() {
            return Err(ModelError::TensorCount {
                expected: idx.len(),
                found: tensors.len(),
            });
        }
        let mut params = self.params_mut();
        for (&i, t) in idx.iter().zip(tensors) {
            let decoded = DenseTensor::new(t.shape().to_vec(), sefp::dequantize(t))?;
            params[i].same_shape(&decoded, "load")?;
            *params[i] = decoded;
        }
        Ok(())
    }
}

/// Two-layer regressor `x -> relu(W1 x + b1) -> W2 h + b2`, squared-error loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRegressor {
    hidden: FakeQuantLinear,
    output: FakeQuantLinear,
}

impl MlpRegressor {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, group_size: usize, rng: &mut RngState) -> Self {
        Self {
            hidden: FakeQuantLinear::random(inputs, hidden, rng).with_group_size(group_size),
            output: FakeQuantLinear::random(hidden, outputs, rng).with_group_size(group_size),
        }
    }

    pub fn layers(&self) -> [&FakeQuantLinear; 2] {
        [&self.hidden, &self.output]
    }

    fn check(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.x.cols() != self.hidden.inputs() || batch.y.cols() != self.output.outputs() || batch.x.rows() != batch.y.rows() {
            return Err(ModelError::BadBatch(format!(
                "x {:?}, y {:?} for a {}-in {}-out regressor",
                batch.x.shape(),
                batch.y.shape(),
                self.hidden.inputs(),
                self.output.outputs()
            )));
        }
        Ok(())
    }

    fn run(&self, batch: &Batch, precision: Precision, grads: bool) -> Result<(f64, Vec<DenseTensor>), ModelError> {
        self.check(batch)?;
        let w1 = self.hidden.weights_at(precision)?;
        let w2 = self.output.weights_at(precision)?;
        let pre = self.hidden.forward_with(&w1, &batch.x)?;
        let act = relu(&pre);
        let pred = self.output.forward_with(&w2, &act)?;

        let n = batch.x.rows() as f64;
        let diff: Vec<f64> = pred.data().iter().zip(batch.y.data()).map(|(p, y)| p - y).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        if !grads {
            return Ok((loss, vec![]));
        }
        let upstream = DenseTensor::new(pred.shape().to_vec(), diff.iter().map(|d| 2.0 * d / n).collect())?;
        let g2 = self.output.backward_with(&w2, &upstream, &act)?;
        let dpre = relu_backward(&pre, &g2.input);
        let g1 = self.hidden.backward_with(&w1, &dpre, &batch.x)?;
        Ok((loss, vec![g1.weight, g1.bias, g2.weight, g2.bias]))
    }
}

impl QuantModel for MlpRegressor {
    fn architecture(&self) -> &'static str {
        "mlp-regressor"
    }

    fn param_names(&self) -> Vec<String> {
        ["hidden.weight", "hidden.bias", "output.weight", "output.bias"]
            .map(String::from)
            .to_vec()
    }

    fn params(&self) -> Vec<&DenseTensor> {
        vec![self.hidden.weights(), self.hidden.bias(), self.output.weights(), self.output.bias()]
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        let (h, o) = (&mut self.hidden, &mut self.output);
        let (hw, hb) = split_layer(h);
        let (ow, ob) = split_layer(o);
        vec![hw, hb, ow, ob]
    }

    fn quantized_params(&self) -> Vec<usize> {
        vec![0, 2]
    }

    fn group_size(&self) -> usize {
        self.hidden.group_size()
    }

    fn loss(&self, batch: &Batch, precision: Precision) -> Result<f64, ModelError> {
        Ok(self.run(batch, precision, false)?.0)
    }

    fn loss_and_grads(&self, batch: &Batch, precision: Precision) -> Result<(f64, Vec<DenseTensor>), ModelError> {
        self.run(batch, precision, true)
    }
}

/// Next-character model over a fixed context window.
///
/// Context characters are embedded (unquantized), concatenated, then passed
/// through two ReLU blocks and a vocabulary projection, all fake-quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLm {
    vocab: usize,
    context: usize,
    embed_dim: usize,
    embedding: DenseTensor,
    block1: FakeQuantLinear,
    block2: FakeQuantLinear,
    head: FakeQuantLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharLmShape {
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl CharLm {
    pub fn new(shape: CharLmShape, group_size: usize, rng: &mut RngState) -> Self {
        let input = shape.context * shape.embed_dim;
        Self {
            vocab: shape.vocab,
            context: shape.context,
            embed_dim: shape.embed_dim,
            embedding: rng.normal_tensor(&[shape.vocab, shape.embed_dim], 0.5),
            block1: FakeQuantLinear::random(input, shape.hidden, rng).with_group_size(group_size),
            block2: FakeQuantLinear::random(shape.hidden, shape.hidden, rng).with_group_size(group_size),
            head: FakeQuantLinear::random(shape.hidden, shape.vocab, rng).with_group_size(group_size),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn context(&self) -> usize {
        self.context
    }

    fn tokens(&self, batch: &Batch) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        if batch.x.cols() != self.context || batch.y.cols() != 1 || batch.x.rows() != batch.y.rows() {
            return Err(ModelError::BadBatch(format!(
                "x {:?}, y {:?} for context {}",
                batch.x.shape(),
                batch.y.shape(),
                self.context
            )));
        }
        let to_index = |v: f64| -> Result<usize, ModelError> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < self.vocab {
                Ok(v as usize)
            } else {
                Err(ModelError::BadBatch(format!("token {v} outside vocabulary of {}", self.vocab)))
            }
        };
        let ctx = batch.x.data().iter().map(|&v| to_index(v)).collect::<Result<_, _>>()?;
        let tgt = batch.y.data().iter().map(|&v| to_index(v)).collect::<Result<_, _>>()?;
        Ok((ctx, tgt))
    }

    fn run(&self, batch: &Batch, precision: Precision, grads: bool) -> Result<(f64, Vec<DenseTensor>), ModelError> {
        let (ctx, targets) = self.tokens(batch)?;
        let n = targets.len();
        let e = self.embed_dim;
        let width = self.context * e;
        let mut input = vec![0.0; n * width];
        for (slot, &tok) in input.chunks_mut(e).zip(&ctx) {
            slot.copy_from_slice(&self.embedding.data()[tok * e..(tok + 1) * e]);
        }
        let input = DenseTensor::new(vec![n, width], input)?;

        let w1 = self.block1.weights_at(precision)?;
        let w2 = self.block2.weights_at(precision)?;
        let w3 = self.head.weights_at(precision)?;
        let pre1 = self.block1.forward_with(&w1, &input)?;
        let h1 = relu(&pre1);
        let pre2 = self.block2.forward_with(&w2, &h1)?;
        let h2 = relu(&pre2);
        let logits = self.head.forward_with(&w3, &h2)?;
        let probs = crate::tensor::softmax_rows(&logits);

        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.row(i)[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        if !grads {
            return Ok((loss, vec![]));
        }

        let mut dlogits = probs;
        let v = self.vocab;
        for (i, &t) in targets.iter().enumerate() {
            dlogits.data_mut()[i * v + t] -= 1.0;
        }
        dlogits.data_mut().iter_mut().for_each(|g| *g /= n as f64);

        let g3 = self.head.backward_with(&w3, &dlogits, &h2)?;
        let d2 = relu_backward(&pre2, &g3.input);
        let g2 = self.block2.backward_with(&w2, &d2, &h1)?;
        let d1 = relu_backward(&pre1, &g2.input);
        let g1 = self.block1.backward_with(&w1, &d1, &input)?;

        let mut gemb = DenseTensor::zeros(self.embedding.shape());
        for (slot, &tok) in g1.input.data().chunks(e).zip(&ctx) {
            for (acc, g) in gemb.data_mut()[tok * e..(tok + 1) * e].iter_mut().zip(slot) {
                *acc += g;
            }
        }
        Ok((loss, vec![gemb, g1.weight, g1.bias, g2.weight, g2.bias, g3.weight, g3.bias]))
    }
}

impl QuantModel for CharLm {
    fn architecture(&self) -> &'static str {
        "char-lm"
    }

    fn param_names(&self) -> Vec<String> {
        [
            "embedding",
            "block1.weight",
            "block1.bias",
            "block2.weight",
            "block2.bias",
            "head.weight",
            "head.bias",
        ]
        .map(String::from)
        .to_vec()
    }

    fn params(&self) -> Vec<&DenseTensor> {
        vec![
            &self.embedding,
            self.block1.weights(),
            self.block1.bias(),
            self.block2.weights(),
            self.block2.bias(),
            self.head.weights(),
            self.head.bias(),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        let (w1, b1) = split_layer(&mut self.block1);
        let (w2, b2) = split_layer(&mut self.block2);
        let (w3, b3) = split_layer(&mut self.head);
        vec![&mut self.embedding, w1, b1, w2, b2, w3, b3]
    }

    fn quantized_params(&self) -> Vec<usize> {
        vec![1, 3, 5]
    }

    fn group_size(&self) -> usize {
        self.head.group_size()
    }

    fn loss(&self, batch: &Batch, precision: Precision) -> Result<f64, ModelError> {
        Ok(self.run(batch, precision, false)?.0)
    }

    fn loss_and_grads(&self, batch: &Batch, precision: Precision) -> Result<(f64, Vec<DenseTensor>), ModelError> {
        self.run(batch, precision, true)
    }

    fn reports_perplexity(&self) -> bool {
        true
    }
}

/// Either toy architecture, for callers that pick one at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum ToyModel {
    Mlp(MlpRegressor),
    CharLm(CharLm),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            ToyModel::Mlp($m) => $e,
            ToyModel::CharLm($m) => $e,
        }
    };
}

impl QuantModel for ToyModel {
    fn architecture(&self) -> &'static str {
        delegate!(self, m => m.architecture())
    }

    fn param_names(&self) -> Vec<String> {
        delegate!(self, m => m.param_names())
    }

    fn params(&self) -> Vec<&DenseTensor> {
        delegate!(self, m => m.params())
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        delegate!(self, m => m.params_mut())
    }

    fn quantized_params(&self) -> Vec<usize> {
        delegate!(self, m => m.quantized_params())
    }

    fn group_size(&self) -> usize {
        delegate!(self, m => m.group_size())
    }

    fn loss(&self, batch: &Batch, precision: Precision) -> Result<f64, ModelError> {
        delegate!(self, m => m.loss(batch, precision))
    }

    fn loss_and_grads(&self, batch: &Batch, precision: Precision) -> Result<(f64, Vec<DenseTensor>), ModelError> {
        delegate!(self, m => m.loss_and_grads(batch, precision))
    }

    fn reports_perplexity(&self) -> bool {
        delegate!(self, m => m.reports_perplexity())
    }
}

fn split_layer(layer: &mut FakeQuantLinear) -> (&mut DenseTensor, &mut DenseTensor) {
    layer.parts_mut()
}

fn relu(x: &DenseTensor) -> DenseTensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    DenseTensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn relu_backward(pre: &DenseTensor, upstream: &DenseTensor) -> DenseTensor {
    let data = pre
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    DenseTensor::new(pre.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check<M: QuantModel>(model: &M, batch: &Batch, tol: f64) {
        let (_, grads) = model.loss_and_grads(batch, Precision::Full).unwrap();
        let h = 1e-5;
        let mut probe = model.clone();
        for (p, g) in grads.iter().enumerate() {
            // a spread of coordinates keeps the check quick on larger tensors
            let step = (g.len() / 25).max(1);
            for i in (0..g.len()).step_by(step) {
                let orig = probe.params()[p].data()[i];
                probe.params_mut()[p].data_mut()[i] = orig + h;
                let up = probe.loss(batch, Precision::Full).unwrap();
                probe.params_mut()[p].data_mut()[i] = orig - h;
                let down = probe.loss(batch, Precision::Full).unwrap();
                probe.params_mut()[p].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.data()[i];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(rel < tol, "param {p} idx {i}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = RngState::new(3);
        let model = MlpRegressor::new(5, 12, 2, 64, &mut rng);
        let batch = Batch {
            x: rng.normal_tensor(&[7, 5], 1.0),
            y: rng.normal_tensor(&[7, 2], 1.0),
        };
        fd_check(&model, &batch, 1e-4);
    }

    #[test]
    fn char_lm_backward_matches_finite_differences() {
        let mut rng = RngState::new(4);
        let shape = CharLmShape {
            vocab: 9,
            context: 3,
            embed_dim: 4,
            hidden: 10,
        };
        let model = CharLm::new(shape, 64, &mut rng);
        let x: Vec<f64> = (0..15).map(|_| rng.index(9) as f64).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.index(9) as f64).collect();
        let batch = Batch {
            x: DenseTensor::new(vec![5, 3], x).unwrap(),
            y: DenseTensor::new(vec![5, 1], y).unwrap(),
        };
        fd_check(&model, &batch, 1e-4);
    }

    #[test]
    fn uniform_predictor_has_vocab_perplexity() {
        let mut rng = RngState::new(0);
        let shape = CharLmShape {
            vocab: 13,
            context: 2,
            embed_dim: 3,
            hidden: 8,
        };
        let mut model = CharLm::new(shape, 64, &mut rng);
        // zero head => equal logits for every symbol
        for p in [5, 6] {
            model.params_mut()[p].fill(0.0);
        }
        let batch = Batch {
            x: DenseTensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
            y: DenseTensor::new(vec![2, 1], vec![4.0, 12.0]).unwrap(),
        };
        let loss = model.loss(&batch, Precision::Full).unwrap();
        assert!((loss.exp() - 13.0).abs() < 1e-9);
    }

    #[test]
    fn encode_and_load_round_trip_through_codec() {
        let mut rng = RngState::new(8);
        let model = MlpRegressor::new(4, 16, 1, 64, &mut rng);
        let width = BitWidthConfig::e5(5);
        let codes: Vec<SefpTensor> = model.encode(width).unwrap().into_iter().map(|(_, t)| t).collect();
        let mut loaded = model.clone();
        loaded.load_quantized(&codes).unwrap();
        let batch = Batch {
            x: rng.normal_tensor(&[3, 4], 1.0),
            y: rng.normal_tensor(&[3, 1], 1.0),
        };
        assert_eq!(
            loaded.loss(&batch, Precision::Full).unwrap(),
            model.loss(&batch, Precision::Sefp(width)).unwrap()
        );
    }

    #[test]
    fn rejects_mismatched_batches() {
        let mut rng = RngState::new(1);
        let model = MlpRegressor::new(4, 8, 1, 64, &mut rng);
        let bad = Batch {
            x: DenseTensor::zeros(&[2, 3]),
            y: DenseTensor::zeros(&[2, 1]),
        };
        assert!(matches!(model.loss(&bad, Precision::Full), Err(ModelError::BadBatch(_))));
    }
}
