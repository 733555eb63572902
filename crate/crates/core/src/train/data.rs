use std::collections::BTreeSet;
use std::path::Path;

use crate::tensor::{DenseTensor, RngState};

/// A public-domain sample used by the char-lm task when no corpus is given.
pub const SAMPLE_CORPUS: &str = include_str!("../../data/corpus.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseTensor,
    pub y: DenseTensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-aligned examples cut into fixed-size batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DenseTensor,
    y: DenseTensor,
    batch_size: usize,
}

impl Dataset {
    pub fn new(x: DenseTensor, y: DenseTensor, batch_size: usize) -> Result<Self, String> {
        if x.rows() != y.rows() {
            return Err(format!("{} inputs but {} targets", x.rows(), y.rows()));
        }
        if batch_size == 0 || batch_size > x.rows() {
            return Err(format!("batch size {batch_size} does not fit {} examples", x.rows()));
        }
        Ok(Self { x, y, batch_size })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len() / self.batch_size
    }

    fn gather(&self, rows: &[usize]) -> Batch {
        let pick = |t: &DenseTensor| {
            let c = t.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                data.extend_from_slice(t.row(r));
            }
            DenseTensor::new(vec![rows.len(), c], data).expect("row gather")
        };
        Batch {
            x: pick(&self.x),
            y: pick(&self.y),
        }
    }

    /// Shuffled full batches for one epoch; the same `(seed, epoch)` always gives the same order.
    pub fn epoch(&self, seed: u64, epoch: usize) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngState::new(seed).fork(epoch as u64).shuffle(&mut order);
        order
            .chunks_exact(self.batch_size)
            .map(|rows| self.gather(rows))
            .collect()
    }

    /// Every example in storage order, the last batch possibly short.
    pub fn sequential(&self) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(self.batch_size).map(|rows| self.gather(rows)).collect()
    }

    /// First `n` examples as a new dataset.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        let b = self.gather(&rows);
        Self {
            x: b.x,
            y: b.y,
            batch_size: self.batch_size.min(n.max(1)),
        }
    }
}

/// Smooth synthetic regression `y = sin(u·x) + 0.5 cos(v·x) + 0.2 w·x`, `x ~ N(0, I)`.
///
/// The target map (`u`, `v`, `w`) depends only on `task_seed`; `sample_seed` draws the inputs.
pub fn synthetic_regression(
    samples: usize,
    inputs: usize,
    task_seed: u64,
    sample_seed: u64,
    batch_size: usize,
) -> Result<Dataset, String> {
    let mut task = RngState::new(task_seed);
    let scale = 1.0 / (inputs as f64).sqrt();
    let u = task.normal_vec(inputs, 1.5 * scale);
    let v = task.normal_vec(inputs, 1.5 * scale);
    let w = task.normal_vec(inputs, scale);
    let mut rng = RngState::new(sample_seed);
    let x = rng.normal_tensor(&[samples, inputs], 1.0);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let y: Vec<f64> = (0..samples)
        .map(|i| {
            let r = x.row(i);
            dot(&u, r).sin() + 0.5 * dot(&v, r).cos() + 0.2 * dot(&w, r)
        })
        .collect();
    Dataset::new(x, DenseTensor::new(vec![samples, 1], y).expect("shape"), batch_size)
}

/// Character vocabulary plus the token stream of a text.
#[derive(Debug, Clone, PartialEq)]
pub struct CharCorpus {
    vocab: Vec<char>,
    tokens: Vec<usize>,
}

impl CharCorpus {
    pub fn from_text(text: &str) -> Result<Self, String> {
        let vocab: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        if vocab.len() < 2 {
            return Err("corpus needs at least two distinct characters".into());
        }
        let tokens = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char in vocab"))
            .collect();
        Ok(Self { vocab, tokens })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_text(&text)
    }

    pub fn sample() -> Self {
        Self::from_text(SAMPLE_CORPUS).expect("bundled corpus")
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// `(context -> next char)` examples for token positions `range`.
    pub fn windows(
        &self,
        context: usize,
        range: std::ops::Range<usize>,
        batch_size: usize,
    ) -> Result<Dataset, String> {
        let end = range.end.min(self.tokens.len());
        let start = range.start.max(context);
        if start >= end {
            return Err(format!("no windows of context {context} in {range:?}"));
        }
        let n = end - start;
        let mut x = Vec::with_capacity(n * context);
        let mut y = Vec::with_capacity(n);
        for pos in start..end {
            x.extend(self.tokens[pos - context..pos].iter().map(|&t| t as f64));
            y.push(self.tokens[pos] as f64);
        }
        Dataset::new(
            DenseTensor::new(vec![n, context], x).expect("shape"),
            DenseTensor::new(vec![n, 1], y).expect("shape"),
            batch_size,
        )
    }

    /// Train/eval split at `train_fraction` of the token stream.
    pub fn split(
        &self,
        context: usize,
        train_fraction: f64,
        batch_size: usize,
    ) -> Result<(Dataset, Dataset), String> {
        let cut = (self.tokens.len() as f64 * train_fraction) as usize;
        let train = self.windows(context, 0..cut, batch_size)?;
        let eval = self.windows(context, cut..self.tokens.len(), batch_size)?;
        Ok((train, eval))
    }
}
