//! Ready-made toy tasks: a model plus train/eval data, all derived from one seed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::tensor::RngState;

use super::data::{synthetic_regression, CharCorpus, Dataset};
use super::model::{CharLm, CharLmShape, MlpRegressor, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mlp,
    CharLm,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Task::Mlp),
            "charlm" | "char-lm" => Ok(Task::CharLm),
            other => Err(format!("unknown task {other:?} (expected mlp or charlm)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mlp => "mlp",
            Task::CharLm => "charlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOptions {
    pub task: Task,
    pub seed: u64,
    pub hidden: usize,
    pub batch_size: usize,
    pub group_size: usize,
    /// mlp only.
    pub inputs: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// char-lm only; the bundled corpus when `None`.
    pub corpus: Option<PathBuf>,
    pub context: usize,
    pub embed_dim: usize,
    pub train_fraction: f64,
}

impl TaskOptions {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            hidden: 64,
            batch_size: 32,
            group_size: crate::sefp::DEFAULT_GROUP_SIZE,
            inputs: 16,
            train_samples: 4096,
            eval_samples: 1024,
            corpus: None,
            context: 6,
            embed_dim: 8,
            train_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub model: ToyModel,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn build_task(opts: &TaskOptions) -> Result<TaskSetup, String> {
    let mut rng = RngState::new(opts.seed);
    match opts.task {
        Task::Mlp => {
            let train = synthetic_regression(opts.train_samples, opts.inputs, opts.seed, opts.seed ^ 0x5eed, opts.batch_size)?;
            let eval = synthetic_regression(opts.eval_samples, opts.inputs, opts.seed, opts.seed ^ 0xe7a1, opts.batch_size)?;
            let model = MlpRegressor::new(opts.inputs, opts.hidden, 1, opts.group_size, &mut rng);
            Ok(TaskSetup {
                model: ToyModel::Mlp(model),
                train,
                eval,
            })
        }
        Task::CharLm => {
            let corpus = match &opts.corpus {
                Some(p) => CharCorpus::load(p)?,
                None => CharCorpus::sample(),
            };
            let (train, eval) = corpus.split(opts.context, opts.train_fraction, opts.batch_size)?;
            let shape = CharLmShape {
                vocab: corpus.vocab_size(),
                context: opts.context,
                embed_dim: opts.embed_dim,
                hidden: opts.hidden,
            };
            Ok(TaskSetup {
                model: ToyModel::CharLm(CharLm::new(shape, opts.group_size, &mut rng)),
                train,
                eval,
            })
        }
    }
}
