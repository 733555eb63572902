//! The `otaro` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (files, formats),
//! 3 numerical abort (divergence, non-finite gradients).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{self, AnalysisError, GradientView};
use crate::container::{self, Container, ContainerError, DeviceModelSpec, KvPrecision, StoragePrecision};
use crate::sefp::{self, BitWidthConfig, BitWidthSet, CodecError, RoundingMode};
use crate::tensor::RngState;
use crate::train::{
    build_task, evaluate_all_widths, train, Batch, Dataset, ModelError, QuantModel, Strategy, Task, TaskOptions,
    TrainConfig, TrainError, TrainReport, WidthEval,
};

/// Version of every CSV layout this tool writes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::InvalidConfig { .. } | CodecError::BadLabel(_) | CodecError::Widening { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn numerical_codec(e: &CodecError) -> bool {
    matches!(e, CodecError::NonFinite { .. } | CodecError::ExponentOverflow { .. })
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Codec(c) if numerical_codec(c) => CliError::Numerical(e.to_string()),
            ModelError::Layer(crate::fakequant::LayerError::Codec(c)) if numerical_codec(c) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Model(m) => m.into(),
            TrainError::Codec(c) if numerical_codec(&c) => CliError::Numerical(c.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Model(m) => m.into(),
            AnalysisError::NonFinite | AnalysisError::ZeroGradients | AnalysisError::Solver(_) => {
                CliError::Numerical(e.to_string())
            }
            AnalysisError::BadParam(_) | AnalysisError::TooFewSamples { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "otaro", version, about = "Multi-precision SEFP quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a raw float file into a .sefp container.
    Quantize(QuantizeArgs),
    /// Lower the precision of a container by mantissa truncation.
    Convert(ConvertArgs),
    /// Decode a container back to a raw float file.
    Dequantize(DequantizeArgs),
    /// Train a toy model and write traces, evaluations and the final model.
    Train(TrainArgs),
    /// Gradient diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Weight plus KV-cache memory for a model spec file.
    EstimateMem(EstimateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Rounding {
    Truncate,
    Rne,
}

impl From<Rounding> for RoundingMode {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Truncate => RoundingMode::TruncateTowardZero,
            Rounding::Rne => RoundingMode::RoundHalfEven,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "m", value_parser = clap::value_parser!(u8).range(3..=8))]
    pub mantissa_bits: u8,
    #[arg(long = "e", default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub exponent_bits: u8,
    #[arg(long, default_value_t = sefp::DEFAULT_GROUP_SIZE, value_parser = positive)]
    pub group_size: usize,
    #[arg(long, value_enum, default_value = "truncate")]
    pub rounding: Rounding,
    /// Tensor name inside the container.
    #[arg(long, default_value = "tensor")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "m", value_parser = clap::value_parser!(u8).range(3..=8))]
    pub mantissa_bits: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Only this tensor; all tensors concatenated in file order otherwise.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct TaskArgs {
    #[arg(long, default_value = "mlp")]
    pub task: Task,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plain-text corpus for charlm (bundled sample otherwise).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub batch_size: usize,
    #[arg(long, default_value_t = sefp::DEFAULT_GROUP_SIZE, value_parser = positive)]
    pub group_size: usize,
    #[arg(long, default_value_t = 6, value_parser = positive)]
    pub context: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    pub embed_dim: usize,
    /// Full-precision epochs run before the main phase.
    #[arg(long, default_value_t = 0)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub pretrain_lr: f64,
}

impl TaskArgs {
    fn options(&self) -> TaskOptions {
        let mut o = TaskOptions::new(self.task, self.seed);
        o.corpus = self.corpus.clone();
        o.hidden = self.hidden;
        o.batch_size = self.batch_size;
        o.group_size = self.group_size;
        o.context = self.context;
        o.embed_dim = self.embed_dim;
        o
    }

    /// Builds the task and runs the optional full-precision warm start.
    fn prepare(&self) -> Result<crate::train::TaskSetup, CliError> {
        let mut setup = build_task(&self.options()).map_err(CliError::Data)?;
        if self.pretrain_epochs > 0 {
            let cfg = TrainConfig {
                eta: self.pretrain_lr,
                epochs: self.pretrain_epochs,
                strategy: Strategy::FullPrecision,
                group_size: self.group_size,
                seed: self.seed.wrapping_add(1),
                ..TrainConfig::default()
            };
            train(&mut setup.model, &setup.train, None, &cfg)?;
        }
        Ok(setup)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value = "otaro")]
    pub strategy: Strategy,
    #[arg(long, default_value = "E5M8..E5M3")]
    pub widths: BitWidthSet,
    #[arg(long, default_value_t = crate::bps::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = crate::laa::DEFAULT_DELAY)]
    pub delay: usize,
    /// Widths whose gradients go through delayed accumulation.
    #[arg(long, default_value = "E5M4,E5M3")]
    pub low_set: BitWidthSet,
    /// Divide the accumulated gradient by the delay instead of summing.
    #[arg(long)]
    pub average_accumulation: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    pub epochs: usize,
    #[arg(long)]
    pub max_batches: Option<u64>,
    /// Evaluate every width after each epoch as well as at the end.
    #[arg(long)]
    pub eval_each_epoch: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalysisModelArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Number of sampled batches.
    #[arg(long, default_value_t = 100, value_parser = positive)]
    pub batches: usize,
    /// Parameter tensor to inspect; the last quantized weight by default.
    #[arg(long)]
    pub param: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

impl AnalysisModelArgs {
    fn view<M: QuantModel>(&self, model: &M) -> GradientView {
        match self.param {
            Some(p) => GradientView::Param(p),
            None => GradientView::last_quantized(model),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Pairwise gradient cosine similarity across widths.
    Cosine {
        #[command(flatten)]
        common: AnalysisModelArgs,
        #[arg(long, default_value = "E5M8..E5M3")]
        widths: BitWidthSet,
    },
    /// Least-squares fit of the SEFP gradient as a linear map of the unquantized one.
    Lsm {
        #[command(flatten)]
        common: AnalysisModelArgs,
        #[arg(long = "m", default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=11))]
        mantissa_bits: u8,
        /// Coordinates of the parameter tensor kept in the fit.
        #[arg(long, default_value_t = 32, value_parser = positive)]
        coords: usize,
        /// Also write the fitted map as a CSV matrix.
        #[arg(long)]
        x_out: Option<PathBuf>,
    },
    /// Scan of the rounding-error sawtooth on [0, 1).
    Sawtooth {
        #[arg(long = "m", default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=11))]
        mantissa_bits: u8,
        /// Grid points; at least 16 * 2^m.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-batch gradient-norm error at each width.
    Norms {
        #[command(flatten)]
        common: AnalysisModelArgs,
        #[arg(long, default_value = "E5M8..E5M3")]
        widths: BitWidthSet,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KvArg {
    Fp16,
    Same,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// JSON model spec.
    #[arg(long)]
    pub spec: PathBuf,
    /// fp16 or an SEFP label such as E5M4.
    #[arg(long)]
    pub precision: StoragePrecision,
    #[arg(long, default_value_t = sefp::DEFAULT_GROUP_SIZE, value_parser = positive)]
    pub group_size: usize,
    /// Overrides the spec file's KV-cache precision.
    #[arg(long, value_enum)]
    pub kv: Option<KvArg>,
    #[arg(long)]
    pub json: bool,
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match execute(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Quantize(a) => quantize_cmd(a, out),
        Command::Convert(a) => convert_cmd(a, out),
        Command::Dequantize(a) => dequantize_cmd(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Analyze(a) => analyze_cmd(a, out),
        Command::EstimateMem(a) => estimate_cmd(a, out),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{text}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

/// Reads a raw float file: u64 LE count, then that many f32 LE values.
pub fn read_raw_floats(path: &Path) -> Result<Vec<f32>, CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| data_err(path, e))?;
    if bytes.len() < 8 {
        return Err(data_err(path, "shorter than the 8-byte length prefix"));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let body = &bytes[8..];
    if count.checked_mul(4) != Some(body.len() as u64) {
        return Err(data_err(
            path,
            format!("length prefix says {count} floats but {} payload bytes follow", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_raw_floats(path: &Path, values: &[f32]) -> Result<(), CliError> {
    let mut bytes = Vec::with_capacity(8 + 4 * values.len());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| data_err(path, e))
}

fn distinct_paths(input: &Path, output: &Path) -> Result<(), CliError> {
    let same = match (fs::canonicalize(input), fs::canonicalize(output)) {
        (Ok(a), Ok(b)) => a == b,
        _ => input == output,
    };
    if same {
        return Err(CliError::Usage(format!(
            "--out {} would overwrite the input file",
            output.display()
        )));
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<Container, CliError> {
    let f = File::open(path).map_err(|e| data_err(path, e))?;
    container::read(&mut BufReader::new(f)).map_err(|e| data_err(path, e))
}

fn write_container(path: &Path, c: &Container) -> Result<usize, CliError> {
    let f = File::create(path).map_err(|e| data_err(path, e))?;
    let mut w = BufWriter::new(f);
    let n = container::write(c, &mut w).map_err(|e| data_err(path, e))?;
    w.flush().map_err(|e| data_err(path, e))?;
    Ok(n)
}

fn quantize_cmd(a: QuantizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    distinct_paths(&a.input, &a.out)?;
    let values: Vec<f64> = read_raw_floats(&a.input)?.into_iter().map(f64::from).collect();
    let config = BitWidthConfig::new(a.exponent_bits, a.mantissa_bits)?;
    let t = sefp::quantize(&values, config, a.group_size, a.rounding.into())
        .map_err(|e| data_err(&a.input, e))?;
    let mut c = Container::new(config, a.group_size);
    c.push(a.name, t)?;
    let n = write_container(&a.out, &c)?;
    say(out, format_args!("wrote {} values as {config} ({n} bytes) to {}", values.len(), a.out.display()))
}

fn convert_cmd(a: ConvertArgs, out: &mut dyn Write) -> Result<(), CliError> {
    distinct_paths(&a.input, &a.out)?;
    let c = read_container(&a.input)?;
    let from = c.config();
    let target = from.with_mantissa_bits(a.mantissa_bits)?;
    let lowered = c.try_map(|t| sefp::truncate_precision(t, target))?;
    let lowered = if lowered.tensors().is_empty() {
        Container::new(target, lowered.group_size())
    } else {
        lowered
    };
    let n = write_container(&a.out, &lowered)?;
    say(out, format_args!("converted {from} -> {target} ({n} bytes) to {}", a.out.display()))
}

fn dequantize_cmd(a: DequantizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    distinct_paths(&a.input, &a.out)?;
    let c = read_container(&a.input)?;
    let tensors: Vec<_> = match &a.name {
        Some(n) => vec![c
            .get(n)
            .ok_or_else(|| data_err(&a.input, format!("no tensor named {n:?}")))?],
        None => c.tensors().iter().map(|(_, t)| t).collect(),
    };
    let values: Vec<f32> = tensors
        .iter()
        .flat_map(|t| sefp::dequantize(t))
        .map(|v| v as f32)
        .collect();
    write_raw_floats(&a.out, &values)?;
    say(out, format_args!("wrote {} values to {}", values.len(), a.out.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| data_err(path, e))
}

fn csv_row<I, S>(w: &mut csv::Writer<File>, path: &Path, row: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| data_err(path, e))
}

fn csv_done(mut w: csv::Writer<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| data_err(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `batch,epoch,selected,loss,laa_counter,updated,score_<w>...,loss_est_<w>...`
pub fn write_trace_csv(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let labels: Vec<String> = report.widths.iter().map(|w| w.label()).collect();
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = ["batch", "epoch", "selected", "loss", "laa_counter", "updated"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(labels.iter().map(|l| format!("score_{l}")));
    header.extend(labels.iter().map(|l| format!("loss_est_{l}")));
    csv_row(&mut w, path, &header)?;
    for r in &report.trace {
        let mut row = vec![
            r.batch.to_string(),
            r.epoch.to_string(),
            r.selected.clone(),
            r.loss.to_string(),
            r.laa_counter.to_string(),
            u8::from(r.updated).to_string(),
        ];
        for k in 0..labels.len() {
            row.push(opt(r.scores.get(k).copied().flatten()));
        }
        for k in 0..labels.len() {
            row.push(opt(r.loss_estimates.get(k).copied().flatten()));
        }
        csv_row(&mut w, path, &row)?;
    }
    csv_done(w, path)
}

fn push_eval_rows(rows: &mut Vec<[String; 5]>, epoch: &str, evals: &[WidthEval]) {
    for e in evals {
        rows.push([
            epoch.to_string(),
            e.label.clone(),
            e.mantissa_bits.to_string(),
            e.mean_loss.to_string(),
            opt(e.perplexity),
        ]);
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    task: String,
    strategy: String,
    widths: String,
    seed: u64,
    batches: usize,
    selection_histogram: Vec<(String, usize)>,
    files: [&'a str; 3],
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let low_set = a.low_set.widths().to_vec();
    if let Strategy::Fixed(w) = a.strategy {
        if !a.widths.contains(&w) {
            return Err(CliError::Usage(format!("fixed width {w} is not in --widths {}", a.widths)));
        }
    }
    let mut setup = a.task.prepare()?;
    let config = TrainConfig {
        eta: a.lr,
        epochs: a.epochs,
        max_batches: a.max_batches,
        lambda: a.lambda,
        delay: a.delay,
        average_accumulation: a.average_accumulation,
        group_size: a.task.group_size,
        widths: a.widths.clone(),
        low_set,
        seed: a.task.seed,
        strategy: a.strategy,
        eval_each_epoch: a.eval_each_epoch,
        ..TrainConfig::default()
    };
    let report = train(&mut setup.model, &setup.train, Some(&setup.eval), &config)?;
    let final_eval = evaluate_all_widths(&setup.model, &setup.eval, &a.widths)?;

    fs::create_dir_all(&a.out_dir).map_err(|e| data_err(&a.out_dir, e))?;
    let trace_path = a.out_dir.join("trace.csv");
    write_trace_csv(&trace_path, &report)?;

    let eval_path = a.out_dir.join("eval.csv");
    let mut rows = Vec::new();
    for e in &report.epoch_evals {
        push_eval_rows(&mut rows, &e.epoch.to_string(), &e.widths);
    }
    push_eval_rows(&mut rows, "final", &final_eval);
    let mut w = csv_writer(&eval_path)?;
    csv_row(&mut w, &eval_path, ["epoch", "width", "mantissa_bits", "mean_loss", "perplexity"])?;
    for r in &rows {
        csv_row(&mut w, &eval_path, r)?;
    }
    csv_done(w, &eval_path)?;

    let model_path = a.out_dir.join("model.sefp");
    let c = Container::from_tensors(setup.model.encode(a.widths.highest())?)?;
    write_container(&model_path, &c)?;

    let manifest = Manifest {
        schema_version: CSV_SCHEMA_VERSION,
        task: a.task.task.to_string(),
        strategy: a.strategy.to_string(),
        widths: a.widths.to_string(),
        seed: a.task.seed,
        batches: report.trace.len(),
        selection_histogram: report.selection_histogram(),
        files: ["trace.csv", "eval.csv", "model.sefp"],
    };
    let manifest_path = a.out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| data_err(&manifest_path, e))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| data_err(&manifest_path, e))?;

    say(out, format_args!("{} batches, strategy {}", report.trace.len(), a.strategy))?;
    for e in &final_eval {
        match e.perplexity {
            Some(p) => say(out, format_args!("{:>6}  loss {:.5}  ppl {:.4}", e.label, e.mean_loss, p))?,
            None => say(out, format_args!("{:>6}  loss {:.5}", e.label, e.mean_loss))?,
        }
    }
    say(out, format_args!("outputs in {}", a.out_dir.display()))
}

/// The first `n` shuffled batches, cycling through epochs as needed.
pub fn sample_batches(data: &Dataset, n: usize, seed: u64) -> Vec<Batch> {
    let mut out = Vec::with_capacity(n);
    let mut epoch = 0;
    while out.len() < n {
        let batches = data.epoch(seed, epoch);
        let need = n - out.len();
        out.extend(batches.into_iter().take(need));
        epoch += 1;
    }
    out
}

fn analyze_cmd(cmd: AnalyzeCommand, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        AnalyzeCommand::Sawtooth {
            mantissa_bits,
            samples,
            out: path,
        } => {
            let samples = samples.unwrap_or(16usize << mantissa_bits);
            let p = analysis::sawtooth_profile(mantissa_bits, samples)?;
            let mut w = csv_writer(&path)?;
            csv_row(&mut w, &path, ["w", "epsilon"])?;
            for (x, e) in p.grid.iter().zip(&p.epsilon) {
                csv_row(&mut w, &path, [x.to_string(), e.to_string()])?;
            }
            csv_done(w, &path)?;
            say(out, format_args!("m={mantissa_bits} period {} peak_to_peak {}", p.period, p.peak_to_peak))
        }
        AnalyzeCommand::Cosine { common, widths } => {
            let setup = common.task.prepare()?;
            let view = common.view(&setup.model);
            let batches = sample_batches(&setup.train, common.batches, common.task.seed.wrapping_add(2));
            let labels: Vec<String> = widths.iter().map(|w| w.label()).collect();
            let k = labels.len();
            let mut sums = vec![vec![0.0; k]; k];
            let mut w = csv_writer(&common.out)?;
            csv_row(&mut w, &common.out, ["batch", "width_a", "width_b", "cosine"])?;
            for (b, batch) in batches.iter().enumerate() {
                let table = analysis::cross_width_cosine_table(&setup.model, batch, &widths, &view)?;
                for i in 0..k {
                    for j in 0..k {
                        sums[i][j] += table.entries[i][j];
                        if j > i {
                            csv_row(
                                &mut w,
                                &common.out,
                                [b.to_string(), labels[i].clone(), labels[j].clone(), table.entries[i][j].to_string()],
                            )?;
                        }
                    }
                }
            }
            csv_done(w, &common.out)?;
            say(out, format_args!("mean cosine over {} batches", batches.len()))?;
            say(out, format_args!("{:>6} {}", "", labels.iter().map(|l| format!("{l:>7}")).collect::<String>()))?;
            for (i, l) in labels.iter().enumerate() {
                let row: String = sums[i].iter().map(|s| format!("{:>7.4}", s / batches.len() as f64)).collect();
                say(out, format_args!("{l:>6} {row}"))?;
            }
            Ok(())
        }
        AnalyzeCommand::Norms { common, widths } => {
            let setup = common.task.prepare()?;
            let view = common.view(&setup.model);
            let batches = sample_batches(&setup.train, common.batches, common.task.seed.wrapping_add(2));
            let mut w = csv_writer(&common.out)?;
            csv_row(&mut w, &common.out, ["batch", "width", "norm_error"])?;
            let mut summary = Vec::new();
            for width in widths.iter() {
                let series = analysis::norm_error_series(&setup.model, &batches, *width, &view)?;
                for (b, v) in series.iter().enumerate() {
                    csv_row(&mut w, &common.out, [b.to_string(), width.label(), v.to_string()])?;
                }
                summary.push((width.label(), analysis::variance(&series)));
            }
            csv_done(w, &common.out)?;
            for (l, v) in summary {
                say(out, format_args!("{l:>6}  variance {v:.6e}"))?;
            }
            Ok(())
        }
        AnalyzeCommand::Lsm {
            common,
            mantissa_bits,
            coords,
            x_out,
        } => {
            let setup = common.task.prepare()?;
            let param = match common.view(&setup.model) {
                GradientView::Param(p) => p,
                _ => unreachable!("view is always a single tensor here"),
            };
            let size = setup
                .model
                .params()
                .get(param)
                .map(|p| p.len())
                .ok_or(AnalysisError::BadParam(param))?;
            let mut rng = RngState::new(common.task.seed.wrapping_add(3));
            let picked = analysis::sample_coordinates(size, coords, &mut rng);
            let view = GradientView::Coords {
                param,
                coords: picked.clone(),
            };
            let batches = sample_batches(&setup.train, common.batches, common.task.seed.wrapping_add(2));
            let width = BitWidthConfig::new(5, mantissa_bits)?;
            let pair = analysis::collect_gradient_pairs(&setup.model, &batches, width, &view)?;
            let est = analysis::estimate_linear_map(&pair)?;
            let d = pair.dim();
            let mut w = csv_writer(&common.out)?;
            csv_row(&mut w, &common.out, ["batch", "coord", "g_fp", "g_sefp", "y"])?;
            for i in 0..pair.batches() {
                for (j, coord) in picked.iter().enumerate() {
                    csv_row(
                        &mut w,
                        &common.out,
                        [
                            i.to_string(),
                            coord.to_string(),
                            pair.g_fp().data()[i * d + j].to_string(),
                            pair.g().data()[i * d + j].to_string(),
                            est.y.data()[i * d + j].to_string(),
                        ],
                    )?;
                }
            }
            csv_done(w, &common.out)?;
            if let Some(xp) = x_out {
                let mut w = csv_writer(&xp)?;
                let header: Vec<String> = picked.iter().map(|c| format!("c{c}")).collect();
                csv_row(&mut w, &xp, &header)?;
                for i in 0..d {
                    csv_row(&mut w, &xp, est.x.row(i).iter().map(|v| v.to_string()))?;
                }
                csv_done(w, &xp)?;
            }
            let rel = est.y.norm() / pair.g().norm().max(f64::MIN_POSITIVE);
            let max_mean = est.residual_mean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            say(out, format_args!("N={} d={d} rank {} condition {:.4e}", pair.batches(), est.rank, est.condition))?;
            say(out, format_args!("relative residual {rel:.6e}, max |column mean of Y| {max_mean:.6e}"))
        }
    }
}

fn estimate_cmd(a: EstimateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.spec).map_err(|e| data_err(&a.spec, e))?;
    let mut spec: DeviceModelSpec = serde_json::from_str(&text).map_err(|e| data_err(&a.spec, e))?;
    spec.validate().map_err(|e| data_err(&a.spec, e))?;
    if let Some(kv) = a.kv {
        spec.kv_precision = match kv {
            KvArg::Fp16 => KvPrecision::Fp16,
            KvArg::Same => KvPrecision::SameAsWeights,
        };
    }
    let est = container::estimate_memory(&spec, a.precision, a.group_size);
    if a.json {
        let json = serde_json::json!({
            "model": spec.name,
            "precision": a.precision.to_string(),
            "group_size": a.group_size,
            "bits_per_weight": est.bits_per_weight,
            "weight_bytes": est.weight_bytes,
            "kv_bytes": est.kv_bytes,
            "total_bytes": est.total_bytes,
            "total_gib": est.total_gib(),
        });
        return say(out, format_args!("{json}"));
    }
    say(out, format_args!("model            {}", spec.name))?;
    say(out, format_args!("precision        {} (group {})", a.precision, a.group_size))?;
    say(out, format_args!("bits_per_weight  {}", est.bits_per_weight))?;
    say(out, format_args!("weight_bytes     {:.0}", est.weight_bytes))?;
    say(out, format_args!("kv_bytes         {:.0}", est.kv_bytes))?;
    say(out, format_args!("total_gib        {:.2}", est.total_gib()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["otaro", "quantize", "--bogus"]), 1);
        assert_eq!(run(["otaro", "frobnicate"]), 1);
        assert_eq!(run(["otaro", "--help"]), 0);
    }

    #[test]
    fn raw_float_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        write_raw_floats(&p, &[1.0, -0.5, 3.25]).unwrap();
        assert_eq!(read_raw_floats(&p).unwrap(), vec![1.0, -0.5, 3.25]);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_raw_floats(&p), Err(CliError::Data(_))));
    }

    #[test]
    fn error_classes() {
        let diverged = TrainError::Diverged {
            batch: 3,
            loss: 1e9,
            initial: 1.0,
        };
        assert_eq!(CliError::from(diverged).exit_code(), 3);
        assert_eq!(CliError::from(TrainError::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(ContainerError::UnknownVersion(9)).exit_code(), 2);
    }
}
