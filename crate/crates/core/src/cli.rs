//! Command-line front end: train, eval, sweep, route-trace, decompose, config.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    byte_ids, evaluate, load_corpus, train_with, EvalOptions, Model, ModelConfig, MoeSpec, TrainConfig, BYTE_VOCAB,
};
use crate::metrics::{sweep_csv, sweep_flops};
use crate::moe_layer::LayerMode;
use crate::numerics::{OptimizerKind, Tape};
use crate::routing::RoutingStrategy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

/// Environment variable that replaces `training.seed`.
pub const SEED_ENV: &str = "XMOE_SEED";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub aux_loss_weight: f32,
    /// Absent for a dense model.
    pub experts: Option<ExpertSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub num_experts: usize,
    pub expert_dim: usize,
    pub mode: LayerMode,
    pub first_block: usize,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub strategy: RoutingStrategy,
    pub threshold: f32,
    pub capacity_factor: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub log_every: usize,
    pub corpus_path: PathBuf,
}

/// One training experiment, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub router: RouterSection,
    pub training: TrainingSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let moe = model.moe.clone().expect("default model has experts");
        let train = TrainConfig::default();
        Self {
            model: ModelSection {
                num_layers: model.num_layers,
                hidden_dim: model.hidden_dim,
                num_heads: model.num_heads,
                ffn_dim: model.ffn_dim,
                vocab_size: model.vocab_size,
                max_seq_len: model.max_seq_len,
                aux_loss_weight: model.aux_loss_weight,
                experts: Some(ExpertSection {
                    num_experts: moe.num_experts,
                    expert_dim: moe.expert_dim,
                    mode: moe.mode,
                    first_block: moe.first_block,
                    every: moe.every,
                }),
            },
            router: RouterSection {
                strategy: moe.strategy,
                threshold: moe.threshold,
                capacity_factor: moe.capacity_factor,
            },
            training: TrainingSection {
                steps: train.steps,
                learning_rate: train.learning_rate,
                batch_size: train.batch_size,
                seed: train.seed,
                warmup_steps: train.warmup_steps,
                optimizer: train.optimizer,
                log_every: train.log_every,
                corpus_path: PathBuf::from("corpus.txt"),
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ExperimentConfig::default().model
    }
}

impl Default for ExpertSection {
    fn default() -> Self {
        ExperimentConfig::default().model.experts.expect("default experts")
    }
}

impl Default for RouterSection {
    fn default() -> Self {
        ExperimentConfig::default().router
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        ExperimentConfig::default().training
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config JSON: {e}")]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `XMOE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.training.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(vec![format!("{SEED_ENV}={v:?} is not an unsigned integer")]))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(vec![format!("{SEED_ENV}: {e}")])),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_heads: m.num_heads,
            ffn_dim: m.ffn_dim,
            vocab_size: m.vocab_size,
            max_seq_len: m.max_seq_len,
            aux_loss_weight: m.aux_loss_weight,
            moe: m.experts.as_ref().map(|e| MoeSpec {
                num_experts: e.num_experts,
                expert_dim: e.expert_dim,
                strategy: self.router.strategy,
                threshold: self.router.threshold,
                capacity_factor: self.router.capacity_factor,
                mode: e.mode,
                first_block: e.first_block,
                every: e.every,
            }),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: t.seed,
            warmup_steps: t.warmup_steps,
            optimizer: t.optimizer,
            log_every: t.log_every,
        }
    }

    /// Every problem with the config, including unresolvable paths.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model_config().violations();
        if self.model.vocab_size != BYTE_VOCAB {
            v.push(format!("vocab_size {} must be {BYTE_VOCAB} for byte corpora", self.model.vocab_size));
        }
        v.extend(self.train_config().violations());
        if !self.training.corpus_path.is_file() {
            v.push(format!("corpus_path {} does not name a readable file", self.training.corpus_path.display()));
        }
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        } else if self.output_dir.exists() && !self.output_dir.is_dir() {
            v.push(format!("output_dir {} exists and is not a directory", self.output_dir.display()));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "xmoe", version, about = "Threshold-routed mixture-of-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Perplexity and routing statistics of a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        input: EvalInput,
    },
    /// Evaluate a checkpoint over a grid of thresholds and capacity factors.
    Sweep {
        #[command(flatten)]
        input: EvalInput,
        #[arg(long = "t", num_args = 1.., required = true)]
        thresholds: Vec<f32>,
        #[arg(long = "gamma", num_args = 1.., required = true)]
        gammas: Vec<f32>,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-selection routing decisions of one MoE block for a piece of text.
    RouteTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based block index.
        #[arg(long)]
        layer: usize,
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        text: Option<String>,
        /// File whose bytes are traced.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split every FFN of a dense checkpoint into experts.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        experts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect experiment configs.
    Config {
        #[arg(long, required_unless_present = "check")]
        print_defaults: bool,
        /// Validate a config file without running it.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Windows per evaluation batch; capacity is enforced per batch.
    #[arg(long, default_value_t = EvalOptions::default().batch_size)]
    batch_size: usize,
    #[arg(long)]
    max_windows: Option<usize>,
}

impl EvalInput {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.batch_size,
            max_windows: self.max_windows,
        }
    }

    fn open(&self) -> Result<(Model, Vec<u8>)> {
        let corpus = load_corpus(&self.corpus)?;
        Ok((Model::load(&self.checkpoint)?, corpus))
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Data(_) | Error::Checkpoint { .. } => EXIT_CORRUPT,
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } | Error::Io { .. } => EXIT_USAGE,
    }
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&config, out, err),
        Command::Eval { input } => {
            let (model, corpus) = input.open()?;
            let report = evaluate(&model, &corpus, &input.options())?;
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")))
        }
        Command::Sweep {
            input,
            thresholds,
            gammas,
            out: path,
        } => {
            let (model, corpus) = input.open()?;
            let rows = sweep_flops(&model, &corpus, &gammas, &thresholds, &input.options())?;
            write_text(path.as_deref(), &sweep_csv(&rows), out)
        }
        Command::RouteTrace {
            checkpoint,
            layer,
            text,
            input,
            out: path,
        } => {
            let model = Model::load(&checkpoint)?;
            let bytes = match (text, input) {
                (Some(t), _) => t.into_bytes(),
                (None, Some(p)) => load_corpus(&p)?,
                (None, None) => unreachable!("clap requires --text or --input"),
            };
            let csv = route_trace(&model, layer, &bytes)?;
            write_text(path.as_deref(), &csv, out)
        }
        Command::Decompose {
            checkpoint,
            experts,
            out: path,
        } => {
            let model = Model::load(&checkpoint)?;
            let split = model.decompose(experts)?;
            split.save(&path)?;
            writeln!(err, "wrote {} ({} experts per FFN)", path.display(), experts).map_err(|e| Error::io(&path, e))
        }
        Command::Config { print_defaults, check } => {
            if let Some(path) = check {
                let mut cfg = ExperimentConfig::load(&path)?;
                cfg.apply_env()?;
                cfg.validate()?;
                emit(out, &format!("{} is valid\n", path.display()))?;
            }
            if print_defaults {
                emit(out, &format!("{}\n", ExperimentConfig::default().to_json()))?;
            }
            Ok(())
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn write_text(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => emit(out, text),
    }
}

fn cmd_train(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    let corpus = load_corpus(&cfg.training.corpus_path)?;
    let model_cfg = cfg.model_config();
    let train_cfg = cfg.train_config();
    let mut model = Model::build(&model_cfg, train_cfg.seed)?;
    if corpus.len() < 2 * model_cfg.max_seq_len {
        return Err(Error::Data(format!(
            "corpus {} holds {} bytes; training needs at least {}",
            cfg.training.corpus_path.display(),
            corpus.len(),
            2 * model_cfg.max_seq_len
        )));
    }

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_json()).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(metrics, "{}", crate::lm::StepRecord::CSV_HEADER).map_err(io)?;
    let report = train_with(&mut model, &corpus, &train_cfg, |r| {
        if train_cfg.is_logged(r.step) {
            writeln!(metrics, "{}", r.csv_row()).map_err(io)?;
            metrics.flush().map_err(io)?;
            let _ = writeln!(
                err,
                "step {:>6}  xent {:.4}  experts/token {:.2}  drop {:.3}",
                r.step, r.xent, r.mean_experts_per_token, r.drop_rate
            );
        }
        Ok(())
    })?;
    metrics.flush().map_err(io)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    let last = report.records.last().map(|r| r.xent).unwrap_or(f64::NAN);
    emit(
        out,
        &format!(
            "trained {} steps, final xent {last:.4}; wrote {} and {}\n",
            report.records.len(),
            metrics_path.display(),
            ckpt.display()
        ),
    )
}

pub const ROUTE_TRACE_HEADER: &str = "token_id,rank,expert,gate_weight,priority,kept";

/// Routing CSV for `bytes` at block `layer`.
///
/// The text is cut into consecutive `max_seq_len` windows, each routed as its
/// own batch; `token_id` is the byte offset in the input.
pub fn route_trace(model: &Model, layer: usize, bytes: &[u8]) -> Result<String> {
    if model.moe_layer(layer).is_none() {
        return Err(Error::Config(vec![format!(
            "block {layer} has no MoE layer; MoE blocks are {:?}",
            model.config().moe_blocks()
        )]));
    }
    if bytes.is_empty() {
        return Err(Error::Data("route-trace input is empty".into()));
    }
    let position = model
        .moe_layers()
        .position(|(b, _)| b == layer)
        .expect("checked above");
    let mut csv = format!("{ROUTE_TRACE_HEADER}\n");
    let seq = model.config().max_seq_len;
    for (w, window) in bytes.chunks(seq).enumerate() {
        let tokens = byte_ids(window);
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &tokens, 1, tokens.len(), None, None)?;
        let trace = &pass.layers[position].moe;
        for d in &trace.decisions {
            for (j, s) in d.selections.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    w * seq + d.token_id,
                    s.rank,
                    s.expert,
                    s.gate_weight,
                    s.priority,
                    u8::from(trace.dispatch.kept_mask[d.token_id][j])
                ));
            }
        }
    }
    Ok(csv)
}
