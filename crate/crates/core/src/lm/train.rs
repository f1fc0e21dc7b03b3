use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::data::BatchSampler;
use crate::lm::model::{ForwardPass, Model};
use crate::numerics::{Optimizer, OptimizerKind, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_warmup() -> usize {
    50
}

fn default_log_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-3,
            batch_size: 4,
            seed: 0,
            warmup_steps: default_warmup(),
            optimizer: OptimizerKind::Adam,
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if self.log_every == 0 {
            v.push("log_every must be positive".into());
        }
        v
    }

    /// Steps that appear in the metrics log: every `log_every`-th and the last.
    pub fn is_logged(&self, step: usize) -> bool {
        step.is_multiple_of(self.log_every.max(1)) || step + 1 == self.steps
    }

    /// Linear warmup to the base rate, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.learning_rate
        }
    }
}

/// Measurements of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub xent: f64,
    pub aux_loss: f64,
    pub ppl: f64,
    pub mean_experts_per_token: f64,
    pub drop_rate: f64,
    pub positive_act_frac: f64,
    pub normalized_flops: f64,
    /// Mean selected experts per token for each MoE layer, in block order.
    pub layer_experts: Vec<f64>,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,xent,aux_loss,ppl,mean_experts_per_token,drop_rate,positive_act_frac,normalized_flops";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.xent,
            self.aux_loss,
            self.ppl,
            self.mean_experts_per_token,
            self.drop_rate,
            self.positive_act_frac,
            self.normalized_flops
        )
    }

    pub(crate) fn from_pass(step: usize, xent: f64, pass: &ForwardPass) -> Self {
        let layer_experts: Vec<f64> = pass.layers.iter().map(|l| l.moe.mean_experts_per_token()).collect();
        let (mean_experts, drop_rate, flops) = if pass.layers.is_empty() {
            (1.0, 0.0, 1.0)
        } else {
            let n = pass.layers.len() as f64;
            (
                layer_experts.iter().sum::<f64>() / n,
                pass.layers.iter().map(|l| l.moe.dispatch.drop_rate()).sum::<f64>() / n,
                pass.layers.iter().map(|l| l.moe.flops.normalized).sum::<f64>() / n,
            )
        };
        Self {
            step,
            xent,
            aux_loss: pass.aux_loss as f64,
            ppl: xent.exp(),
            mean_experts_per_token: mean_experts,
            drop_rate,
            positive_act_frac: pass.positive_activations as f64 / pass.total_activations.max(1) as f64,
            normalized_flops: flops,
            layer_experts,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// One record per step.
    pub records: Vec<StepRecord>,
    pub log_every: usize,
}

impl TrainReport {
    pub fn is_logged(&self, step: usize) -> bool {
        step.is_multiple_of(self.log_every.max(1)) || step + 1 == self.records.len()
    }

    /// Metrics CSV at the logging cadence.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(StepRecord::CSV_HEADER);
        out.push('\n');
        for r in self.records.iter().filter(|r| self.is_logged(r.step)) {
            writeln!(out, "{}", r.csv_row()).expect("string write");
        }
        out
    }

    /// Mean of `f` over the steps in `[from, to)`.
    pub fn mean_over(&self, from: usize, to: usize, f: impl Fn(&StepRecord) -> f64) -> f64 {
        let slice = &self.records[from.min(self.records.len())..to.min(self.records.len())];
        slice.iter().map(f).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Trains `model` in place on random windows of `corpus`.
pub fn train(model: &mut Model, corpus: &[u8], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, corpus, cfg, |_| Ok(()))
}

/// As [`train`], calling `on_step` after every step.
pub fn train_with(
    model: &mut Model,
    corpus: &[u8],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainReport> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let seq = model.config().max_seq_len;
    if corpus.len() < 2 * seq {
        return Err(Error::Data(format!(
            "corpus of {} bytes is smaller than 2 × max_seq_len = {}",
            corpus.len(),
            2 * seq
        )));
    }
    let mut sampler = BatchSampler::new(cfg.seed ^ 0x5eed_da7a, cfg.batch_size, seq);
    let mut optimizer = Optimizer::new(cfg.optimizer, model.params());
    let mut report = TrainReport {
        records: Vec::with_capacity(cfg.steps),
        log_every: cfg.log_every,
    };
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(corpus)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &batch.tokens, batch.batch, batch.seq, Some(&batch.targets), None)?;
        let loss = pass.loss.expect("targets given");
        let xent = tape.value(pass.xent.expect("targets given")).item()? as f64;
        tape.backward(loss)?;
        model.params_mut().collect_grads(&tape, &bound);
        optimizer.step(model.params_mut(), cfg.learning_rate_at(step))?;
        let record = StepRecord::from_pass(step, xent, &pass);
        on_step(&record)?;
        report.records.push(record);
    }
    Ok(report)
}
