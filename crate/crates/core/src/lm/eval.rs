use serde::Serialize;

use crate::error::{Error, Result};
use crate::lm::data::TokenBatch;
use crate::lm::model::Model;
use crate::numerics::Tape;
use crate::routing::plan_capacity;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Windows per forward pass; capacity is enforced per such batch.
    pub batch_size: usize,
    pub max_windows: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_xent: f64,
    pub tokens: usize,
    pub drop_rate: f64,
    pub mean_experts_per_token: f64,
    /// Billed expert FLOPs of a full evaluation batch over the dense baseline,
    /// averaged across MoE layers.
    pub normalized_flops: f64,
    /// Expert FLOPs actually spent on kept assignments over the dense baseline.
    pub utilized_flops: f64,
    pub positive_act_frac: f64,
}

/// Non-overlapping `max_seq_len` windows; a short corpus yields one shorter window.
fn windows(corpus_len: usize, seq: usize) -> (Vec<usize>, usize) {
    if corpus_len > seq {
        ((0..(corpus_len - 1) / seq).map(|w| w * seq).collect(), seq)
    } else {
        (vec![0], corpus_len - 1)
    }
}

pub fn evaluate(model: &Model, corpus: &[u8], opts: &EvalOptions) -> Result<EvalReport> {
    if corpus.len() < 2 {
        return Err(Error::Data("evaluation needs at least two bytes".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config(vec!["eval batch_size must be positive".into()]));
    }
    let (mut offsets, seq) = windows(corpus.len(), model.config().max_seq_len);
    if let Some(max) = opts.max_windows {
        offsets.truncate(max.max(1));
    }
    let (mut nll, mut tokens) = (0.0f64, 0usize);
    let (mut dropped, mut assigned) = (0usize, 0usize);
    let (mut selected, mut routed) = (0usize, 0usize);
    let (mut utilized, mut baseline) = (0u64, 0u64);
    let (mut positive, mut activations) = (0usize, 0usize);
    for chunk in offsets.chunks(opts.batch_size) {
        let batch = TokenBatch::from_offsets(corpus, chunk, seq)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &batch.tokens, batch.batch, seq, Some(&batch.targets), None)?;
        let xent = tape.value(pass.xent.expect("targets given")).item()? as f64;
        nll += xent * batch.targets.len() as f64;
        tokens += batch.targets.len();
        positive += pass.positive_activations;
        activations += pass.total_activations;
        for layer in &pass.layers {
            dropped += layer.moe.dispatch.dropped.len();
            assigned += layer.moe.dispatch.total_assignments();
            selected += layer.moe.decisions.iter().map(|d| d.selections.len()).sum::<usize>();
            routed += layer.moe.decisions.len();
            utilized += layer.moe.flops.utilized_flops;
            baseline += layer.moe.flops.baseline_flops;
        }
    }
    let mean_xent = nll / tokens as f64;
    let full_batch = opts.batch_size.min(offsets.len()) * seq;
    let layers: Vec<f64> = model
        .moe_layers()
        .map(|(_, m)| {
            let plan = plan_capacity(full_batch, m.num_experts(), m.effective_capacity_factor());
            m.count_flops(&plan).expert_normalized()
        })
        .collect();
    let has_moe = !layers.is_empty();
    Ok(EvalReport {
        perplexity: mean_xent.exp(),
        mean_xent,
        tokens,
        drop_rate: if assigned == 0 { 0.0 } else { dropped as f64 / assigned as f64 },
        mean_experts_per_token: if routed == 0 { 1.0 } else { selected as f64 / routed as f64 },
        normalized_flops: if has_moe { layers.iter().sum::<f64>() / layers.len() as f64 } else { 1.0 },
        utilized_flops: if has_moe { utilized as f64 / baseline as f64 } else { 1.0 },
        positive_act_frac: positive as f64 / activations.max(1) as f64,
    })
}

/// `exp(mean token cross-entropy)` over non-overlapping windows.
pub fn evaluate_perplexity(model: &Model, corpus: &[u8]) -> Result<f64> {
    Ok(evaluate(model, corpus, &EvalOptions::default())?.perplexity)
}
