//! Sparsity instrumentation and perplexity-vs-FLOPs sweeps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::lm::{evaluate, BatchSampler, EvalOptions, ForwardPass, Model};
use crate::numerics::Tape;
use crate::routing::RoutingDecision;

/// Batches averaged for a whole-model positive-activation measurement.
pub const DEFAULT_SAMPLE_BATCHES: usize = 10;

/// Share of values strictly greater than zero.
pub fn positive_activation_fraction(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("positive_activation_fraction of an empty batch"));
    }
    Ok(values.iter().filter(|&&v| v > 0.0).count() as f64 / values.len() as f64)
}

/// Mean selected experts per token.
pub fn mean_selected(decisions: &[RoutingDecision]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().map(|d| d.selections.len()).sum::<usize>() as f64 / decisions.len() as f64
}

/// `trace[step][layer]` decision logs to `series[layer][step]` means.
pub fn required_experts_series(trace: &[Vec<Vec<RoutingDecision>>]) -> Result<Vec<Vec<f64>>> {
    let layers = trace.first().map(Vec::len).ok_or_else(|| Error::contract("empty routing trace"))?;
    let mut series = vec![Vec::with_capacity(trace.len()); layers];
    for (step, logs) in trace.iter().enumerate() {
        if logs.len() != layers {
            return Err(Error::contract(format!(
                "step {step} logs {} layers, expected {layers}",
                logs.len()
            )));
        }
        for (s, decisions) in series.iter_mut().zip(logs) {
            s.push(mean_selected(decisions));
        }
    }
    Ok(series)
}

/// Accumulates activation, routing and dropping counters over forward passes.
#[derive(Clone, Debug, Default)]
pub struct SparsityProbe {
    positive: Vec<usize>,
    total: Vec<usize>,
    experts: Vec<Vec<f64>>,
    drops: Vec<(usize, usize)>,
}

impl SparsityProbe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, pass: &ForwardPass) {
        if self.positive.len() < pass.block_activations.len() {
            self.positive.resize(pass.block_activations.len(), 0);
            self.total.resize(pass.block_activations.len(), 0);
        }
        for (b, &(p, t)) in pass.block_activations.iter().enumerate() {
            self.positive[b] += p;
            self.total[b] += t;
        }
        self.experts.push(pass.layers.iter().map(|l| l.moe.mean_experts_per_token()).collect());
        self.drops.push(pass.layers.iter().fold((0, 0), |(d, a), l| {
            (d + l.moe.dispatch.dropped.len(), a + l.moe.dispatch.total_assignments())
        }));
    }

    pub fn steps(&self) -> usize {
        self.experts.len()
    }

    pub fn block_positive_fraction(&self, block: usize) -> Option<f64> {
        match self.total.get(block) {
            Some(&t) if t > 0 => Some(self.positive[block] as f64 / t as f64),
            _ => None,
        }
    }

    /// Positive fraction averaged over blocks.
    pub fn positive_fraction(&self) -> Option<f64> {
        let fr: Vec<f64> = (0..self.total.len()).filter_map(|b| self.block_positive_fraction(b)).collect();
        (!fr.is_empty()).then(|| fr.iter().sum::<f64>() / fr.len() as f64)
    }

    /// `[step][moe layer]` mean selected experts.
    pub fn experts_per_step(&self) -> &[Vec<f64>] {
        &self.experts
    }

    pub fn drop_rates(&self) -> Vec<f64> {
        self.drops
            .iter()
            .map(|&(d, a)| if a == 0 { 0.0 } else { d as f64 / a as f64 })
            .collect()
    }
}

/// Runs `batches` random batches through `model` without gradients.
pub fn measure_sparsity(model: &Model, corpus: &[u8], batches: usize, batch_size: usize, seed: u64) -> Result<SparsityProbe> {
    let mut sampler = BatchSampler::new(seed, batch_size, model.config().max_seq_len);
    let mut probe = SparsityProbe::new();
    for _ in 0..batches {
        let batch = sampler.next_batch(corpus)?;
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let pass = model.forward(&mut tape, &bound, &batch.tokens, batch.batch, batch.seq, None, None)?;
        probe.record(&pass);
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f32,
    pub capacity_factor: f32,
    pub normalized_flops: f64,
    pub utilized_flops: f64,
    pub ppl: f64,
    pub drop_rate: f64,
}

pub const SWEEP_CSV_HEADER: &str = "t,gamma,normalized_flops,utilized_flops,ppl,drop_rate";

/// Evaluates `model` at every `(t, γ)` point, `t` outermost. No retraining.
///
/// `normalized_flops` is the billed expert work of one evaluation batch over
/// the dense FFN baseline.
pub fn sweep_flops(
    model: &Model,
    corpus: &[u8],
    gammas: &[f32],
    thresholds: &[f32],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let mut problems = Vec::new();
    if thresholds.is_empty() {
        problems.push("sweep needs at least one threshold".to_string());
    }
    if gammas.is_empty() {
        problems.push("sweep needs at least one capacity factor".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rows = Vec::with_capacity(thresholds.len() * gammas.len());
    for &t in thresholds {
        for &g in gammas {
            let mut m = model.clone();
            m.set_inference_sparsity(t, g)?;
            let r = evaluate(&m, corpus, opts)?;
            rows.push(SweepRow {
                threshold: t,
                capacity_factor: g,
                normalized_flops: r.normalized_flops,
                utilized_flops: r.utilized_flops,
                ppl: r.perplexity,
                drop_rate: r.drop_rate,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.threshold, r.capacity_factor, r.normalized_flops, r.utilized_flops, r.ppl, r.drop_rate
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{synthetic_corpus, ModelConfig, MoeSpec};
    use crate::moe_layer::LayerMode;
    use crate::numerics::seeded_rng;
    use crate::routing::{RoutingStrategy, Selection};
    use rand::Rng;

    /// Box-Muller standard normal.
    fn normal<R: Rng>(rng: &mut R) -> f32 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    fn decision(token: usize, k: usize) -> RoutingDecision {
        RoutingDecision {
            token_id: token,
            selections: (0..k)
                .map(|e| Selection {
                    expert: e,
                    gate_weight: 1.0 / k as f32,
                    priority: 0.0,
                    rank: e + 1,
                })
                .collect(),
        }
    }

    #[test]
    fn positive_fraction_examples() {
        assert_eq!(positive_activation_fraction(&[-1.0, 0.5, 2.0, -3.0]).unwrap(), 0.5);
        let post: Vec<f32> = [0.1f32, 1.0, 3.0, 0.001].iter().map(|&x| crate::numerics::gelu(x)).collect();
        assert_eq!(positive_activation_fraction(&post).unwrap(), 1.0);
        assert!(positive_activation_fraction(&[]).is_err());
    }

    #[test]
    fn tiny_negative_gelu_outputs_are_not_positive() {
        let y = crate::numerics::gelu(-0.01);
        assert!(y < 0.0);
        assert_eq!(positive_activation_fraction(&[y]).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_normal_is_about_half() {
        let mut rng = seeded_rng(3);
        let v: Vec<f32> = (0..10_000).map(|_| normal(&mut rng)).collect();
        let f = positive_activation_fraction(&v).unwrap();
        assert!((f - 0.5).abs() < 0.05, "{f}");
    }

    #[test]
    fn series_examples() {
        let ones: Vec<Vec<Vec<RoutingDecision>>> = (0..5).map(|_| vec![(0..4).map(|i| decision(i, 1)).collect()]).collect();
        assert_eq!(required_experts_series(&ones).unwrap(), vec![vec![1.0; 5]]);
        let mixed = vec![vec![vec![decision(0, 1), decision(1, 1), decision(2, 3), decision(3, 3)]]];
        assert_eq!(required_experts_series(&mixed).unwrap(), vec![vec![2.0]]);
        assert!(required_experts_series(&[]).is_err());
    }

    fn dense_train_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 8,
            moe: Some(MoeSpec {
                num_experts: 4,
                expert_dim: 8,
                strategy: RoutingStrategy::Threshold,
                threshold: 1.0,
                capacity_factor: 4.0,
                mode: LayerMode::DenseTrain,
                first_block: 1,
                every: 2,
            }),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn full_capacity_row_matches_plain_evaluation() {
        let model = Model::build(&dense_train_config(), 1).unwrap();
        let corpus = synthetic_corpus(1, 400);
        let opts = EvalOptions::default();
        let rows = sweep_flops(&model, &corpus, &[1.0, 4.0], &[0.5, 1.0], &opts).unwrap();
        let plain = evaluate(&model, &corpus, &opts).unwrap().perplexity;
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].ppl, plain);
        assert_eq!(rows[3].drop_rate, 0.0);
    }

    #[test]
    fn grid_shape_and_gamma_doubling() {
        let model = Model::build(&dense_train_config(), 2).unwrap();
        let corpus = synthetic_corpus(2, 400);
        let rows = sweep_flops(&model, &corpus, &[0.5, 1.0, 2.0], &[0.0, 0.5, 0.9], &EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 9);
        for chunk in rows.chunks(3) {
            assert!(chunk.iter().all(|r| r.threshold == chunk[0].threshold));
            assert_eq!(chunk[1].normalized_flops, 2.0 * chunk[0].normalized_flops);
            assert_eq!(chunk[2].normalized_flops, 2.0 * chunk[1].normalized_flops);
        }
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().next(), Some(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 10);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let model = Model::build(&dense_train_config(), 2).unwrap();
        assert!(matches!(
            sweep_flops(&model, b"abcdefghijk", &[1.0], &[], &EvalOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn probe_counts_every_block() {
        let model = Model::build(&dense_train_config(), 3).unwrap();
        let corpus = synthetic_corpus(3, 400);
        let probe = measure_sparsity(&model, &corpus, 3, 2, 0).unwrap();
        assert_eq!(probe.steps(), 3);
        let f = probe.positive_fraction().unwrap();
        assert!((0.0..=1.0).contains(&f));
        for step in probe.experts_per_step() {
            assert_eq!(step, &vec![4.0]);
        }
        assert!(probe.drop_rates().iter().all(|&d| d == 0.0));
    }
}
