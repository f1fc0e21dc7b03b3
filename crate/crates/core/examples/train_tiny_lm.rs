//! Trains a small byte-level MoE language model and prints the metrics log.
//!
//! cargo run --release --example train_tiny_lm -- [steps] [seed]

use std::time::Instant;

use xmoe::lm::{evaluate, synthetic_corpus, EvalOptions, Model, ModelConfig, TrainConfig};

fn main() -> xmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus = synthetic_corpus(seed, 1 << 20);
    let (train_text, held_out) = corpus.split_at(corpus.len() - (1 << 14));

    let cfg = ModelConfig::default();
    let mut model = Model::build(&cfg, seed)?;
    let train_cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = xmoe::lm::train(&mut model, train_text, &train_cfg)?;
    let elapsed = start.elapsed();
    print!("{}", report.metrics_csv());
    eprintln!("{steps} steps in {:.1?} ({:.1?}/step)", elapsed, elapsed / steps.max(1) as u32);

    let eval = evaluate(&model, held_out, &EvalOptions::default())?;
    eprintln!(
        "held-out ppl {:.3}, experts/token {:.2}, drop rate {:.3}",
        eval.perplexity, eval.mean_experts_per_token, eval.drop_rate
    );
    Ok(())
}
