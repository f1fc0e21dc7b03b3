//! Trains every expert densely (t = 1, γ = N), then sparsifies at inference by
//! sweeping the threshold and capacity factor.
//!
//! cargo run --release --example dense_to_sparse -- [steps] [seed]

use xmoe::lm::{synthetic_corpus, EvalOptions, Model, ModelConfig, TrainConfig};
use xmoe::metrics::{sweep_csv, sweep_flops};
use xmoe::moe_layer::LayerMode;

fn main() -> xmoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let corpus = synthetic_corpus(seed, 1 << 20);
    let (train_text, held_out) = corpus.split_at(corpus.len() - (1 << 14));

    let mut cfg = ModelConfig::default();
    let moe = cfg.moe.as_mut().expect("default config has MoE blocks");
    moe.mode = LayerMode::DenseTrain;
    moe.threshold = 1.0;
    moe.capacity_factor = moe.num_experts as f32;
    let n = moe.num_experts as f32;

    let mut model = Model::build(&cfg, seed)?;
    let train_cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    xmoe::lm::train(&mut model, train_text, &train_cfg)?;

    let rows = sweep_flops(
        &model,
        held_out,
        &[n / 8.0, n / 4.0, n / 2.0, n],
        &[0.5, 0.8, 0.9, 0.95, 1.0],
        &EvalOptions::default(),
    )?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
