//! Share of positive FFN activations before and after training, per block.
//!
//! cargo run --release --example sparsity_probe -- [steps]

use xmoe::lm::{synthetic_corpus, train, Model, ModelConfig, TrainConfig};
use xmoe::metrics::{measure_sparsity, DEFAULT_SAMPLE_BATCHES};

fn report(label: &str, model: &Model, corpus: &[u8]) -> xmoe::Result<()> {
    let probe = measure_sparsity(model, corpus, DEFAULT_SAMPLE_BATCHES, 8, 99)?;
    let blocks: Vec<String> = (0..model.config().num_layers)
        .map(|b| {
            let kind = if model.config().is_moe_block(b) { "moe" } else { "ffn" };
            format!("{b}:{kind} {:.3}", probe.block_positive_fraction(b).unwrap_or(f64::NAN))
        })
        .collect();
    println!("{label}: positive fraction {:.3} [{}]", probe.positive_fraction().unwrap_or(f64::NAN), blocks.join(", "));
    Ok(())
}

fn main() -> xmoe::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let corpus = synthetic_corpus(4, 1 << 18);
    let mut model = Model::build(&ModelConfig::default(), 4)?;
    report("initial", &model, &corpus)?;
    train(&mut model, &corpus, &TrainConfig { steps, ..TrainConfig::default() })?;
    report(&format!("after {steps} steps"), &model, &corpus)?;
    Ok(())
}
