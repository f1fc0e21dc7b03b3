//! Billed FLOPs of an MoE layer against the dense FFN it replaces.

use xmoe::moe_layer::{FlopsReport, LayerShape};
use xmoe::routing::plan_capacity;

fn main() {
    let tokens = 4096;
    let (d, d_ff) = (768, 3072);
    // utilized_flops needs a routed batch and stays 0 here
    println!("tokens,experts,expert_dim,gamma,{}", FlopsReport::CSV_HEADER);
    // matched-compute family: shrink experts, add experts, raise γ
    for (n, de, gamma) in [(8, 3072, 1.0f32), (16, 1536, 2.0), (32, 768, 4.0), (64, 384, 8.0), (64, 384, 4.0), (64, 384, 2.0)] {
        let shape = LayerShape {
            hidden_dim: d,
            expert_dim: de,
            num_experts: n,
            baseline_ffn_dim: d_ff,
            learned_router: true,
        };
        let report = shape.count_flops(&plan_capacity(tokens, n, gamma));
        println!("{tokens},{n},{de},{gamma},{}", report.csv_row());
    }
}
