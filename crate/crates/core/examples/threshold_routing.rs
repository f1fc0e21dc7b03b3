//! Threshold routing on a few hand-written gate distributions: each token
//! takes the smallest set of top experts whose probabilities reach `t`.

use xmoe::routing::{select_experts_threshold, select_experts_topk, GateDistribution};

fn main() -> xmoe::Result<()> {
    let tokens = [
        vec![0.70, 0.20, 0.05, 0.05],
        vec![0.30, 0.30, 0.25, 0.15],
        vec![0.97, 0.01, 0.01, 0.01],
    ];
    for (i, p) in tokens.iter().enumerate() {
        let dist = GateDistribution::new(p.clone())?;
        println!("token {i}: p = {p:?}");
        for t in [0.0, 0.5, 0.9, 1.0] {
            let d = select_experts_threshold(i, &dist, t);
            let picks: Vec<String> = d
                .selections
                .iter()
                .map(|s| format!("e{} (p={:.2}, priority={:.2})", s.expert, s.gate_weight, s.priority))
                .collect();
            println!("  t = {t:<4} -> {} experts: {}", picks.len(), picks.join(", "));
        }
        println!("  top-2    -> {:?}", select_experts_topk(i, &dist, 2)?.experts());
    }
    Ok(())
}
