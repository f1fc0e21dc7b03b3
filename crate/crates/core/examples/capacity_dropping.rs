//! Capacity-limited dispatch: each expert accepts at most C = ceil(T·γ/N)
//! tokens, preferring first choices and then higher gate probabilities.

use xmoe::routing::{plan_capacity, resolve_assignments, select_experts_threshold, GateDistribution};

fn main() -> xmoe::Result<()> {
    // six tokens that all lean towards expert 0
    let probs = [
        [0.60, 0.30, 0.10],
        [0.50, 0.40, 0.10],
        [0.80, 0.10, 0.10],
        [0.45, 0.45, 0.10],
        [0.40, 0.20, 0.40],
        [0.34, 0.33, 0.33],
    ];
    let decisions = probs
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(select_experts_threshold(i, &GateDistribution::new(p.to_vec())?, 0.8)))
        .collect::<xmoe::Result<Vec<_>>>()?;

    for gamma in [0.5, 1.0, 2.0] {
        let plan = plan_capacity(decisions.len(), 3, gamma);
        let dispatch = resolve_assignments(&decisions, &plan)?;
        println!("γ = {gamma}: capacity {} per expert", plan.capacity);
        for (e, kept) in dispatch.kept.iter().enumerate() {
            println!("  expert {e} keeps tokens {kept:?}");
        }
        println!(
            "  dropped {:?}; drop rate {:.2}; tokens with no expert left {:?}",
            dispatch.dropped,
            dispatch.drop_rate(),
            dispatch.fully_dropped_tokens()
        );
    }
    Ok(())
}
