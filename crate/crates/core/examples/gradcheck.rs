//! Compares tape gradients of a small MoE layer with central differences,
//! holding the routing fixed between perturbations.

use xmoe::moe_layer::{LayerMode, MoELayer};
use xmoe::numerics::{seeded_rng, ParamStore, Tape, Tensor};
use xmoe::routing::{RouterConfig, RoutingStrategy};

fn main() -> xmoe::Result<()> {
    let mut rng = seeded_rng(0);
    let mut store = ParamStore::new();
    let config = RouterConfig {
        num_experts: 4,
        hidden_dim: 6,
        threshold: 0.8,
        strategy: RoutingStrategy::Threshold,
        capacity_factor: 1.5,
    };
    let layer = MoELayer::new(&mut store, "moe", config, 4, 16, LayerMode::Sparse, 256, &mut rng)?;
    let h = store.insert("hidden", Tensor::scaled_uniform(&[8, 6], 1, 1, &mut rng))?;

    let loss = |store: &ParamStore, route| -> xmoe::Result<(Tape, _, _, _)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let out = layer.forward(&mut tape, &bound, bound.var(h), None, route)?;
        let sq = tape.mul(out.output, out.output)?;
        let l = tape.sum(sq)?;
        Ok((tape, bound, l, out.fixed_route()))
    };

    let (mut tape, bound, l, route) = loss(&store, None)?;
    tape.backward(l)?;
    println!("kept {} of {} assignments", route.dispatch.kept_assignments(), route.dispatch.total_assignments());

    let step = 1e-3f32;
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = tape.grad(bound.var(id)).map(<[f32]>::to_vec).unwrap_or_default();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).values()[i];
            let mut at = |x: f32| -> xmoe::Result<f64> {
                probe.get_mut(id).values_mut()[i] = x;
                let (tape, _, l, _) = loss(&probe, Some(&route))?;
                Ok(tape.value(l).item()? as f64)
            };
            let numeric = (at(orig + step)? - at(orig - step)?) / (2.0 * step as f64);
            probe.get_mut(id).values_mut()[i] = orig;
            let a = analytic.get(i).copied().unwrap_or(0.0) as f64;
            diff += (a - numeric).powi(2);
            norm += a.abs().max(numeric.abs()).powi(2);
        }
        println!("{:<22} relative error {:.2e}", store.name(id), diff.sqrt() / norm.sqrt().max(1e-12));
    }
    Ok(())
}
