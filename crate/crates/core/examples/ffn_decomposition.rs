//! Splits a dense FFN into N smaller experts along the hidden dimension and
//! checks that their summed outputs reproduce the original layer.

use xmoe::moe_layer::{decompose_ffn, expert_forward, ExpertParams};
use xmoe::numerics::{seeded_rng, Tensor};

fn main() -> xmoe::Result<()> {
    let (d, d_ff) = (16, 64);
    let mut rng = seeded_rng(0);
    let w1 = Tensor::scaled_uniform(&[d_ff, d], d, d_ff, &mut rng);
    let w2 = Tensor::scaled_uniform(&[d, d_ff], d_ff, d, &mut rng);
    let x = Tensor::scaled_uniform(&[5, d], d, d, &mut rng);
    let dense = expert_forward(&ExpertParams::new(w1.clone(), w2.clone())?, &x)?;

    for n in [1, 2, 4, 8, 16] {
        let experts = decompose_ffn(&w1, &w2, n)?;
        let mut sum = Tensor::zeros(dense.shape());
        for e in &experts {
            let y = expert_forward(e, &x)?;
            sum.values_mut().iter_mut().zip(y.values()).for_each(|(s, v)| *s += v);
        }
        println!(
            "N = {n:>2}: {n} experts of width {:>2}, max |Σ experts − dense| = {:.2e}",
            experts[0].expert_dim(),
            sum.max_abs_diff(&dense)
        );
    }
    match decompose_ffn(&w1, &w2, 3) {
        Err(e) => println!("N = 3: {e}"),
        Ok(_) => unreachable!("64 is not divisible by 3"),
    }
    Ok(())
}
