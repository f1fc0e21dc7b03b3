//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod grad_suite;

use rand::Rng;
use xmoe::numerics::{seeded_rng, Bound, ParamStore, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;

pub fn random_tensor(shape: &[usize], scale: f32, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Store holding each tensor under `x0`, `x1`, ...
pub fn store_of(tensors: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("x{i}"), t).unwrap();
    }
    s
}

/// Sums `y ⊙ w` for a fixed random `w`, turning any output into a scalar
/// whose gradient exercises every output element differently.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = random_tensor(tape.value(y).shape(), 1.0, seed);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-8)`.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n.powi(2);
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-8)
}

/// Compares tape gradients of `loss` against central differences for every
/// tensor in `store`. Returns `(name, relative error)` per tensor.
pub fn gradcheck(store: &ParamStore, loss: impl Fn(&mut Tape, &Bound) -> Var) -> Vec<(String, f64)> {
    gradcheck_with(store, Stencil::Central(FD_STEP), loss)
}

#[derive(Clone, Copy, Debug)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central(f32),
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, error O(h⁴).
    /// Tolerates a larger `h`, which keeps f32 rounding in deep models small.
    FivePoint(f32),
}

pub fn gradcheck_with(store: &ParamStore, stencil: Stencil, loss: impl Fn(&mut Tape, &Bound) -> Var) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let l = loss(&mut tape, &bound);
    tape.backward(l).unwrap();

    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let l = loss(&mut tape, &bound);
        tape.value(l).item().unwrap() as f64
    };

    let mut probe = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let analytic = tape.grad(bound.var(id)).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        let mut numeric = vec![0.0f64; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe.get(id).values()[i];
            let mut at = |offset: f32| {
                probe.get_mut(id).values_mut()[i] = orig + offset;
                eval(&probe)
            };
            *n = match stencil {
                Stencil::Central(h) => (at(h) - at(-h)) / (2.0 * h as f64),
                Stencil::FivePoint(h) => (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h as f64),
            };
            probe.get_mut(id).values_mut()[i] = orig;
        }
        out.push((store.name(id).to_string(), relative_error(&analytic, &numeric)));
    }
    out
}

pub fn assert_gradcheck(report: &[(String, f64)], tol: f64) {
    for (name, err) in report {
        assert!(*err < tol, "{name}: relative error {err:.3e} ≥ {tol:.0e}");
    }
}

/// Expert indices by descending probability, ties to the lower index,
/// via exhaustive pairwise comparison.
pub fn preference_order(p: &[f32]) -> Vec<usize> {
    let n = p.len();
    let mut order = vec![0; n];
    for i in 0..n {
        let ahead = (0..n).filter(|&j| p[j] > p[i] || (p[j] == p[i] && j < i)).count();
        order[ahead] = i;
    }
    order
}

/// Minimal threshold selection by enumerating every prefix length.
///
/// `t ≥ 1` sends a token to all experts.
pub fn threshold_oracle(p: &[f32], t: f32) -> Vec<usize> {
    let order = preference_order(p);
    if t >= 1.0 {
        return order;
    }
    for k in 1..=p.len() {
        let mass: f64 = order[..k].iter().map(|&e| p[e] as f64).sum();
        if mass >= t as f64 {
            return order[..k].to_vec();
        }
    }
    order
}

/// Random gate distribution: softmax of uniform logits in `[-spread, spread]`.
pub fn random_distribution<R: Rng>(rng: &mut R, n: usize, spread: f32) -> Vec<f32> {
    let mut logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-spread..=spread)).collect();
    xmoe::numerics::softmax_in_place(&mut logits);
    logits
}
