//! Finite-difference checks shared by the gradient tests and the acceptance run.

use super::{gradcheck, gradcheck_with, project, random_tensor, store_of, Stencil};
use xmoe::lm::{Model, ModelConfig, MoeSpec};
use xmoe::moe_layer::{expert_forward_on, LayerMode, MoELayer};
use xmoe::numerics::{seeded_rng, ParamStore, Tape};
use xmoe::routing::{RouterConfig, RoutingStrategy};

pub const LAYER_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

pub type Report = Vec<(String, f64)>;

pub fn matmul() -> Report {
    let s = store_of(vec![random_tensor(&[3, 4], 1.0, 1), random_tensor(&[4, 5], 1.0, 2), random_tensor(&[6, 4], 1.0, 3)]);
    let ids: Vec<_> = s.ids().collect();
    gradcheck(&s, |t, b| {
        let y = t.matmul(b.var(ids[0]), b.var(ids[1])).unwrap();
        let z = t.matmul_nt(b.var(ids[0]), b.var(ids[2])).unwrap();
        let py = project(t, y, 10);
        let pz = project(t, z, 11);
        t.add(py, pz).unwrap()
    })
}

pub fn gelu() -> Report {
    let s = store_of(vec![random_tensor(&[8, 8], 3.0, 4)]);
    let id = s.ids().next().unwrap();
    gradcheck(&s, |t, b| {
        let y = t.gelu(b.var(id)).unwrap();
        project(t, y, 12)
    })
}

pub fn softmax() -> Report {
    let s = store_of(vec![random_tensor(&[5, 7], 2.0, 5)]);
    let id = s.ids().next().unwrap();
    gradcheck(&s, |t, b| {
        let y = t.softmax(b.var(id)).unwrap();
        project(t, y, 13)
    })
}

pub fn layer_norm() -> Report {
    let s = store_of(vec![random_tensor(&[4, 6], 2.0, 6), random_tensor(&[6], 1.0, 7), random_tensor(&[6], 1.0, 8)]);
    let ids: Vec<_> = s.ids().collect();
    gradcheck(&s, |t, b| {
        let y = t.layer_norm(b.var(ids[0]), b.var(ids[1]), b.var(ids[2])).unwrap();
        project(t, y, 14)
    })
}

pub fn causal_attention() -> Report {
    let (batch, seq, d) = (2, 3, 4);
    let s = store_of((0..3).map(|i| random_tensor(&[batch * seq, d], 1.0, 20 + i)).collect());
    let ids: Vec<_> = s.ids().collect();
    gradcheck(&s, |t, b| {
        let y = t.causal_attention(b.var(ids[0]), b.var(ids[1]), b.var(ids[2]), batch, seq, 2).unwrap();
        project(t, y, 15)
    })
}

pub fn embedding_cross_entropy() -> Report {
    let s = store_of(vec![random_tensor(&[6, 4], 1.0, 30), random_tensor(&[5, 4], 1.0, 31)]);
    let ids: Vec<_> = s.ids().collect();
    gradcheck(&s, |t, b| {
        let e = t.embedding(b.var(ids[0]), &[0, 2, 2, 5]).unwrap();
        let logits = t.matmul_nt(e, b.var(ids[1])).unwrap();
        t.cross_entropy(logits, &[1, 4, 0, 3]).unwrap()
    })
}

pub fn two_layer_ffn() -> Report {
    let s = store_of(vec![random_tensor(&[5, 4], 1.0, 40), random_tensor(&[8, 4], 0.8, 41), random_tensor(&[4, 8], 0.8, 42)]);
    let ids: Vec<_> = s.ids().collect();
    gradcheck(&s, |t, b| {
        let (_, y) = expert_forward_on(t, b.var(ids[1]), b.var(ids[2]), b.var(ids[0])).unwrap();
        project(t, y, 16)
    })
}

/// Router, experts and input of one MoE layer, selection held fixed.
pub fn moe_layer(strategy: RoutingStrategy, threshold: f32, gamma: f32) -> Report {
    let mut store = ParamStore::new();
    let config = RouterConfig {
        num_experts: 4,
        hidden_dim: 6,
        threshold,
        strategy,
        capacity_factor: gamma,
    };
    let mut rng = seeded_rng(50);
    let layer = MoELayer::new(&mut store, "moe", config, 4, 16, LayerMode::Sparse, 256, &mut rng).unwrap();
    let h_id = store.insert("hidden", random_tensor(&[7, 6], 1.0, 51)).unwrap();
    let route = {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        layer.forward(&mut tape, &b, b.var(h_id), None, None).unwrap().fixed_route()
    };
    assert!(route.dispatch.kept_assignments() > 0);
    gradcheck(&store, |t, b| {
        let out = layer.forward(t, b, b.var(h_id), None, Some(&route)).unwrap();
        let y = project(t, out.output, 17);
        let aux = t.scale(out.aux_loss.unwrap(), 0.5).unwrap();
        t.add(y, aux).unwrap()
    })
}

/// Every layer-level check, labelled.
pub fn layer_suite() -> Vec<(&'static str, Report)> {
    vec![
        ("matmul", matmul()),
        ("gelu", gelu()),
        ("softmax", softmax()),
        ("layer_norm", layer_norm()),
        ("causal_attention", causal_attention()),
        ("embedding+cross_entropy", embedding_cross_entropy()),
        ("two_layer_ffn", two_layer_ffn()),
        ("moe threshold", moe_layer(RoutingStrategy::Threshold, 0.7, 2.0)),
        ("moe with drops", moe_layer(RoutingStrategy::Threshold, 0.9, 0.75)),
        ("moe top-2", moe_layer(RoutingStrategy::TopK(2), 0.0, 2.0)),
    ]
}

/// Full loss of a 2-block, d = 16 model w.r.t. every parameter, routing fixed.
///
/// Uses the five-point stencil: the loss sits near ln 256 in f32, and a
/// central difference at a small step is dominated by rounding.
pub fn end_to_end() -> Report {
    let cfg = ModelConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 4,
        aux_loss_weight: 0.1,
        moe: Some(MoeSpec {
            num_experts: 4,
            expert_dim: 8,
            strategy: RoutingStrategy::Threshold,
            threshold: 0.8,
            capacity_factor: 1.5,
            mode: LayerMode::Sparse,
            first_block: 1,
            every: 2,
        }),
        ..ModelConfig::default()
    };
    let model = Model::build(&cfg, 7).unwrap();
    let tokens = [72, 101, 108, 108, 111, 32, 119, 111];
    let targets = [101, 108, 108, 111, 32, 119, 111, 114];
    let routes = {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape);
        model.forward(&mut tape, &b, &tokens, 2, 4, Some(&targets), None).unwrap().fixed_routes()
    };
    let report = gradcheck_with(model.params(), Stencil::FivePoint(3e-2), |t, b| {
        model.forward(t, b, &tokens, 2, 4, Some(&targets), Some(&routes)).unwrap().loss.unwrap()
    });
    assert_eq!(report.len(), model.params().len());
    report
}

pub fn worst(report: &Report) -> (String, f64) {
    report
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc })
}
