mod common;

use common::{preference_order, threshold_oracle};
use proptest::prelude::*;
use xmoe::routing::{
    plan_capacity, resolve_assignments, select_experts_threshold, select_experts_topk, GateDistribution,
    RoutingDecision, Selection,
};

fn distribution() -> impl Strategy<Value = Vec<f32>> {
    (1usize..=8).prop_flat_map(|n| prop::collection::vec(-6.0f32..6.0, n)).prop_map(|mut logits| {
        xmoe::numerics::softmax_in_place(&mut logits);
        logits
    })
}

/// Distributions with exact ties, which exercise the index tie-break.
fn tied_distribution() -> impl Strategy<Value = Vec<f32>> {
    (2usize..=8).prop_flat_map(|n| prop::collection::vec(1u8..4, n)).prop_map(|w| {
        let total: u32 = w.iter().map(|&x| x as u32).sum();
        w.iter().map(|&x| x as f32 / total as f32).collect()
    })
}

fn threshold() -> impl Strategy<Value = f32> {
    prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..1.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn threshold_matches_prefix_oracle(p in distribution(), t in threshold()) {
        let d = select_experts_threshold(0, &GateDistribution::new(p.clone()).unwrap(), t);
        prop_assert_eq!(d.experts(), threshold_oracle(&p, t));
    }

    #[test]
    fn ties_follow_expert_index(p in tied_distribution(), t in threshold()) {
        let d = select_experts_threshold(0, &GateDistribution::new(p.clone()).unwrap(), t);
        prop_assert_eq!(d.experts(), threshold_oracle(&p, t));
    }

    #[test]
    fn zero_threshold_is_top1_and_one_is_everything(p in prop_oneof![distribution(), tied_distribution()]) {
        let dist = GateDistribution::new(p.clone()).unwrap();
        prop_assert_eq!(
            select_experts_threshold(0, &dist, 0.0).experts(),
            select_experts_topk(0, &dist, 1).unwrap().experts()
        );
        let mut all = select_experts_threshold(0, &dist, 1.0).experts();
        all.sort_unstable();
        prop_assert_eq!(all, (0..p.len()).collect::<Vec<_>>());
    }

    #[test]
    fn selection_grows_with_threshold(p in distribution(), a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dist = GateDistribution::new(p).unwrap();
        let small = select_experts_threshold(0, &dist, lo).experts();
        let large = select_experts_threshold(0, &dist, hi).experts();
        prop_assert!(small.len() <= large.len());
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn top1_is_within_every_threshold_selection(p in distribution(), t in threshold()) {
        let dist = GateDistribution::new(p).unwrap();
        let top1 = select_experts_topk(0, &dist, 1).unwrap().experts()[0];
        prop_assert!(select_experts_threshold(0, &dist, t).experts().contains(&top1));
    }

    #[test]
    fn selection_records_gates_and_priorities(p in distribution(), t in threshold()) {
        let d = select_experts_threshold(3, &GateDistribution::new(p.clone()).unwrap(), t);
        prop_assert_eq!(d.token_id, 3);
        for (j, s) in d.selections.iter().enumerate() {
            prop_assert_eq!(s.rank, j + 1);
            prop_assert_eq!(s.gate_weight, p[s.expert]);
            prop_assert_eq!(s.priority, p[s.expert] - (j + 1) as f32);
        }
        prop_assert_eq!(&d.experts()[..], &preference_order(&p)[..d.selections.len()]);
    }

    #[test]
    fn capacity_is_respected_and_priority_decides(
        (n, decisions) in (1usize..=6).prop_flat_map(|n| (Just(n), prop::collection::vec(routing_for(n), 1..40))),
        gamma in 0.1f32..3.0,
    ) {
        let decisions: Vec<RoutingDecision> = decisions
            .into_iter()
            .enumerate()
            .map(|(i, selections)| RoutingDecision { token_id: i, selections })
            .collect();
        let plan = plan_capacity(decisions.len(), n, gamma);
        let dispatch = resolve_assignments(&decisions, &plan).unwrap();
        prop_assert_eq!(plan.capacity, ((decisions.len() as f64 * gamma as f64 / n as f64).ceil() as usize).max(1));
        for e in 0..n {
            let kept = &dispatch.kept[e];
            prop_assert!(kept.len() <= plan.capacity);
            let priority = |tok: usize| {
                decisions[tok].selections.iter().find(|s| s.expert == e).unwrap().priority
            };
            let dropped: Vec<usize> = dispatch.dropped.iter().filter(|&&(_, x)| x == e).map(|&(t, _)| t).collect();
            if !dropped.is_empty() {
                prop_assert_eq!(kept.len(), plan.capacity);
            }
            for &k in kept {
                for &d in &dropped {
                    let (pk, pd) = (priority(k), priority(d));
                    prop_assert!(pk > pd || (pk == pd && k < d), "kept {k} ({pk}) vs dropped {d} ({pd})");
                }
            }
        }
        let wanted: usize = decisions.iter().map(|d| d.selections.len()).sum();
        prop_assert_eq!(dispatch.total_assignments(), wanted);
        for d in &decisions {
            for (j, s) in d.selections.iter().enumerate() {
                prop_assert_eq!(dispatch.kept_mask[d.token_id][j], dispatch.kept[s.expert].contains(&d.token_id));
            }
        }
    }
}

/// A routing decision as produced by a real router over `n` experts.
fn routing_for(n: usize) -> impl Strategy<Value = Vec<Selection>> {
    (prop::collection::vec(0u8..4, n), 0.0f32..=1.0).prop_map(|(w, t)| {
        let total: f32 = w.iter().map(|&x| x as f32 + 0.5).sum();
        let p: Vec<f32> = w.iter().map(|&x| (x as f32 + 0.5) / total).collect();
        select_experts_threshold(0, &GateDistribution::new(p).unwrap(), t).selections
    })
}
