//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::grad_suite::{self, END_TO_END_TOL, LAYER_TOL};
use common::{random_distribution, random_tensor, threshold_oracle};
use rand::Rng;
use xmoe::cli::ExperimentConfig;
use xmoe::lm::{evaluate, synthetic_corpus, train, EvalOptions, Model, ModelConfig, TrainConfig};
use xmoe::moe_layer::{decompose_ffn, expert_forward, LayerMode, LayerShape, MoELayer};
use xmoe::numerics::{gelu, seeded_rng, ParamStore};
use xmoe::routing::{
    load_balance_loss, plan_capacity, resolve_assignments, select_experts_threshold, select_experts_topk,
    BalanceStats, GateDistribution, RouterConfig, RoutingStrategy,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Desk-scale runs: 1 MiB of text, the last 16 KiB held out.
const CORPUS_BYTES: usize = 1 << 20;
const HELD_OUT_BYTES: usize = 1 << 14;
const DESK_STEPS: usize = 2000;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_corpus(seed: u64) -> Vec<u8> {
    synthetic_corpus(1000 + seed, CORPUS_BYTES)
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        steps: DESK_STEPS,
        seed,
        ..TrainConfig::default()
    }
}

fn routing_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(1);
    let thresholds = [0.0f32, 0.25, 0.5, 0.9, 1.0];
    let mut mismatches = 0;
    for i in 0..10_000 {
        let n = [2, 4, 8][i % 3];
        let p = random_distribution(&mut rng, n, 4.0);
        let dist = GateDistribution::new(p.clone()).unwrap();
        for &t in &thresholds {
            if select_experts_threshold(0, &dist, t).experts() != threshold_oracle(&p, t) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{mismatches} mismatches over 50000 selections in {elapsed:.2?} (limit 5 s)"),
    )
}

fn degenerate_identities() -> Outcome {
    let mut rng = seeded_rng(2);
    let (mut top1_bad, mut all_bad) = (0, 0);
    for i in 0..1000 {
        let n = 2 + i % 7;
        let p = random_distribution(&mut rng, n, 4.0);
        let dist = GateDistribution::new(p).unwrap();
        let mut zero = select_experts_threshold(0, &dist, 0.0).experts();
        let mut top1 = select_experts_topk(0, &dist, 1).unwrap().experts();
        zero.sort_unstable();
        top1.sort_unstable();
        top1_bad += usize::from(zero != top1);
    }
    for i in 0..1000 {
        let n = 2 + i % 7;
        let p = random_distribution(&mut rng, n, 8.0);
        let mut all = select_experts_threshold(0, &GateDistribution::new(p).unwrap(), 1.0).experts();
        all.sort_unstable();
        all_bad += usize::from(all != (0..n).collect::<Vec<_>>());
    }
    outcome(
        top1_bad == 0 && all_bad == 0,
        format!("t=0 vs top-1: {top1_bad}/1000 differ; t=1 vs all experts: {all_bad}/1000 differ"),
    )
}

fn decomposition_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(3);
    let mut worst = 0.0f64;
    let mut splits = 0;
    for i in 0..100 {
        let d = rng.gen_range(1..=16);
        let f = rng.gen_range(1..=64);
        let w1 = random_tensor(&[f, d], 0.5, 10 * i);
        let w2 = random_tensor(&[d, f], 0.5, 10 * i + 1);
        let x = random_tensor(&[4, d], 1.0, 10 * i + 2);
        // dense FFN in f64
        let mut dense = vec![0.0f64; 4 * d];
        for r in 0..4 {
            let act: Vec<f64> = (0..f)
                .map(|j| gelu((0..d).map(|k| w1.row(j)[k] as f64 * x.row(r)[k] as f64).sum::<f64>() as f32) as f64)
                .collect();
            for o in 0..d {
                dense[r * d + o] = (0..f).map(|j| w2.row(o)[j] as f64 * act[j]).sum();
            }
        }
        for n in (1..=f).filter(|n| f % n == 0) {
            let mut sum = vec![0.0f64; 4 * d];
            for e in decompose_ffn(&w1, &w2, n).unwrap() {
                for (s, v) in sum.iter_mut().zip(expert_forward(&e, &x).unwrap().values()) {
                    *s += *v as f64;
                }
            }
            splits += 1;
            worst = sum.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("max |Σ experts − FFN| = {worst:.2e} over {splits} splits in {elapsed:.2?} (limits 1e-5, 10 s)"),
    )
}

fn gradient_suite() -> Outcome {
    let mut worst_layer = (String::new(), 0.0);
    for (label, report) in grad_suite::layer_suite() {
        let (name, err) = grad_suite::worst(&report);
        if err >= worst_layer.1 {
            worst_layer = (format!("{label}/{name}"), err);
        }
    }
    let e2e = grad_suite::worst(&grad_suite::end_to_end());
    outcome(
        worst_layer.1 < LAYER_TOL && e2e.1 < END_TO_END_TOL,
        format!(
            "worst layer rel. err {:.2e} ({}), worst end-to-end {:.2e} ({}) (limits 1e-3 / 1e-2)",
            worst_layer.1, worst_layer.0, e2e.1, e2e.0
        ),
    )
}

fn capacity_semantics() -> Outcome {
    let mut rng = seeded_rng(5);
    let mut failures = Vec::new();
    let mut zero_rows_checked = 0;
    for case in 0..1000u64 {
        let n = rng.gen_range(1..=6);
        let tokens = rng.gen_range(1..=24);
        let t = rng.gen_range(0.0f32..=1.0);
        let gamma = rng.gen_range(0.1f32..2.0);
        let mut store = ParamStore::new();
        let cfg = RouterConfig {
            num_experts: n,
            hidden_dim: 4,
            threshold: t,
            strategy: RoutingStrategy::Threshold,
            capacity_factor: gamma,
        };
        let layer = MoELayer::new(&mut store, "m", cfg, 3, 3 * n, LayerMode::Sparse, 256, &mut seeded_rng(case)).unwrap();
        let h = random_tensor(&[tokens, 4], 2.0, case + 10_000);
        let (y, out) = layer.forward_tensor(&store, &h, None).unwrap();
        let plan = plan_capacity(tokens, n, gamma);
        let again = resolve_assignments(&out.decisions, &plan).unwrap();
        if again != out.dispatch {
            failures.push(format!("case {case}: dispatch not reproducible"));
        }
        for e in 0..n {
            let kept = &out.dispatch.kept[e];
            if kept.len() > plan.capacity {
                failures.push(format!("case {case}: expert {e} holds {} > C = {}", kept.len(), plan.capacity));
            }
            let priority = |tok: usize| out.decisions[tok].selections.iter().find(|s| s.expert == e).unwrap().priority;
            for &(d, _) in out.dispatch.dropped.iter().filter(|&&(_, x)| x == e) {
                for &k in kept {
                    let (pk, pd) = (priority(k), priority(d));
                    if !(pk > pd || (pk == pd && k < d)) {
                        failures.push(format!("case {case}: expert {e} kept {k} ({pk}) over {d} ({pd})"));
                    }
                }
            }
        }
        for tok in out.dispatch.fully_dropped_tokens() {
            zero_rows_checked += 1;
            if y.row(tok).iter().any(|&v| v != 0.0) {
                failures.push(format!("case {case}: fully dropped token {tok} has a nonzero row"));
            }
        }
    }
    outcome(
        failures.is_empty() && zero_rows_checked > 0,
        match failures.first() {
            Some(f) => format!("{} violations, first: {f}", failures.len()),
            None => format!("1000 cases clean; {zero_rows_checked} fully dropped tokens all output zero rows"),
        },
    )
}

fn balance_anchors() -> Outcome {
    let uniform = load_balance_loss(&BalanceStats {
        top1_fraction: vec![0.25; 4],
        mean_top1_prob: vec![0.25; 4],
    });
    let concentrated = load_balance_loss(&BalanceStats {
        top1_fraction: vec![1.0, 0.0, 0.0, 0.0],
        mean_top1_prob: vec![1.0, 0.0, 0.0, 0.0],
    });
    let mixed = load_balance_loss(&BalanceStats {
        top1_fraction: vec![0.5, 0.5, 0.0, 0.0],
        mean_top1_prob: vec![0.4, 0.4, 0.1, 0.1],
    });
    let dists: Vec<GateDistribution> = (0..6).map(|_| GateDistribution::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap()).collect();
    let from_dists = load_balance_loss(&BalanceStats::from_distributions(&dists).unwrap());
    outcome(
        (uniform - 1.0).abs() <= 1e-6 && concentrated == 4.0 && from_dists == 4.0 && (mixed - 1.6).abs() <= 1e-6,
        format!("uniform {uniform}, concentrated {concentrated} (from routed tokens {from_dists}), mixed {mixed}"),
    )
}

fn flops_model() -> Outcome {
    let shape = |n: usize, de: usize| LayerShape {
        hidden_dim: 128,
        expert_dim: de,
        num_experts: n,
        baseline_ffn_dim: 256,
        learned_router: true,
    };
    let tokens = 1024;
    let base = shape(8, 32).count_flops(&plan_capacity(tokens, 8, 1.0)).expert_flops;
    let doubled = shape(8, 32).count_flops(&plan_capacity(tokens, 8, 2.0)).expert_flops;
    // halve d_e, double N, with γ raised to keep γ · d_e fixed as in the matched rows
    let iso = shape(16, 16).count_flops(&plan_capacity(tokens, 16, 2.0)).expert_flops;
    let fixed_gamma = shape(16, 16).count_flops(&plan_capacity(tokens, 16, 1.0)).expert_flops;
    let change = (iso as f64 - base as f64) / base as f64 * 100.0;
    outcome(
        doubled == 2 * base && iso == base,
        format!(
            "γ 1→2: {base} → {doubled}; halve d_e + double N (γ doubled): {change:+.1}% (at unchanged γ: {fixed_gamma})"
        ),
    )
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let mut lower = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let corpus = desk_corpus(seed);
        let (train_text, _) = corpus.split_at(corpus.len() - HELD_OUT_BYTES);
        let mut model = Model::build(&ModelConfig::default(), seed).unwrap();
        let report = train(&mut model, train_text, &desk_train_config(seed)).unwrap();
        let tenth = DESK_STEPS / 10;
        let early = report.mean_over(0, tenth, |r| r.mean_experts_per_token);
        let late = report.mean_over(DESK_STEPS - tenth, DESK_STEPS, |r| r.mean_experts_per_token);
        lower += usize::from(late < early);
        notes.push(format!("{early:.2}→{late:.2}"));
    }
    let elapsed = start.elapsed();
    outcome(
        lower >= 4 && elapsed < Duration::from_secs(20 * 60),
        format!(
            "experts/token first→last 10%: [{}]; lower in {lower}/5 seeds; {elapsed:.0?} (limit 20 min)",
            notes.join(", ")
        ),
    )
}

fn dense_application() -> Outcome {
    let mut within = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let corpus = desk_corpus(seed);
        let (train_text, held_out) = corpus.split_at(corpus.len() - HELD_OUT_BYTES);
        let mut cfg = ModelConfig::default();
        let moe = cfg.moe.as_mut().unwrap();
        moe.mode = LayerMode::DenseTrain;
        moe.threshold = 1.0;
        moe.capacity_factor = moe.num_experts as f32;
        let n = moe.num_experts as f32;
        let mut model = Model::build(&cfg, seed).unwrap();
        train(&mut model, train_text, &desk_train_config(seed)).unwrap();
        let opts = EvalOptions::default();
        let dense = evaluate(&model, held_out, &opts).unwrap();
        let mut sparse_model = model.clone();
        sparse_model.set_inference_sparsity(1.0, n / 2.0).unwrap();
        let sparse = evaluate(&sparse_model, held_out, &opts).unwrap();
        let rel = (sparse.perplexity - dense.perplexity) / dense.perplexity;
        within += usize::from(rel < 0.05);
        notes.push(format!(
            "{:.3}→{:.3} ({:+.2}%, billed FLOPs {:.2}→{:.2})",
            dense.perplexity,
            sparse.perplexity,
            rel * 100.0,
            dense.normalized_flops,
            sparse.normalized_flops
        ));
    }
    outcome(
        within >= 4,
        format!("ppl at γ=N → γ=N/2 (t=1): [{}]; within 5% in {within}/5 seeds", notes.join("; ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), synthetic_corpus(77, 128 * 1024)).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.training.steps = 150;
    cfg.training.corpus_path = "corpus.txt".into();
    cfg.output_dir = "run".into();
    std::fs::write(dir.path().join("exp.json"), cfg.to_json()).unwrap();
    let run = |dir: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_xmoe"))
            .args(["train", "--config", "exp.json"])
            .current_dir(dir)
            .env_remove("XMOE_SEED")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (
            std::fs::read(dir.join("run/metrics.csv")).unwrap(),
            std::fs::read(dir.join("run/model.ckpt")).unwrap(),
        )
    };
    let (m1, c1) = run(dir.path());
    let (m2, c2) = run(dir.path());
    outcome(
        m1 == m2 && c1 == c2,
        format!(
            "two CLI runs: metrics CSV {} ({} bytes), checkpoint {}",
            if m1 == m2 { "identical" } else { "DIFFERS" },
            m1.len(),
            if c1 == c2 { "identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 10] = [
        ("routing oracle", routing_oracle),
        ("degenerate thresholds", degenerate_identities),
        ("FFN decomposition identity", decomposition_identity),
        ("gradient suite", gradient_suite),
        ("capacity semantics", capacity_semantics),
        ("balance loss anchors", balance_anchors),
        ("FLOPs model", flops_model),
        ("desk-scale required-experts trend", desk_trend),
        ("dense training, sparse inference", dense_application),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
