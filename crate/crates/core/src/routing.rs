//! Gate distributions, expert selection, token priorities, capacity planning
//! and the top-1 load-balancing loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Cumulative-probability comparisons never ask for more than this, so a
/// softmax row that sums to slightly under 1 cannot lose its last expert.
pub const THRESHOLD_CEILING: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum RoutingStrategy {
    Threshold,
    TopK(usize),
    Hash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub hidden_dim: usize,
    pub threshold: f32,
    pub strategy: RoutingStrategy,
    pub capacity_factor: f32,
}

impl RouterConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_experts == 0 {
            v.push("num_experts must be positive".to_string());
        }
        if self.hidden_dim == 0 {
            v.push("hidden_dim must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            v.push(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            v.push(format!("capacity_factor {} must be positive", self.capacity_factor));
        }
        if let RoutingStrategy::TopK(k) = self.strategy {
            if k == 0 || k > self.num_experts {
                v.push(format!("top-k {k} outside 1..={}", self.num_experts));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// One token's probability distribution over experts.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDistribution {
    probs: Vec<f32>,
}

impl GateDistribution {
    pub fn new(probs: Vec<f32>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("gate distribution over zero experts"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::contract("gate probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().map(|&p| p as f64).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!("gate probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn num_experts(&self) -> usize {
        self.probs.len()
    }

    /// Expert indices by descending probability, ties to the lower index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
    }

    pub fn top1(&self) -> usize {
        self.ranked()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub expert: usize,
    pub gate_weight: f32,
    pub priority: f32,
    /// 1-based position in the token's preference order.
    pub rank: usize,
}

impl Selection {
    fn new(expert: usize, gate_weight: f32, rank: usize) -> Self {
        Self {
            expert,
            gate_weight,
            priority: gate_weight - rank as f32,
            rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub token_id: usize,
    pub selections: Vec<Selection>,
}

impl RoutingDecision {
    pub fn experts(&self) -> Vec<usize> {
        self.selections.iter().map(|s| s.expert).collect()
    }

    fn from_prefix(token_id: usize, p: &GateDistribution, order: &[usize]) -> Self {
        let selections = order
            .iter()
            .enumerate()
            .map(|(j, &e)| Selection::new(e, p.probs[e], j + 1))
            .collect();
        Self { token_id, selections }
    }
}

/// Gate probabilities `softmax(h · Wᵀ)` on the tape; `h` is `[T×d]`, `W` is `[N×d]`.
pub fn compute_gate_probabilities(tape: &mut Tape, hidden: Var, router_weights: Var) -> Result<Var> {
    let logits = tape.matmul_nt(hidden, router_weights)?;
    tape.softmax(logits)
}

/// Splits a `[T×N]` probability tensor into per-token distributions.
pub fn gate_distributions(probs: &Tensor) -> Result<Vec<GateDistribution>> {
    let n = probs.cols();
    probs
        .values()
        .chunks(n)
        .map(|row| GateDistribution::new(row.to_vec()))
        .collect()
}

/// Minimal descending-probability prefix whose cumulative mass reaches `threshold`.
///
/// A threshold of 1.0 or more selects every expert. Below that, the comparison
/// target is capped at [`THRESHOLD_CEILING`]. At least one expert is always
/// selected and the rank-`j` selection gets priority `p − j`.
pub fn select_experts_threshold(token_id: usize, p: &GateDistribution, threshold: f32) -> RoutingDecision {
    let order = p.ranked();
    if threshold >= 1.0 {
        return RoutingDecision::from_prefix(token_id, p, &order);
    }
    let target = (threshold as f64).min(THRESHOLD_CEILING);
    let mut cumulative = 0.0f64;
    let mut m = order.len();
    for (j, &e) in order.iter().enumerate() {
        cumulative += p.probs[e] as f64;
        if cumulative >= target {
            m = j + 1;
            break;
        }
    }
    RoutingDecision::from_prefix(token_id, p, &order[..m])
}

/// The `k` most probable experts.
pub fn select_experts_topk(token_id: usize, p: &GateDistribution, k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > p.num_experts() {
        return Err(Error::contract(format!("top-k {k} outside 1..={}", p.num_experts())));
    }
    let order = p.ranked();
    Ok(RoutingDecision::from_prefix(token_id, p, &order[..k]))
}

/// Fixed random symbol → expert map, drawn once at construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashRouter {
    table: Vec<usize>,
    num_experts: usize,
}

impl HashRouter {
    pub fn new<R: Rng>(vocab_size: usize, num_experts: usize, rng: &mut R) -> Self {
        let table = (0..vocab_size).map(|_| rng.gen_range(0..num_experts)).collect();
        Self { table, num_experts }
    }

    pub fn from_table(table: Vec<usize>, num_experts: usize) -> Result<Self> {
        if num_experts == 0 || table.iter().any(|&e| e >= num_experts) {
            return Err(Error::contract("hash table entry outside the expert range"));
        }
        Ok(Self { table, num_experts })
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn expert_for(&self, symbol: usize) -> Result<usize> {
        self.table.get(symbol).copied().ok_or_else(|| {
            Error::contract(format!("symbol {symbol} outside vocabulary of {}", self.table.len()))
        })
    }

    pub fn select(&self, token_id: usize, symbol: usize) -> Result<RoutingDecision> {
        let expert = self.expert_for(symbol)?;
        Ok(RoutingDecision {
            token_id,
            selections: vec![Selection {
                expert,
                gate_weight: 1.0,
                priority: 0.0,
                rank: 1,
            }],
        })
    }
}

/// Per-expert token quota for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CapacityPlan {
    pub tokens: usize,
    pub num_experts: usize,
    pub capacity: usize,
    pub capacity_factor: f32,
}

/// `C = max(1, ceil(T · γ / N))`.
pub fn plan_capacity(tokens: usize, num_experts: usize, capacity_factor: f32) -> CapacityPlan {
    let raw = (tokens as f64 * capacity_factor as f64 / num_experts.max(1) as f64).ceil();
    CapacityPlan {
        tokens,
        num_experts,
        capacity: (raw as usize).max(1),
        capacity_factor,
    }
}

/// Result of enforcing expert capacity on a batch of routing decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    pub capacity: usize,
    /// Kept tokens per expert, highest priority first.
    pub kept: Vec<Vec<usize>>,
    /// Dropped `(token, expert)` assignments.
    pub dropped: Vec<(usize, usize)>,
    /// `kept_mask[token][j]` tells whether selection `j` of that token survived.
    pub kept_mask: Vec<Vec<bool>>,
}

impl Dispatch {
    pub fn kept_assignments(&self) -> usize {
        self.kept.iter().map(Vec::len).sum()
    }

    pub fn total_assignments(&self) -> usize {
        self.kept_assignments() + self.dropped.len()
    }

    pub fn drop_rate(&self) -> f64 {
        match self.total_assignments() {
            0 => 0.0,
            n => self.dropped.len() as f64 / n as f64,
        }
    }

    /// Tokens that lost every one of their selections.
    pub fn fully_dropped_tokens(&self) -> Vec<usize> {
        self.kept_mask
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty() && m.iter().all(|k| !k))
            .map(|(t, _)| t)
            .collect()
    }
}

/// Keeps, for each expert, the `C` candidates with the highest priority.
///
/// Equal priorities go to the lower token id. A token dropped by one expert
/// can still be served by another.
pub fn resolve_assignments(decisions: &[RoutingDecision], plan: &CapacityPlan) -> Result<Dispatch> {
    let t = decisions.len();
    let mut candidates: Vec<Vec<(f32, usize, usize)>> = vec![Vec::new(); plan.num_experts];
    let mut kept_mask: Vec<Vec<bool>> = vec![Vec::new(); t];
    for d in decisions {
        if d.token_id >= t || !kept_mask[d.token_id].is_empty() {
            return Err(Error::contract(format!(
                "decisions must cover tokens 0..{t} exactly once (saw {})",
                d.token_id
            )));
        }
        kept_mask[d.token_id] = vec![false; d.selections.len()];
        for (j, s) in d.selections.iter().enumerate() {
            let slot = candidates
                .get_mut(s.expert)
                .ok_or_else(|| Error::contract(format!("expert {} outside plan", s.expert)))?;
            slot.push((s.priority, d.token_id, j));
        }
    }
    let mut kept = Vec::with_capacity(plan.num_experts);
    let mut dropped = Vec::new();
    for (expert, mut cands) in candidates.into_iter().enumerate() {
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let keep = cands.len().min(plan.capacity);
        for &(_, token, j) in &cands[..keep] {
            kept_mask[token][j] = true;
        }
        dropped.extend(cands[keep..].iter().map(|&(_, token, _)| (token, expert)));
        kept.push(cands[..keep].iter().map(|&(_, token, _)| token).collect());
    }
    dropped.sort_unstable();
    Ok(Dispatch {
        capacity: plan.capacity,
        kept,
        dropped,
        kept_mask,
    })
}

/// Top-1 load statistics of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceStats {
    /// Share of tokens whose first choice is each expert.
    pub top1_fraction: Vec<f32>,
    /// First-choice probability mass credited to each expert, averaged over all tokens.
    pub mean_top1_prob: Vec<f32>,
}

impl BalanceStats {
    pub fn from_distributions(dists: &[GateDistribution]) -> Result<Self> {
        let first = dists.first().ok_or_else(|| Error::contract("balance stats need at least one token"))?;
        let n = first.num_experts();
        let mut fraction = vec![0.0f64; n];
        let mut mass = vec![0.0f64; n];
        for d in dists {
            let e = d.top1();
            fraction[e] += 1.0;
            mass[e] += d.probs()[e] as f64;
        }
        let t = dists.len() as f64;
        Ok(Self {
            top1_fraction: fraction.iter().map(|f| (f / t) as f32).collect(),
            mean_top1_prob: mass.iter().map(|p| (p / t) as f32).collect(),
        })
    }
}

/// `N · Σ_i f_i · p̄_i`.
pub fn load_balance_loss(stats: &BalanceStats) -> f32 {
    let n = stats.top1_fraction.len() as f64;
    let dot: f64 = stats
        .top1_fraction
        .iter()
        .zip(&stats.mean_top1_prob)
        .map(|(&f, &p)| f as f64 * p as f64)
        .sum();
    (n * dot) as f32
}
