//! The mixture-of-experts layer: small experts, dispatch under capacity,
//! gate-weighted combine and FLOPs accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, CombineTerm, GateWeight, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::routing::{
    compute_gate_probabilities, gate_distributions, plan_capacity, resolve_assignments,
    select_experts_threshold, select_experts_topk, BalanceStats, CapacityPlan, Dispatch, HashRouter,
    RouterConfig, RoutingDecision, RoutingStrategy,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    #[default]
    Sparse,
    /// Every token visits every expert: threshold 1.0 and capacity factor N.
    DenseTrain,
}

/// One small FFN: `W2 · gelu(W1 · x)` with `W1: [d_e × d]`, `W2: [d × d_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl ExpertParams {
    pub fn new(w1: Tensor, w2: Tensor) -> Result<Self> {
        let (&[de, d], &[d2, de2]) = (w1.shape(), w2.shape()) else {
            return Err(Error::shape("expert", w1.shape(), w2.shape()));
        };
        if d != d2 || de != de2 {
            return Err(Error::shape("expert", w1.shape(), w2.shape()));
        }
        Ok(Self { w1, w2 })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn expert_dim(&self) -> usize {
        self.w1.rows()
    }
}

/// Expert FFN on the tape. Returns `(post-activation, output)`.
pub fn expert_forward_on(tape: &mut Tape, w1: Var, w2: Var, x: Var) -> Result<(Var, Var)> {
    let pre = tape.matmul_nt(x, w1)?;
    let act = tape.gelu(pre)?;
    let out = tape.matmul_nt(act, w2)?;
    Ok((act, out))
}

/// Evaluates one expert on a `[rows × d]` batch.
pub fn expert_forward(expert: &ExpertParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w1 = tape.constant(expert.w1.clone());
    let w2 = tape.constant(expert.w2.clone());
    let x = tape.constant(x.clone());
    let (_, out) = expert_forward_on(&mut tape, w1, w2, x)?;
    Ok(tape.value(out).clone())
}

/// Splits a dense FFN (`W1: [d_ff × d]`, `W2: [d × d_ff]`) into `num_experts`
/// equal slices; expert `i` owns hidden units `i·d_ff/N .. (i+1)·d_ff/N`.
pub fn decompose_ffn(w1: &Tensor, w2: &Tensor, num_experts: usize) -> Result<Vec<ExpertParams>> {
    let (&[d_ff, d], &[d2, d_ff2]) = (w1.shape(), w2.shape()) else {
        return Err(Error::shape("decompose_ffn", w1.shape(), w2.shape()));
    };
    if d != d2 || d_ff != d_ff2 {
        return Err(Error::shape("decompose_ffn", w1.shape(), w2.shape()));
    }
    if num_experts == 0 || d_ff % num_experts != 0 {
        return Err(Error::contract(format!(
            "d_ff = {d_ff} is not divisible into N = {num_experts} experts"
        )));
    }
    let de = d_ff / num_experts;
    (0..num_experts)
        .map(|i| {
            let rows = w1.values()[i * de * d..(i + 1) * de * d].to_vec();
            let cols: Vec<f32> = (0..d)
                .flat_map(|r| w2.row(r)[i * de..(i + 1) * de].iter().copied())
                .collect();
            ExpertParams::new(Tensor::new(&[de, d], rows)?, Tensor::new(&[d, de], cols)?)
        })
        .collect()
}

/// FLOPs of one layer invocation. Multiply-add counts as two operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsReport {
    /// Billed expert work: `C · N` token slots, padding included.
    pub expert_flops: u64,
    pub router_flops: u64,
    pub total: u64,
    /// `total` over the dense baseline FFN on the same tokens.
    pub normalized: f64,
    /// Expert work on kept assignments only.
    pub utilized_flops: u64,
    /// Baseline the normalization divides by.
    pub baseline_flops: u64,
}

impl FlopsReport {
    pub const CSV_HEADER: &'static str = "expert_flops,router_flops,total,normalized,utilized_flops";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.expert_flops, self.router_flops, self.total, self.normalized, self.utilized_flops
        )
    }

    /// Expert FLOPs alone over the baseline.
    pub fn expert_normalized(&self) -> f64 {
        self.expert_flops as f64 / self.baseline_flops as f64
    }

    pub fn utilized_normalized(&self) -> f64 {
        self.utilized_flops as f64 / self.baseline_flops as f64
    }
}

/// The dimensions that determine a layer's cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub hidden_dim: usize,
    pub expert_dim: usize,
    pub num_experts: usize,
    pub baseline_ffn_dim: usize,
    pub learned_router: bool,
}

impl LayerShape {
    pub fn flops_per_slot(&self) -> u64 {
        4 * self.hidden_dim as u64 * self.expert_dim as u64
    }

    pub fn count_flops(&self, plan: &CapacityPlan) -> FlopsReport {
        let expert_flops = plan.capacity as u64 * self.num_experts as u64 * self.flops_per_slot();
        let router_flops = if self.learned_router {
            plan.tokens as u64 * 2 * self.hidden_dim as u64 * self.num_experts as u64
        } else {
            0
        };
        let total = expert_flops + router_flops;
        let baseline_flops = plan.tokens as u64 * 4 * self.hidden_dim as u64 * self.baseline_ffn_dim as u64;
        FlopsReport {
            expert_flops,
            router_flops,
            total,
            normalized: total as f64 / baseline_flops as f64,
            utilized_flops: 0,
            baseline_flops,
        }
    }
}

/// Routing held fixed across forwards (used by finite-difference checks).
#[derive(Clone, Debug)]
pub struct FixedRoute {
    pub decisions: Vec<RoutingDecision>,
    pub dispatch: Dispatch,
}

#[derive(Debug)]
pub struct MoeOutput {
    /// `[T × d]`; rows of fully dropped tokens are zero.
    pub output: Var,
    pub probs: Option<Var>,
    pub decisions: Vec<RoutingDecision>,
    pub dispatch: Dispatch,
    pub plan: CapacityPlan,
    pub stats: Option<BalanceStats>,
    pub aux_loss: Option<Var>,
    pub flops: FlopsReport,
    pub positive_activations: usize,
    pub total_activations: usize,
}

impl MoeOutput {
    pub fn mean_experts_per_token(&self) -> f64 {
        let total: usize = self.decisions.iter().map(|d| d.selections.len()).sum();
        total as f64 / self.decisions.len().max(1) as f64
    }

    pub fn fixed_route(&self) -> FixedRoute {
        FixedRoute {
            decisions: self.decisions.clone(),
            dispatch: self.dispatch.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ExpertIds {
    w1: ParamId,
    w2: ParamId,
}

/// A mixture-of-experts layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MoELayer {
    config: RouterConfig,
    expert_dim: usize,
    baseline_ffn_dim: usize,
    mode: LayerMode,
    router: ParamId,
    experts: Vec<ExpertIds>,
    hash: Option<HashRouter>,
}

impl MoELayer {
    /// Fresh layer with independently initialized experts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: RouterConfig,
        expert_dim: usize,
        baseline_ffn_dim: usize,
        mode: LayerMode,
        vocab_size: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.num_experts, config.hidden_dim);
        let router = Tensor::scaled_uniform(&[n, d], d, n, rng);
        let experts = (0..n)
            .map(|_| {
                ExpertParams::new(
                    Tensor::scaled_uniform(&[expert_dim, d], d, expert_dim, rng),
                    Tensor::scaled_uniform(&[d, expert_dim], expert_dim, d, rng),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = (config.strategy == RoutingStrategy::Hash).then(|| HashRouter::new(vocab_size, n, rng));
        Self::from_parts(store, prefix, config, experts, router, baseline_ffn_dim, mode, hash)
    }

    /// Layer built from explicit weights.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        store: &mut ParamStore,
        prefix: &str,
        config: RouterConfig,
        experts: Vec<ExpertParams>,
        router: Tensor,
        baseline_ffn_dim: usize,
        mode: LayerMode,
        hash: Option<HashRouter>,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.num_experts, config.hidden_dim);
        if experts.len() != n {
            return Err(Error::contract(format!("{} experts for N = {n}", experts.len())));
        }
        if router.shape() != [n, d] {
            return Err(Error::shape("router", router.shape(), &[n, d]));
        }
        let expert_dim = experts[0].expert_dim();
        if experts.iter().any(|e| e.hidden_dim() != d || e.expert_dim() != expert_dim) {
            return Err(Error::contract("experts must share (d, d_e)"));
        }
        if config.strategy == RoutingStrategy::Hash && hash.is_none() {
            return Err(Error::contract("hash routing needs a hash table"));
        }
        let router = store.insert(format!("{prefix}.router"), router)?;
        let experts = experts
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                Ok(ExpertIds {
                    w1: store.insert(format!("{prefix}.experts.{i}.w1"), e.w1)?,
                    w2: store.insert(format!("{prefix}.experts.{i}.w2"), e.w2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            expert_dim,
            baseline_ffn_dim,
            mode,
            router,
            experts,
            hash,
        })
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    pub fn num_experts(&self) -> usize {
        self.config.num_experts
    }

    pub fn expert_dim(&self) -> usize {
        self.expert_dim
    }

    pub fn hash_router(&self) -> Option<&HashRouter> {
        self.hash.as_ref()
    }

    pub(crate) fn replace_hash_router(&mut self, router: HashRouter) {
        self.hash = Some(router);
    }

    pub fn router_id(&self) -> ParamId {
        self.router
    }

    pub fn expert(&self, store: &ParamStore, i: usize) -> ExpertParams {
        let ids = self.experts[i];
        ExpertParams {
            w1: store.get(ids.w1).clone(),
            w2: store.get(ids.w2).clone(),
        }
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            hidden_dim: self.config.hidden_dim,
            expert_dim: self.expert_dim,
            num_experts: self.config.num_experts,
            baseline_ffn_dim: self.baseline_ffn_dim,
            learned_router: self.config.strategy != RoutingStrategy::Hash,
        }
    }

    pub fn effective_strategy(&self) -> RoutingStrategy {
        match self.mode {
            LayerMode::DenseTrain => RoutingStrategy::Threshold,
            LayerMode::Sparse => self.config.strategy,
        }
    }

    pub fn effective_threshold(&self) -> f32 {
        match self.mode {
            LayerMode::DenseTrain => 1.0,
            LayerMode::Sparse => self.config.threshold,
        }
    }

    pub fn effective_capacity_factor(&self) -> f32 {
        match self.mode {
            LayerMode::DenseTrain => self.config.num_experts as f32,
            LayerMode::Sparse => self.config.capacity_factor,
        }
    }

    /// Switches to sparse routing with the given threshold and capacity factor.
    /// Parameters are untouched.
    pub fn set_inference_sparsity(&mut self, threshold: f32, capacity_factor: f32) -> Result<()> {
        let mut config = self.config.clone();
        config.threshold = threshold;
        config.capacity_factor = capacity_factor;
        if self.mode == LayerMode::DenseTrain {
            config.strategy = RoutingStrategy::Threshold;
        }
        config.validate()?;
        self.config = config;
        self.mode = LayerMode::Sparse;
        Ok(())
    }

    pub fn count_flops(&self, plan: &CapacityPlan) -> FlopsReport {
        self.shape().count_flops(plan)
    }

    /// Forward over a `[T × d]` token batch on `tape`.
    ///
    /// `symbols` feeds hash routing. With `fixed` set, expert selection and
    /// capacity decisions are reused instead of recomputed; gate weights still
    /// come from the current router.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        hidden: Var,
        symbols: Option<&[usize]>,
        fixed: Option<&FixedRoute>,
    ) -> Result<MoeOutput> {
        let (t, d) = (tape.value(hidden).rows(), tape.value(hidden).cols());
        if tape.value(hidden).shape().len() != 2 || d != self.config.hidden_dim {
            return Err(Error::shape("moe_forward", tape.value(hidden).shape(), &[t, self.config.hidden_dim]));
        }
        if t == 0 {
            return Err(Error::contract("moe_forward on an empty batch"));
        }
        let n = self.config.num_experts;
        let strategy = self.effective_strategy();
        let plan = plan_capacity(t, n, self.effective_capacity_factor());

        let probs = match strategy {
            RoutingStrategy::Hash => None,
            _ => Some(compute_gate_probabilities(tape, hidden, bound.var(self.router))?),
        };

        let (decisions, dispatch) = match fixed {
            Some(route) => {
                if route.decisions.len() != t {
                    return Err(Error::contract("fixed route covers a different batch"));
                }
                (route.decisions.clone(), route.dispatch.clone())
            }
            None => {
                let decisions = self.route(tape, probs, symbols, t)?;
                let dispatch = resolve_assignments(&decisions, &plan)?;
                (decisions, dispatch)
            }
        };

        // expert computation over kept tokens
        let mut parts = Vec::new();
        let mut part_of = vec![usize::MAX; n];
        let mut row_of = vec![vec![usize::MAX; t]; n];
        let (mut positive, mut total_act) = (0usize, 0usize);
        for (e, tokens) in dispatch.kept.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            let ids = self.experts[e];
            let x = tape.gather_rows(hidden, tokens)?;
            let (act, out) = expert_forward_on(tape, bound.var(ids.w1), bound.var(ids.w2), x)?;
            let a = tape.value(act).values();
            positive += a.iter().filter(|&&v| v > 0.0).count();
            total_act += a.len();
            part_of[e] = parts.len();
            parts.push(out);
            for (r, &tok) in tokens.iter().enumerate() {
                row_of[e][tok] = r;
            }
        }

        let mut terms = Vec::new();
        for d_ in &decisions {
            for (j, s) in d_.selections.iter().enumerate() {
                if !dispatch.kept_mask[d_.token_id][j] {
                    continue;
                }
                let weight = match probs {
                    Some(_) => GateWeight::Prob { expert: s.expert },
                    None => GateWeight::Fixed(s.gate_weight),
                };
                terms.push(CombineTerm {
                    token: d_.token_id,
                    part: part_of[s.expert],
                    row: row_of[s.expert][d_.token_id],
                    weight,
                });
            }
        }
        let output = tape.combine(&parts, probs, &terms, t, d)?;

        let (stats, aux_loss) = match probs {
            Some(p) => {
                let top1: Vec<usize> = decisions.iter().map(|d_| d_.selections[0].expert).collect();
                let stats = balance_stats(tape.value(p), &top1);
                (Some(stats), Some(tape.balance_loss(p, &top1)?))
            }
            None => (None, None),
        };

        let mut flops = self.count_flops(&plan);
        flops.utilized_flops = dispatch.kept_assignments() as u64 * self.shape().flops_per_slot();

        Ok(MoeOutput {
            output,
            probs,
            decisions,
            dispatch,
            plan,
            stats,
            aux_loss,
            flops,
            positive_activations: positive,
            total_activations: total_act,
        })
    }

    fn route(&self, tape: &Tape, probs: Option<Var>, symbols: Option<&[usize]>, t: usize) -> Result<Vec<RoutingDecision>> {
        match (self.effective_strategy(), probs) {
            (RoutingStrategy::Hash, _) => {
                let hash = self.hash.as_ref().ok_or_else(|| Error::contract("hash routing needs a hash table"))?;
                let symbols = symbols.ok_or_else(|| Error::contract("hash routing needs token symbols"))?;
                if symbols.len() != t {
                    return Err(Error::shape("hash routing", &[symbols.len()], &[t]));
                }
                symbols.iter().enumerate().map(|(i, &s)| hash.select(i, s)).collect()
            }
            (strategy, Some(p)) => {
                let dists = gate_distributions(tape.value(p))?;
                dists
                    .iter()
                    .enumerate()
                    .map(|(i, dist)| match strategy {
                        RoutingStrategy::TopK(k) => select_experts_topk(i, dist, k),
                        _ => Ok(select_experts_threshold(i, dist, self.effective_threshold())),
                    })
                    .collect()
            }
            (_, None) => Err(Error::contract("learned routing without probabilities")),
        }
    }

    /// Convenience forward on plain tensors; returns the output rows and routing.
    pub fn forward_tensor(&self, store: &ParamStore, hidden: &Tensor, symbols: Option<&[usize]>) -> Result<(Tensor, MoeOutput)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let h = tape.constant(hidden.clone());
        let out = self.forward(&mut tape, &bound, h, symbols, None)?;
        Ok((tape.value(out.output).clone(), out))
    }
}

/// Top-1 statistics matching [`Tape::balance_loss`].
fn balance_stats(probs: &Tensor, top1: &[usize]) -> BalanceStats {
    let n = probs.cols();
    let t = top1.len() as f64;
    let mut fraction = vec![0.0f64; n];
    let mut mass = vec![0.0f64; n];
    for (x, &e) in top1.iter().enumerate() {
        fraction[e] += 1.0;
        mass[e] += probs.values()[x * n + e] as f64;
    }
    BalanceStats {
        top1_fraction: fraction.iter().map(|f| (f / t) as f32).collect(),
        mean_top1_prob: mass.iter().map(|m| (m / t) as f32).collect(),
    }
}
