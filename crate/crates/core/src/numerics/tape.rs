//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every operation evaluates eagerly, stores its result on the tape and
//! remembers whatever its backward rule needs. [`Tape::backward`] walks the
//! recorded nodes in reverse order once and accumulates into the gradient
//! buffers of the leaves that require gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;
const LN_EPS: f32 = 1e-5;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where the mixing coefficient of one combine term comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateWeight {
    /// Read (and differentiate) `probs[token, expert]`.
    Prob { expert: usize },
    /// A constant coefficient, e.g. 1.0 for hash routing.
    Fixed(f32),
}

/// One `(token ← weight · part[row])` contribution of a combine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombineTerm {
    pub token: usize,
    pub part: usize,
    pub row: usize,
    pub weight: GateWeight,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Sum { x: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    Combine { parts: Vec<Var>, probs: Option<Var>, terms: Vec<CombineTerm> },
    BalanceLoss { probs: Var, top1: Vec<usize>, fraction: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite result from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m×k] · bᵀ` where `b` is stored `[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n, bstride) = if trans_b { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
        if k != kb {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).values(), (k, 1), self.value(b).values(), bstride, 0.0, &mut out, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let out: Vec<f32> = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Adds a length-`c` vector to every row of `x [r×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let out: Vec<f32> = tx
            .values()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.values()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let out: Vec<f32> = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.values().iter().map(|v| v * c).collect())?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Scale { x, c }, rg))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).values().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.values().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Gelu { x }, rg))
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(Error::contract("softmax over an empty dimension"));
        }
        let mut out = tx.values().to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.values().chunks(c).enumerate() {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * tg.values()[j] + tb.values()[j];
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, c) = (tt.rows(), tt.cols());
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!("embedding id {bad} outside vocabulary {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(&[ids.len(), c], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Selects `rows` of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!("row {bad} out of range for {r} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Multi-head causal self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]` with rows grouped by sequence;
    /// head `h` owns columns `h·d/heads .. (h+1)·d/heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [rows, d] {
                return Err(Error::shape("attention", &[rows, d], self.value(other).shape()));
            }
        }
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention layout: rows {rows}, batch {batch}, seq {seq}, width {d}, heads {heads}"
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (tq, tk, tv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(seq, hd, seq, &tq[base..], (d, 1), &tk[base..], (1, d), 0.0, p, seq);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                gemm(seq, seq, hd, p, (seq, 1), &tv[base..], (d, 1), 0.0, &mut out[base..], d);
            }
        }
        let t = Tensor::new(&[rows, d], out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, batch, seq, heads, probs }, rg))
    }

    /// Mean token cross-entropy of `logits [n×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = (tl.rows(), tl.cols());
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!("target {bad} outside vocabulary {vocab}")));
        }
        let mut probs = tl.values().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += (lse - row[t]) as f64;
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = (total / n as f64) as f32;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Weighted scatter of expert outputs back to token rows.
    ///
    /// Output row `t` is the sum, in the order given, of `w · parts[p][row]`
    /// over all terms addressed to token `t`. Tokens without terms stay zero.
    pub fn combine(
        &mut self,
        parts: &[Var],
        probs: Option<Var>,
        terms: &[CombineTerm],
        tokens: usize,
        width: usize,
    ) -> Result<Var> {
        for &p in parts {
            if self.value(p).cols() != width {
                return Err(Error::shape("combine", &[tokens, width], self.value(p).shape()));
            }
        }
        let mut out = vec![0.0; tokens * width];
        for term in terms {
            if term.token >= tokens || term.part >= parts.len() {
                return Err(Error::contract("combine term out of range"));
            }
            let w = self.term_weight(probs, term)?;
            let src = self.value(parts[term.part]).row(term.row);
            for (o, s) in out[term.token * width..][..width].iter_mut().zip(src) {
                *o += w * s;
            }
        }
        let mut deps = parts.to_vec();
        deps.extend(probs);
        let rg = self.needs(&deps);
        let t = Tensor::new(&[tokens, width], out)?;
        Ok(self.push(t, Op::Combine { parts: parts.to_vec(), probs, terms: terms.to_vec() }, rg))
    }

    fn term_weight(&self, probs: Option<Var>, term: &CombineTerm) -> Result<f32> {
        match term.weight {
            GateWeight::Fixed(w) => Ok(w),
            GateWeight::Prob { expert } => {
                let p = probs.ok_or_else(|| Error::contract("gate-weighted term without probabilities"))?;
                let tp = self.value(p);
                Ok(tp.values()[term.token * tp.cols() + expert])
            }
        }
    }

    /// Load-balancing loss `N · Σ_i f_i · p̄_i` over a `[T×N]` probability batch.
    ///
    /// `top1[x]` is token `x`'s first-choice expert; `f_i` is the share of tokens
    /// whose first choice is `i` and `p̄_i` is the probability those tokens put
    /// on `i`, averaged over all `T` tokens. The gradient flows only through `p̄`.
    pub fn balance_loss(&mut self, probs: Var, top1: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        let (t, n) = (tp.rows(), tp.cols());
        if top1.len() != t || t == 0 {
            return Err(Error::shape("balance_loss", tp.shape(), &[top1.len()]));
        }
        let mut fraction = vec![0.0f32; n];
        let mut mean_prob = vec![0.0f64; n];
        for (x, &e) in top1.iter().enumerate() {
            fraction[e] += 1.0;
            mean_prob[e] += tp.values()[x * n + e] as f64;
        }
        fraction.iter_mut().for_each(|f| *f /= t as f32);
        let loss: f64 = fraction
            .iter()
            .zip(&mean_prob)
            .map(|(&f, &p)| f as f64 * p / t as f64)
            .sum::<f64>()
            * n as f64;
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::BalanceLoss { probs, top1: top1.to_vec(), fraction },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims(self.value(*a));
                let (br, bc) = dims(self.value(*b));
                let n = if *trans_b { br } else { bc };
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let bs = if *trans_b { (bc, 1) } else { (1, bc) };
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n, 1), self.value(*b).values(), bs, 1.0, da, k);
                }
                if self.wants(*b) {
                    let av = self.value(*a).values();
                    let db = slot(grads, *b, br * bc);
                    if *trans_b {
                        // dB [n×k] = dYᵀ · A
                        gemm(n, m, k, g, (1, n), av, (k, 1), 1.0, db, k);
                    } else {
                        // dB [k×n] = Aᵀ · dY
                        gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, db, n);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let db = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                if self.wants(*a) {
                    let da = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += c * g[j];
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).values();
                    let dx = slot(grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let dx = slot(grads, *x, g.len());
                    for ((y, gy), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.cols();
                let gv = self.value(*gamma).values();
                if self.wants(*x) {
                    let dx = slot(grads, *x, g.len());
                    for r in 0..rstd.len() {
                        let gy = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f32;
                        mean_dx /= c as f32;
                        for j in 0..c {
                            let d = gy[j] * gv[j];
                            dx[r * c + j] += rstd[r] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if self.wants(*gamma) {
                    let dg = slot(grads, *gamma, c);
                    for (gy, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let db = slot(grads, *beta, c);
                    for gy in g.chunks(c) {
                        add_into(db, gy);
                    }
                }
            }
            Op::Embedding { table: src, ids: rows } | Op::GatherRows { x: src, rows } => {
                if self.wants(*src) {
                    let t = self.value(*src);
                    let c = t.cols();
                    let dt = slot(grads, *src, t.numel());
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dt[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(g, grads, (*q, *k, *v), (*batch, *seq, *heads), probs);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).cols();
                    let scale = g[0] / targets.len() as f32;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        let d = &mut dl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            d[j] += scale * row[j];
                        }
                        d[t] -= scale;
                    }
                }
            }
            Op::Combine { parts, probs, terms } => {
                let width = node.value.cols();
                for term in terms {
                    let gy = &g[term.token * width..(term.token + 1) * width];
                    let part = parts[term.part];
                    if self.wants(part) {
                        let w = self.term_weight(*probs, term).expect("validated in forward");
                        let n = self.value(part).numel();
                        let dp = &mut slot(grads, part, n)[term.row * width..(term.row + 1) * width];
                        for j in 0..width {
                            dp[j] += w * gy[j];
                        }
                    }
                    if let (GateWeight::Prob { expert }, Some(p)) = (term.weight, probs) {
                        if self.wants(*p) {
                            let src = self.value(part).row(term.row);
                            let dot: f32 = src.iter().zip(gy).map(|(a, b)| a * b).sum();
                            let tp = self.value(*p);
                            let cols = tp.cols();
                            slot(grads, *p, tp.numel())[term.token * cols + expert] += dot;
                        }
                    }
                }
            }
            Op::BalanceLoss { probs, top1, fraction } => {
                if self.wants(*probs) {
                    let tp = self.value(*probs);
                    let (t, n) = (tp.rows(), tp.cols());
                    let dp = slot(grads, *probs, tp.numel());
                    for (x, &e) in top1.iter().enumerate() {
                        dp[x * n + e] += g[0] * n as f32 * fraction[e] / t as f32;
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        (q, k, v): (Var, Var, Var),
        (batch, seq, heads): (usize, usize, usize),
        probs: &[f32],
    ) {
        let (rows, d) = dims(self.value(q));
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let (tq, tk, tv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dV = Pᵀ · dO
                gemm(seq, seq, hd, p, (1, seq), &g[base..], (d, 1), 1.0, &mut dv[base..], d);
                // dP = dO · Vᵀ
                gemm(seq, hd, seq, &g[base..], (d, 1), &tv[base..], (1, d), 0.0, &mut dp, seq);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: f32 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                    }
                }
                // dQ = dS · K, dK = dSᵀ · Q
                gemm(seq, seq, hd, &dp, (seq, 1), &tk[base..], (d, 1), 1.0, &mut dq[base..], d);
                gemm(seq, seq, hd, &dp, (1, seq), &tq[base..], (d, 1), 1.0, &mut dk[base..], d);
            }
        }
        for (var, d_) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                add_into(slot(grads, var, rows * d), &d_);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
