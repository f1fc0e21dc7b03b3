//! Byte-level decoder-only transformer with pre-norm blocks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::config::ModelConfig;
use crate::moe_layer::{expert_forward_on, ExpertParams, FixedRoute, MoELayer, MoeOutput};
use crate::numerics::{checkpoint, seeded_rng, Bound, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::routing::HashRouter;

const CONFIG_TENSOR: &str = "meta.config_json";

#[derive(Clone, Debug)]
enum Ffn {
    Dense { w1: ParamId, w2: ParamId },
    Moe(MoELayer),
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: Norm,
    ffn: Ffn,
}

/// MoE activity of one block during a forward pass.
#[derive(Debug)]
pub struct LayerTrace {
    pub block: usize,
    pub moe: MoeOutput,
}

#[derive(Debug)]
pub struct ForwardPass {
    /// `[B·L × vocab]`.
    pub logits: Var,
    pub xent: Option<Var>,
    /// Cross-entropy plus the weighted auxiliary losses.
    pub loss: Option<Var>,
    /// Sum of the unweighted per-layer auxiliary losses.
    pub aux_loss: f32,
    pub layers: Vec<LayerTrace>,
    pub positive_activations: usize,
    pub total_activations: usize,
    /// `(positive, total)` post-activation counts for every block's FFN.
    pub block_activations: Vec<(usize, usize)>,
}

impl ForwardPass {
    pub fn fixed_routes(&self) -> Vec<FixedRoute> {
        self.layers.iter().map(|l| l.moe.fixed_route()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: ParamId,
}

fn norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Norm> {
    Ok(Norm {
        gamma: store.insert(format!("{prefix}.gamma"), Tensor::new(&[d], vec![1.0; d])?)?,
        beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))?,
    })
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let rng = &mut rng;
        let (d, v) = (config.hidden_dim, config.vocab_size);
        let mut store = ParamStore::new();
        let tok_emb = store.insert("tok_emb", Tensor::scaled_uniform(&[v, d], v, d, rng))?;
        let pos_emb = store.insert(
            "pos_emb",
            Tensor::scaled_uniform(&[config.max_seq_len, d], config.max_seq_len, d, rng),
        )?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for b in 0..config.num_layers {
            let p = format!("blocks.{b}");
            let ln1 = norm(&mut store, &format!("{p}.ln1"), d)?;
            let mut square = |name: &str, rng: &mut Rng| {
                store.insert(format!("{p}.attn.{name}"), Tensor::scaled_uniform(&[d, d], d, d, rng))
            };
            let (wq, wk, wv, wo) = (square("wq", rng)?, square("wk", rng)?, square("wv", rng)?, square("wo", rng)?);
            let ln2 = norm(&mut store, &format!("{p}.ln2"), d)?;
            let ffn = if config.is_moe_block(b) {
                let spec = config.moe.as_ref().expect("moe block implies spec");
                Ffn::Moe(MoELayer::new(
                    &mut store,
                    &format!("{p}.moe"),
                    config.router_config().expect("moe spec present"),
                    spec.expert_dim,
                    config.ffn_dim,
                    spec.mode,
                    v,
                    rng,
                )?)
            } else {
                let f = config.ffn_dim;
                Ffn::Dense {
                    w1: store.insert(format!("{p}.ffn.w1"), Tensor::scaled_uniform(&[f, d], d, f, rng))?,
                    w2: store.insert(format!("{p}.ffn.w2"), Tensor::scaled_uniform(&[d, f], f, d, rng))?,
                }
            };
            blocks.push(Block { ln1, wq, wk, wv, wo, ln2, ffn });
        }
        let ln_f = norm(&mut store, "ln_f", d)?;
        let head = store.insert("head", Tensor::scaled_uniform(&[v, d], d, v, rng))?;
        Ok(Self {
            config: config.clone(),
            params: store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_id(&self) -> ParamId {
        self.head
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoELayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.ffn {
            Ffn::Moe(m) => Some((i, m)),
            Ffn::Dense { .. } => None,
        })
    }

    pub fn moe_layer(&self, block: usize) -> Option<&MoELayer> {
        match &self.blocks.get(block)?.ffn {
            Ffn::Moe(m) => Some(m),
            Ffn::Dense { .. } => None,
        }
    }

    /// Dense FFN weights `(W1, W2)` of a non-MoE block.
    pub fn dense_ffn(&self, block: usize) -> Option<(&Tensor, &Tensor)> {
        match &self.blocks.get(block)?.ffn {
            Ffn::Dense { w1, w2 } => Some((self.params.get(*w1), self.params.get(*w2))),
            Ffn::Moe(_) => None,
        }
    }

    /// Applies a new threshold and capacity factor to every MoE layer.
    pub fn set_inference_sparsity(&mut self, threshold: f32, capacity_factor: f32) -> Result<()> {
        for b in &mut self.blocks {
            if let Ffn::Moe(m) = &mut b.ffn {
                m.set_inference_sparsity(threshold, capacity_factor)?;
            }
        }
        Ok(())
    }

    /// Forward over `batch` sequences of `seq` byte ids each.
    ///
    /// With `targets`, also records the mean cross-entropy and the total loss.
    /// `fixed` pins the routing of each MoE layer (in block order).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        targets: Option<&[usize]>,
        fixed: Option<&[FixedRoute]>,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if tokens.len() != batch * seq || seq == 0 || seq > cfg.max_seq_len {
            return Err(Error::contract(format!(
                "token batch of {} ids does not form {batch} × {seq} (max_seq_len {})",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(bound.var(self.tok_emb), tokens)?;
        let pos = tape.embedding(bound.var(self.pos_emb), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut layers = Vec::new();
        let mut aux_terms = Vec::new();
        let mut block_activations = Vec::with_capacity(self.blocks.len());
        let mut fixed_iter = fixed.map(|f| f.iter());
        for (bi, block) in self.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, bound.var(block.ln1.gamma), bound.var(block.ln1.beta))?;
            let q = tape.matmul_nt(h, bound.var(block.wq))?;
            let k = tape.matmul_nt(h, bound.var(block.wk))?;
            let v = tape.matmul_nt(h, bound.var(block.wv))?;
            let a = tape.causal_attention(q, k, v, batch, seq, cfg.num_heads)?;
            let a = tape.matmul_nt(a, bound.var(block.wo))?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, bound.var(block.ln2.gamma), bound.var(block.ln2.beta))?;
            let f = match &block.ffn {
                Ffn::Dense { w1, w2 } => {
                    let (act, out) = expert_forward_on(tape, bound.var(*w1), bound.var(*w2), h)?;
                    let values = tape.value(act).values();
                    block_activations.push((values.iter().filter(|&&v| v > 0.0).count(), values.len()));
                    out
                }
                Ffn::Moe(layer) => {
                    let route = match fixed_iter.as_mut() {
                        Some(it) => Some(it.next().ok_or_else(|| Error::contract("too few fixed routes"))?),
                        None => None,
                    };
                    let out = layer.forward(tape, bound, h, Some(tokens), route)?;
                    block_activations.push((out.positive_activations, out.total_activations));
                    if let Some(aux) = out.aux_loss {
                        aux_terms.push(aux);
                    }
                    let y = out.output;
                    layers.push(LayerTrace { block: bi, moe: out });
                    y
                }
            };
            x = tape.add(x, f)?;
        }
        let h = tape.layer_norm(x, bound.var(self.ln_f.gamma), bound.var(self.ln_f.beta))?;
        let logits = tape.matmul_nt(h, bound.var(self.head))?;

        let aux_loss: f32 = aux_terms.iter().map(|&a| tape.value(a).values()[0]).sum();
        let (xent, loss) = match targets {
            Some(t) => {
                let xent = tape.cross_entropy(logits, t)?;
                let mut loss = xent;
                if cfg.aux_loss_weight > 0.0 {
                    for &aux in &aux_terms {
                        let weighted = tape.scale(aux, cfg.aux_loss_weight)?;
                        loss = tape.add(loss, weighted)?;
                    }
                }
                (Some(xent), Some(loss))
            }
            None => (None, None),
        };
        Ok(ForwardPass {
            logits,
            xent,
            loss,
            aux_loss,
            layers,
            positive_activations: block_activations.iter().map(|a| a.0).sum(),
            total_activations: block_activations.iter().map(|a| a.1).sum(),
            block_activations,
        })
    }

    /// Serializes parameters, hash tables and the config into one archive.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let meta = Tensor::new(&[json.len()], json.bytes().map(f32::from).collect()).expect("1-d");
        let hashes: Vec<(String, Tensor)> = self
            .moe_layers()
            .filter_map(|(b, m)| {
                m.hash_router().map(|h| {
                    let table: Vec<f32> = h.table().iter().map(|&e| e as f32).collect();
                    (hash_name(b), Tensor::new(&[table.len()], table).expect("1-d"))
                })
            })
            .collect();
        let entries = std::iter::once((CONFIG_TENSOR, &meta))
            .chain(self.params.iter())
            .chain(hashes.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::encode(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(entries).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        Self::from_entries(checkpoint::decode(bytes)?)
    }

    fn from_entries(entries: Vec<(String, Tensor)>) -> std::result::Result<Self, String> {
        let mut entries = entries.into_iter();
        let (name, meta) = entries.next().ok_or("empty archive")?;
        if name != CONFIG_TENSOR {
            return Err(format!("first tensor is {name}, expected {CONFIG_TENSOR}"));
        }
        let json: Vec<u8> = meta.values().iter().map(|&b| b as u8).collect();
        let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| format!("config: {e}"))?;
        let mut model = Self::build(&config, 0).map_err(|e| e.to_string())?;
        let mut seen = 0;
        for (name, tensor) in entries {
            if let Some(id) = model.params.id(&name) {
                let slot = model.params.get_mut(id);
                if slot.shape() != tensor.shape() {
                    return Err(format!("{name}: shape {:?}, expected {:?}", tensor.shape(), slot.shape()));
                }
                *slot = tensor;
                seen += 1;
            } else if let Some(block) = parse_hash_name(&name) {
                let Some(Block { ffn: Ffn::Moe(layer), .. }) = model.blocks.get_mut(block) else {
                    return Err(format!("{name}: block {block} has no MoE layer"));
                };
                let table = tensor.values().iter().map(|&e| e as usize).collect();
                let router = HashRouter::from_table(table, layer.num_experts()).map_err(|e| e.to_string())?;
                layer.replace_hash_router(router);
            } else {
                return Err(format!("unexpected tensor {name}"));
            }
        }
        if seen != model.params.len() {
            return Err(format!("archive holds {seen} of {} parameters", model.params.len()));
        }
        Ok(model)
    }

    /// Dense model → MoE model with every FFN split into `num_experts` experts.
    ///
    /// Routers start at zero (uniform gates of `1/N`) and each expert's output
    /// matrix is scaled by `N`, so the densely routed result reproduces the
    /// source FFN up to summation order.
    pub fn decompose(&self, num_experts: usize) -> Result<Self> {
        if self.config.moe.is_some() {
            return Err(Error::contract("decompose expects a dense model"));
        }
        let f = self.config.ffn_dim;
        if num_experts == 0 || !f.is_multiple_of(num_experts) {
            return Err(Error::Config(vec![format!(
                "ffn_dim {f} is not divisible by {num_experts} experts"
            )]));
        }
        let mut config = self.config.clone();
        config.moe = Some(crate::lm::config::MoeSpec {
            num_experts,
            expert_dim: f / num_experts,
            strategy: crate::routing::RoutingStrategy::Threshold,
            threshold: 1.0,
            capacity_factor: num_experts as f32,
            mode: crate::moe_layer::LayerMode::DenseTrain,
            first_block: 0,
            every: 1,
        });
        let mut out = Self::build(&config, 0)?;
        for (name, t) in self.params.iter() {
            if let Some(id) = out.params.id(name) {
                *out.params.get_mut(id) = t.clone();
            }
        }
        let scale = num_experts as f32;
        for (b, block) in self.blocks.iter().enumerate() {
            let Ffn::Dense { w1, w2 } = block.ffn else { continue };
            let experts = crate::moe_layer::decompose_ffn(self.params.get(w1), self.params.get(w2), num_experts)?;
            let layer = out.moe_layer(b).expect("every block is MoE").clone();
            *out.params.get_mut(layer.router_id()) = Tensor::zeros(&[num_experts, config.hidden_dim]);
            for (i, ExpertParams { w1, mut w2 }) in experts.into_iter().enumerate() {
                w2.values_mut().iter_mut().for_each(|v| *v *= scale);
                let id1 = out.params.id(&format!("blocks.{b}.moe.experts.{i}.w1")).expect("expert w1");
                let id2 = out.params.id(&format!("blocks.{b}.moe.experts.{i}.w2")).expect("expert w2");
                *out.params.get_mut(id1) = w1;
                *out.params.get_mut(id2) = w2;
            }
        }
        Ok(out)
    }

    /// Logits for a single batch without gradient bookkeeping.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let pass = self.forward(&mut tape, &bound, tokens, batch, seq, None, None)?;
        Ok(tape.value(pass.logits).clone())
    }
}

fn hash_name(block: usize) -> String {
    format!("blocks.{block}.moe.hash_table")
}

fn parse_hash_name(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.strip_suffix(".moe.hash_table")?.parse().ok()
}
