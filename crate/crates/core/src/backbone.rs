//! Small pre-norm causal transformer whose feed-forward sublayers are
//! replaced by MoE layers according to a placement policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gates::{router_param_count, GateKind, GateSpec};
use crate::moe::{normal_tensor, ExpertFfn, MoeLayer, Routing};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Which blocks carry an MoE sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    Every,
    /// Blocks 1, 3, 5, ...; dense elsewhere.
    Every2,
    /// All dense.
    None,
}

impl MoePlacement {
    pub fn is_moe(self, block: usize) -> bool {
        match self {
            MoePlacement::Every => true,
            MoePlacement::Every2 => block % 2 == 1,
            MoePlacement::None => false,
        }
    }

    pub fn moe_layers(self, depth: usize) -> usize {
        (0..depth).filter(|&b| self.is_moe(b)).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub moe_placement: MoePlacement,
    pub num_experts: usize,
    pub top_k: usize,
    pub gate: GateKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_offset: Option<usize>,
    pub ffn_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            hidden: 64,
            heads: 4,
            seq_len: 128,
            vocab: 256,
            moe_placement: MoePlacement::Every,
            num_experts: 8,
            top_k: 2,
            gate: GateKind::Learned,
            slice_offset: None,
            ffn_ratio: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_hidden(&self) -> usize {
        (self.hidden as f64 * self.ffn_ratio).round() as usize
    }

    pub fn moe_layers(&self) -> usize {
        self.moe_placement.moe_layers(self.depth)
    }

    /// Parameter partition computed from the shapes alone, without
    /// allocating a model. Agrees with [`Model::count_params`].
    pub fn param_counts(&self) -> ParamCounts {
        let (h, f) = (self.hidden, self.ffn_hidden());
        let ffn = h * f + f + f * h + h;
        let moe = self.moe_layers();
        let dense = self.depth - moe;
        let per_block = 2 * h + 4 * (h * h + h) + 2 * h;
        let learned_router = router_param_count(self.gate, moe, h, self.num_experts);
        let frozen = match self.gate {
            GateKind::FixedRandomProjection => moe * h * self.num_experts,
            _ => 0,
        };
        let expert = (dense + moe * self.num_experts) * ffn;
        let backbone = self.vocab * h + self.seq_len * h + self.depth * per_block + 2 * h;
        ParamCounts {
            total: backbone + expert + learned_router,
            learned_router,
            expert,
            backbone,
            frozen,
        }
    }

    /// Checks the structural invariants, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.depth", self.depth),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.seq_len", self.seq_len),
            ("model.vocab", self.vocab),
            ("model.num_experts", self.num_experts),
            ("model.top_k", self.top_k),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("hidden {} is not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_hidden() >= 1) {
            return Err(Error::config("model.ffn_ratio", "must give a positive expert width"));
        }
        if self.moe_placement != MoePlacement::None {
            if self.top_k > self.num_experts {
                return Err(Error::config(
                    "model.top_k",
                    format!("top_k {} exceeds num_experts {}", self.top_k, self.num_experts),
                ));
            }
            if self.gate == GateKind::SelfRoute {
                if self.num_experts > self.hidden {
                    return Err(Error::config(
                        "model.num_experts",
                        format!("self_route needs num_experts {} <= hidden {}", self.num_experts, self.hidden),
                    ));
                }
                if let Some(off) = self.slice_offset {
                    if off + self.num_experts > self.hidden {
                        return Err(Error::config(
                            "model.slice_offset",
                            format!("window [{off}, {}) exceeds hidden {}", off + self.num_experts, self.hidden),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn init<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, width: usize) -> Self {
        Norm {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::filled(&[width], S::one()).with_grad(true)),
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]).with_grad(true)),
        }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.insert(format!("{prefix}.w"), normal_tensor(&[fan_in, fan_out], std, rng)?),
            b: store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]).with_grad(true)),
        })
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_suffix(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
enum FeedForward {
    Dense(ExpertFfn),
    Moe(MoeLayer),
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

/// Causal transformer language model with tied input/output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
}

/// Forward result: next-token logits and per-MoE-layer routing.
#[derive(Debug)]
pub struct ForwardOutput<S> {
    /// `[B, T, V]`.
    pub logits: Var,
    pub routing: Vec<Routing<S>>,
}

/// Partition of learned parameter counts. `total` excludes `frozen`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub learned_router: usize,
    pub expert: usize,
    pub backbone: usize,
    pub frozen: usize,
}

impl<S: Scalar> Model<S> {
    /// Deterministic construction from `seed`. Backbone and expert weights
    /// come from one generator stream and router projections from another,
    /// so models that differ only in gate kind share every other weight.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut router_rng = ChaCha8Rng::seed_from_u64(seed);
        router_rng.set_stream(1);

        let h = cfg.hidden;
        let out_std = INIT_STD / (2.0 * cfg.depth as f64).sqrt();
        let mut store = ParamStore::new();
        let tok_emb = store.insert("tok_emb", normal_tensor(&[cfg.vocab, h], INIT_STD, &mut rng)?);
        let pos_emb = store.insert("pos_emb", normal_tensor(&[cfg.seq_len, h], INIT_STD, &mut rng)?);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            let ln1 = Norm::init(&mut store, &format!("{p}.ln1"), h);
            let attn = Attention {
                q: Linear::init(&mut store, &format!("{p}.attn.q"), h, h, INIT_STD, &mut rng)?,
                k: Linear::init(&mut store, &format!("{p}.attn.k"), h, h, INIT_STD, &mut rng)?,
                v: Linear::init(&mut store, &format!("{p}.attn.v"), h, h, INIT_STD, &mut rng)?,
                out: Linear::init(&mut store, &format!("{p}.attn.out"), h, h, out_std, &mut rng)?,
            };
            let ln2 = Norm::init(&mut store, &format!("{p}.ln2"), h);
            let ffn = if cfg.moe_placement.is_moe(i) {
                let experts = (0..cfg.num_experts)
                    .map(|e| {
                        ExpertFfn::init(
                            &mut store,
                            &format!("{p}.moe.experts.{e}"),
                            h,
                            cfg.ffn_hidden(),
                            INIT_STD,
                            out_std,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gate = GateSpec::new(
                    cfg.gate,
                    h,
                    cfg.num_experts,
                    cfg.slice_offset,
                    &mut store,
                    &format!("{p}.moe.router"),
                    &mut router_rng,
                )?;
                FeedForward::Moe(MoeLayer {
                    gate,
                    experts,
                    top_k: cfg.top_k,
                })
            } else {
                FeedForward::Dense(ExpertFfn::init(
                    &mut store,
                    &format!("{p}.ffn"),
                    h,
                    cfg.ffn_hidden(),
                    INIT_STD,
                    out_std,
                    &mut rng,
                )?)
            };
            blocks.push(Block { ln1, attn, ln2, ffn });
        }
        let ln_f = Norm::init(&mut store, "ln_f", h);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Block indices that carry an MoE sublayer.
    pub fn moe_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.ffn, FeedForward::Moe(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn gate_projections(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                FeedForward::Moe(m) => m.gate.projection,
                FeedForward::Dense(_) => None,
            })
            .collect()
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut c = ParamCounts {
            total: 0,
            learned_router: 0,
            expert: 0,
            backbone: 0,
            frozen: 0,
        };
        let mut expert_ids = Vec::new();
        for b in &self.blocks {
            match &b.ffn {
                FeedForward::Dense(e) => expert_ids.push(e.clone()),
                FeedForward::Moe(m) => {
                    expert_ids.extend(m.experts.iter().cloned());
                    c.learned_router += m.gate.learned_params();
                }
            }
        }
        c.expert = expert_ids.iter().map(|e| e.param_count(&self.store)).sum();
        for (_, _, t) in self.store.iter() {
            if t.requires_grad {
                c.total += t.numel();
            } else {
                c.frozen += t.numel();
            }
        }
        c.backbone = c.total - c.expert - c.learned_router;
        debug_assert_eq!(
            c.learned_router,
            router_param_count(self.cfg.gate, self.cfg.moe_layers(), self.cfg.hidden, self.cfg.num_experts)
        );
        c
    }

    /// Logits for `tokens` laid out as `[batch, len]` row-major. Random gates
    /// draw from `rng`; other gates leave it untouched.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        tokens: &[usize],
        batch: usize,
        len: usize,
        rng: &mut R,
    ) -> Result<ForwardOutput<S>> {
        let cfg = &self.cfg;
        if tokens.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::shape("forward", &[batch, len], &[tokens.len()]));
        }
        if len > cfg.seq_len {
            return Err(Error::dim("forward", format!("sequence length {len} exceeds {}", cfg.seq_len)));
        }
        let (h, heads) = (cfg.hidden, cfg.heads);
        let hd = h / heads;
        let emb = tape.param(&self.store, self.tok_emb);
        let x = tape.gather_rows(emb, tokens)?;
        let x = tape.reshape(x, &[batch, len, h])?;
        let pos = tape.param(&self.store, self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.gather_rows(pos, &positions)?;
        let x = tape.add_suffix(x, pos)?;
        let mut x = tape.reshape(x, &[batch * len, h])?;
        let att_scale = S::one() / S::from_usize_lossy(hd).sqrt();
        let mut routing = Vec::new();
        for block in &self.blocks {
            let a = block.ln1.apply(tape, &self.store, x)?;
            let split = |lin: &Linear, tape: &mut Tape<S>| -> Result<Var> {
                let y = lin.apply(tape, &self.store, a)?;
                let y = tape.reshape(y, &[batch, len, heads, hd])?;
                tape.permute_0213(y)
            };
            let q = split(&block.attn.q, tape)?;
            let k = split(&block.attn.k, tape)?;
            let v = split(&block.attn.v, tape)?;
            let s = tape.bmm(q, k, true)?;
            let p = tape.causal_softmax(s, att_scale)?;
            let o = tape.bmm(p, v, false)?;
            let o = tape.permute_0213(o)?;
            let o = tape.reshape(o, &[batch * len, h])?;
            let o = block.attn.out.apply(tape, &self.store, o)?;
            x = tape.add(x, o)?;

            let m = block.ln2.apply(tape, &self.store, x)?;
            let f = match &block.ffn {
                FeedForward::Dense(e) => e.forward(tape, &self.store, m)?,
                FeedForward::Moe(layer) => {
                    let out = layer.forward(tape, &self.store, m, rng)?;
                    routing.push(out.routing);
                    out.out
                }
            };
            x = tape.add(x, f)?;
        }
        let x = self.ln_f.apply(tape, &self.store, x)?;
        let emb = tape.param(&self.store, self.tok_emb);
        let logits = tape.matmul_nt(x, emb)?;
        let logits = tape.reshape(logits, &[batch, len, cfg.vocab])?;
        Ok(ForwardOutput { logits, routing })
    }

    /// Validates token ids against the vocabulary.
    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            Some(&bad) => Err(Error::Index {
                op: "forward",
                index: bad,
                bound: self.cfg.vocab,
            }),
            None => Ok(()),
        }
    }
}
