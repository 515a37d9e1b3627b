//! Top-k sparse mixture-of-experts layer:
//! `out[t] = Σ_{i ∈ topk(z_t)} p_i · E_i(h_t)` with `p` a softmax over the
//! selected logits only. The layer is agnostic to how `z` was produced.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gates::{BalanceInputs, GateSpec};
use crate::scalar::Scalar;

/// Routing outcome for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision<S> {
    /// Chosen experts, highest logit first.
    pub selected: Vec<usize>,
    /// Softmax over the selected logits, aligned with `selected`.
    pub weights: Vec<S>,
    pub raw_logits: Vec<S>,
}

/// Routing for a block of tokens, keeping the differentiable weights.
#[derive(Debug)]
pub struct Routing<S> {
    pub decisions: Vec<RoutingDecision<S>>,
    /// Row-major `[T, k]` expert indices.
    pub selected: Vec<usize>,
    /// `[T, k]` weights node.
    pub weights: Var,
    pub top_k: usize,
    pub num_experts: usize,
}

impl<S: Scalar> Routing<S> {
    /// `[N]` node holding the batch mean of each token's full probability
    /// vector (selected weights, zero elsewhere).
    pub fn mean_probabilities(&self, tape: &mut Tape<S>) -> Result<Var> {
        let full = tape.scatter_cols(self.weights, &self.selected, self.num_experts)?;
        Ok(tape.mean_rows(full))
    }

    /// Per-assignment expert fractions of this block.
    pub fn expert_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_experts];
        for &e in &self.selected {
            counts[e] += 1;
        }
        let total = self.selected.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }

    pub fn balance_inputs(&self) -> Result<BalanceInputs> {
        crate::gates::batch_balance_inputs(&self.decisions, self.num_experts)
    }
}

/// Top-k selection (lowest index wins ties) and softmax over the selected
/// logits of `z[T, N]`. Gradient reaches only the selected logits.
pub fn route<S: Scalar>(tape: &mut Tape<S>, z: Var, k: usize) -> Result<Routing<S>> {
    let n = *tape.shape(z).last().unwrap_or(&0);
    if k == 0 || k > n {
        return Err(Error::config("model.top_k", format!("top_k = {k} must be in 1..={n}")));
    }
    let rows = tape.value(z).len() / n;
    let z2 = if tape.shape(z).len() == 2 { z } else { tape.reshape(z, &[rows, n])? };
    let (selected, picked) = tape.topk(z2, k)?;
    let weights = tape.softmax(picked);
    let zv = tape.value(z2);
    let wv = tape.value(weights);
    let decisions = (0..rows)
        .map(|t| RoutingDecision {
            selected: selected[t * k..(t + 1) * k].to_vec(),
            weights: wv[t * k..(t + 1) * k].to_vec(),
            raw_logits: zv[t * n..(t + 1) * n].to_vec(),
        })
        .collect();
    Ok(Routing {
        decisions,
        selected,
        weights,
        top_k: k,
        num_experts: n,
    })
}

/// Two-layer GELU feed-forward network `W2·gelu(W1·h + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ExpertFfn {
    /// Registers a fresh expert: weights ~ N(0, std²) for the input
    /// projection and N(0, out_std²) for the output projection, zero biases.
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        hidden: usize,
        ffn: usize,
        std: f64,
        out_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w1 = store.insert(format!("{prefix}.w1"), normal_tensor(&[hidden, ffn], std, rng)?);
        let b1 = store.insert(format!("{prefix}.b1"), Tensor::zeros(&[ffn]).with_grad(true));
        let w2 = store.insert(format!("{prefix}.w2"), normal_tensor(&[ffn, hidden], out_std, rng)?);
        let b2 = store.insert(format!("{prefix}.b2"), Tensor::zeros(&[hidden]).with_grad(true));
        Ok(ExpertFfn { w1, b1, w2, b2 })
    }

    pub fn param_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        [self.w1, self.b1, self.w2, self.b2].iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Applies the expert to rows `h[T, H]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let a = tape.matmul(h, w1)?;
        let a = tape.add_suffix(a, b1)?;
        let a = tape.gelu(a);
        let o = tape.matmul(a, w2)?;
        tape.add_suffix(o, b2)
    }
}

pub(crate) fn normal_tensor<S: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<S>> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ok(Tensor::new(data, shape)?.with_grad(true))
}

/// One (token, weight) assignment to an expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<S> {
    pub token: usize,
    /// Position of this expert within the token's selection.
    pub slot: usize,
    pub weight: S,
}

/// Per-expert token lists, each ordered by token index.
#[derive(Clone, Debug, PartialEq)]
pub struct DispatchPlan<S> {
    pub per_expert: Vec<Vec<Assignment<S>>>,
    pub top_k: usize,
    pub tokens: usize,
}

impl<S: Scalar> DispatchPlan<S> {
    pub fn total_assignments(&self) -> usize {
        self.per_expert.iter().map(Vec::len).sum()
    }

    /// Experts that received at least one token, in expert order.
    pub fn active_experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_expert.iter().enumerate().filter(|(_, a)| !a.is_empty()).map(|(e, _)| e)
    }

    /// For each `(token, slot)` in row-major `[T, k]` order, the index of the
    /// active expert block and the row inside it.
    fn slots(&self) -> Vec<(usize, usize)> {
        let mut slots = vec![(0, 0); self.tokens * self.top_k];
        for (part, e) in self.active_experts().enumerate() {
            for (row, a) in self.per_expert[e].iter().enumerate() {
                slots[a.token * self.top_k + a.slot] = (part, row);
            }
        }
        slots
    }
}

pub fn dispatch_plan<S: Scalar>(decisions: &[RoutingDecision<S>], num_experts: usize) -> Result<DispatchPlan<S>> {
    let top_k = decisions.first().map_or(0, |d| d.selected.len());
    let mut per_expert: Vec<Vec<Assignment<S>>> = vec![Vec::new(); num_experts];
    for (token, d) in decisions.iter().enumerate() {
        if d.selected.len() != top_k || d.weights.len() != top_k {
            return Err(Error::Contract(format!("token {token} has an inconsistent selection size")));
        }
        for (slot, (&e, &weight)) in d.selected.iter().zip(&d.weights).enumerate() {
            let list = per_expert.get_mut(e).ok_or(Error::Index {
                op: "dispatch_plan",
                index: e,
                bound: num_experts,
            })?;
            list.push(Assignment { token, slot, weight });
        }
    }
    Ok(DispatchPlan {
        per_expert,
        top_k,
        tokens: decisions.len(),
    })
}

/// Output of one MoE layer application.
#[derive(Debug)]
pub struct MoeOutput<S> {
    pub out: Var,
    pub routing: Routing<S>,
}

/// Gate, experts, and top-k selection for one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub gate: GateSpec,
    pub experts: Vec<ExpertFfn>,
    pub top_k: usize,
}

impl MoeLayer {
    pub fn forward<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        rng: &mut R,
    ) -> Result<MoeOutput<S>> {
        moe_forward(tape, store, h, &self.gate, &self.experts, self.top_k, rng)
    }
}

/// Routes every token of `h[T, H]` to its top-k experts, evaluates each
/// expert once on its gathered rows, and recombines with the routing
/// weights. No capacity limit: all assignments are computed.
pub fn moe_forward<S: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    h: Var,
    gate: &GateSpec,
    experts: &[ExpertFfn],
    k: usize,
    rng: &mut R,
) -> Result<MoeOutput<S>> {
    if experts.len() != gate.num_experts {
        return Err(Error::Contract(format!(
            "{} experts for a gate over {}",
            experts.len(),
            gate.num_experts
        )));
    }
    if tape.shape(h).len() != 2 {
        return Err(Error::dim("moe_forward", format!("expected [T, H] input, got {:?}", tape.shape(h))));
    }
    let z = gate.compute_logits(tape, store, h, rng)?;
    let routing = route(tape, z, k)?;
    let plan = dispatch_plan(&routing.decisions, gate.num_experts)?;
    let mut parts = Vec::new();
    for e in plan.active_experts() {
        let rows: Vec<usize> = plan.per_expert[e].iter().map(|a| a.token).collect();
        let x = tape.gather_rows(h, &rows)?;
        parts.push(experts[e].forward(tape, store, x)?);
    }
    let out = tape.combine(&parts, &plan.slots(), routing.weights)?;
    Ok(MoeOutput { out, routing })
}
