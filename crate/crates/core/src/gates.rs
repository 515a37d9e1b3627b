//! Routing-logit mechanisms and the auxiliary balance objective.
//!
//! Every gate maps a block of token states `h[T, H]` to expert logits
//! `z[T, N]`; selection and weighting downstream are shared by all kinds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::RoutingDecision;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Trainable linear projection `z = h W_r`.
    Learned,
    /// Reads `N` coordinates of the hidden state directly as logits.
    SelfRoute,
    /// Linear projection drawn once at init and never updated.
    #[serde(rename = "fixed_random")]
    FixedRandomProjection,
    /// Fresh standard-normal logits on every forward pass.
    Random,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::Learned,
        GateKind::SelfRoute,
        GateKind::FixedRandomProjection,
        GateKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::Learned => "learned",
            GateKind::SelfRoute => "self_route",
            GateKind::FixedRandomProjection => "fixed_random",
            GateKind::Random => "random",
        }
    }

    pub fn has_projection(self) -> bool {
        matches!(self, GateKind::Learned | GateKind::FixedRandomProjection)
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("model.gate", format!("unknown gate `{s}`")))
    }
}

/// A configured gate for one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSpec {
    pub kind: GateKind,
    pub num_experts: usize,
    pub model_dim: usize,
    /// `[H, N]` projection, trainable for `Learned` and frozen for
    /// `FixedRandomProjection`.
    pub projection: Option<ParamId>,
    /// First coordinate of the self-routing window.
    pub slice_offset: usize,
}

impl GateSpec {
    /// Builds a gate, registering its projection (if any) in `store` under
    /// `name`. Projections are drawn from N(0, 1/H).
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        kind: GateKind,
        model_dim: usize,
        num_experts: usize,
        slice_offset: Option<usize>,
        store: &mut ParamStore<S>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if num_experts == 0 || model_dim == 0 {
            return Err(Error::config("model.num_experts", "gate dimensions must be positive"));
        }
        let mut offset = 0;
        if kind == GateKind::SelfRoute {
            if num_experts > model_dim {
                return Err(Error::config(
                    "model.num_experts",
                    format!("self_route needs num_experts ({num_experts}) <= hidden ({model_dim})"),
                ));
            }
            offset = slice_offset.unwrap_or(model_dim - num_experts);
            if offset + num_experts > model_dim {
                return Err(Error::config(
                    "model.slice_offset",
                    format!("offset {offset} leaves fewer than {num_experts} coordinates in {model_dim}"),
                ));
            }
        }
        let projection = if kind.has_projection() {
            let std = 1.0 / (model_dim as f64).sqrt();
            let data = (0..model_dim * num_experts)
                .map(|_| S::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let t = Tensor::new(data, &[model_dim, num_experts])?.with_grad(kind == GateKind::Learned);
            Some(store.insert(name, t))
        } else {
            None
        };
        Ok(GateSpec {
            kind,
            num_experts,
            model_dim,
            projection,
            slice_offset: offset,
        })
    }

    /// Expert logits `z[T, N]` for token states `h[T, H]`.
    pub fn compute_logits<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.shape(h);
        if shape.last() != Some(&self.model_dim) {
            return Err(Error::shape("compute_logits", shape, &[self.model_dim]));
        }
        match self.kind {
            GateKind::Learned | GateKind::FixedRandomProjection => {
                let id = self.projection.ok_or_else(|| Error::Contract(format!("{} gate without projection", self.kind)))?;
                let w = tape.param(store, id);
                tape.matmul(h, w)
            }
            GateKind::SelfRoute => tape.slice_cols(h, self.slice_offset, self.num_experts),
            GateKind::Random => {
                let rows = tape.value(h).len() / self.model_dim;
                let mut shape = tape.shape(h).to_vec();
                *shape.last_mut().expect("non-empty shape") = self.num_experts;
                let data = (0..rows * self.num_experts)
                    .map(|_| S::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                tape.constant(data, &shape)
            }
        }
    }

    /// Learned parameters owned by this gate.
    pub fn learned_params(&self) -> usize {
        match self.kind {
            GateKind::Learned => self.model_dim * self.num_experts,
            _ => 0,
        }
    }
}

/// Learned routing parameters for `layers` MoE layers: `L·H·N` for a
/// learned linear router, zero for every other kind.
pub fn router_param_count(kind: GateKind, layers: usize, hidden: usize, experts: usize) -> usize {
    match kind {
        GateKind::Learned => layers * hidden * experts,
        GateKind::SelfRoute | GateKind::FixedRandomProjection | GateKind::Random => 0,
    }
}

/// Expert fractions `f` and mean routing probabilities `p` over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceInputs {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
}

impl BalanceInputs {
    pub fn validate(&self) -> Result<()> {
        if self.f.len() != self.p.len() {
            return Err(Error::Contract(format!(
                "balance inputs of different lengths {} and {}",
                self.f.len(),
                self.p.len()
            )));
        }
        if self.f.iter().chain(&self.p).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Contract("balance inputs must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `N · Σ f_i p_i`.
pub fn balance_loss(inputs: &BalanceInputs, num_experts: usize) -> Result<f64> {
    inputs.validate()?;
    if inputs.f.len() != num_experts {
        return Err(Error::Contract(format!(
            "balance inputs have {} experts, expected {num_experts}",
            inputs.f.len()
        )));
    }
    let dot: f64 = inputs.f.iter().zip(&inputs.p).map(|(a, b)| a * b).sum();
    Ok(num_experts as f64 * dot)
}

/// Differentiable `N · Σ f_i p_i` with `f` held constant and `p` a `[N]` node.
pub fn balance_loss_var<S: Scalar>(tape: &mut Tape<S>, f: &[f64], p: Var, num_experts: usize) -> Result<Var> {
    if f.len() != num_experts || tape.value(p).len() != num_experts {
        return Err(Error::shape("balance_loss", tape.shape(p), &[f.len()]));
    }
    if f.iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("expert fractions must be non-negative".into()));
    }
    let scale = num_experts as f64;
    let coeffs: Vec<S> = f.iter().map(|&v| S::from_f64_lossy(scale * v)).collect();
    tape.dot_const(p, &coeffs)
}

/// Expert fractions per assignment (so `Σ f = 1`) and the batch mean of
/// each token's full-length probability vector, zero off the selection.
pub fn batch_balance_inputs<S: Scalar>(decisions: &[RoutingDecision<S>], num_experts: usize) -> Result<BalanceInputs> {
    if decisions.is_empty() {
        return Err(Error::Contract("balance inputs need at least one routing decision".into()));
    }
    let mut counts = vec![0usize; num_experts];
    let mut p = vec![0.0f64; num_experts];
    let mut total = 0usize;
    for d in decisions {
        for (&e, &w) in d.selected.iter().zip(&d.weights) {
            if e >= num_experts {
                return Err(Error::Index {
                    op: "batch_balance_inputs",
                    index: e,
                    bound: num_experts,
                });
            }
            counts[e] += 1;
            total += 1;
            p[e] += w.to_f64_lossy();
        }
    }
    let t = decisions.len() as f64;
    Ok(BalanceInputs {
        f: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        p: p.into_iter().map(|v| v / t).collect(),
    })
}
