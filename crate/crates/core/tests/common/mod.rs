//! Helpers shared by the integration tests.
#![allow(dead_code)]

use moe_core::autodiff::{ParamStore, Tape, Tensor, Var};
use moe_core::backbone::{ModelConfig, MoePlacement};
use moe_core::gates::{GateKind, GateSpec};
use moe_core::moe::{ExpertFfn, RoutingDecision};
use moe_core::Scalar;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

pub fn tensor64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(&normal_vec(n, 1.0, seed), shape).unwrap()
}

pub fn tensor32(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_f64(&normal_vec(n, 1.0, seed), shape).unwrap()
}

/// Reduces `v` to a scalar with fixed random coefficients so every output
/// coordinate reaches the gradient with a distinct weight.
pub fn probe(tape: &mut Tape<f64>, v: Var, seed: u64) -> moe_core::Result<Var> {
    let n = tape.value(v).len();
    let c = normal_vec(n, 1.0, seed ^ 0x5eed);
    tape.dot_const(v, &c)
}

pub fn tiny_config(gate: GateKind) -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden: 16,
        heads: 2,
        seq_len: 8,
        vocab: 256,
        moe_placement: MoePlacement::Every,
        num_experts: 4,
        top_k: 2,
        gate,
        slice_offset: None,
        ffn_ratio: 2.0,
    }
}

const WORDS: &[&str] = &[
    "the", "a", "river", "stone", "market", "quietly", "carried", "north", "lantern", "over", "under", "seven",
    "merchant", "garden", "copper", "winter", "opened", "small", "bridge", "because", "letters", "and", "then",
    "slowly", "harbor", "found", "old", "bright", "window", "across", "ledger", "with", "every", "morning", "road",
    "field", "counted", "silver", "when", "was", "their", "kept", "mill", "of", "to", "in", "near", "long",
];
const NAMES: &[&str] = &["alder", "birch", "cedar", "dune", "ember", "fjord", "grove", "heath"];
const REGS: &[&str] = &["r0", "r1", "r2", "r3", "acc", "tmp", "idx", "ptr"];

/// Deterministic mixed-genre byte corpus of at least `min_bytes` bytes:
/// prose, arithmetic, key-value records and register-machine listings, so
/// different tokens call for different computations.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    while out.len() < min_bytes {
        match r.random_range(0..4) {
            0 => {
                let n = r.random_range(8..24);
                let mut first = true;
                for _ in 0..n {
                    let w = WORDS.choose(&mut r).unwrap();
                    if first {
                        let mut c = w.chars();
                        let h = c.next().unwrap().to_ascii_uppercase();
                        out.push(h);
                        out.push_str(c.as_str());
                        first = false;
                    } else {
                        out.push(' ');
                        out.push_str(w);
                    }
                }
                out.push_str(".\n");
            }
            1 => {
                for _ in 0..r.random_range(2..6) {
                    let a: u32 = r.random_range(0..100);
                    let b: u32 = r.random_range(0..100);
                    if r.random_bool(0.5) {
                        out.push_str(&format!("{a}+{b}={}\n", a + b));
                    } else {
                        out.push_str(&format!("{a}*{b}={}\n", a * b));
                    }
                }
            }
            2 => {
                let name = NAMES.choose(&mut r).unwrap();
                let id: u32 = r.random_range(1000..10000);
                let qty: u32 = r.random_range(1..500);
                let price = r.random_range(100..100000) as f64 / 100.0;
                out.push_str(&format!(
                    "{{\"id\": {id}, \"name\": \"{name}\", \"qty\": {qty}, \"price\": {price:.2}}}\n"
                ));
            }
            _ => {
                out.push_str(&format!("fn {}_{}:\n", NAMES.choose(&mut r).unwrap(), r.random_range(0..50)));
                for _ in 0..r.random_range(3..8) {
                    let op = ["mov", "add", "sub", "cmp", "jmp", "ld", "st"].choose(&mut r).unwrap();
                    let d = REGS.choose(&mut r).unwrap();
                    let s = REGS.choose(&mut r).unwrap();
                    out.push_str(&format!("    {op} {d}, {s}\n"));
                }
                out.push_str("    ret\n");
            }
        }
    }
    out.into_bytes()
}

pub struct Layer<S> {
    pub store: ParamStore<S>,
    pub gate: GateSpec,
    pub experts: Vec<ExpertFfn>,
}

pub fn layer<S: Scalar>(kind: GateKind, h: usize, n: usize, ffn: usize, seed: u64) -> Layer<S> {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let experts = (0..n)
        .map(|e| ExpertFfn::init(&mut store, &format!("e{e}"), h, ffn, 0.3, 0.3, &mut r).unwrap())
        .collect();
    let gate = GateSpec::new(kind, h, n, None, &mut store, "router", &mut r).unwrap();
    Layer { store, gate, experts }
}

/// Copies expert 0's weights into every other expert.
pub fn make_identical<S: Scalar>(l: &mut Layer<S>) {
    for e in 1..l.experts.len() {
        for (src, dst) in [
            (l.experts[0].w1, l.experts[e].w1),
            (l.experts[0].b1, l.experts[e].b1),
            (l.experts[0].w2, l.experts[e].w2),
            (l.experts[0].b2, l.experts[e].b2),
        ] {
            let data = l.store.get(src).data.clone();
            l.store.get_mut(dst).data = data;
        }
    }
}

pub fn ffn_oracle(store: &ParamStore<f64>, e: &ExpertFfn, x: &[f64]) -> Vec<f64> {
    let (w1, b1, w2, b2) = (store.get(e.w1), store.get(e.b1), store.get(e.w2), store.get(e.b2));
    let (h, f) = (w1.shape[0], w1.shape[1]);
    let mut a = b1.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..f {
            a[j] += xi * w1.data[i * f + j];
        }
    }
    let c = (2.0 / std::f64::consts::PI).sqrt();
    for v in &mut a {
        *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * *v * *v * *v)).tanh());
    }
    let mut o = b2.data.clone();
    for (j, &aj) in a.iter().enumerate() {
        for q in 0..h {
            o[q] += aj * w2.data[j * h + q];
        }
    }
    o
}

/// Per-token loop: each token's selected experts run on that token alone.
pub fn naive_moe(l: &Layer<f32>, x: &Tensor<f32>, decisions: &[RoutingDecision<f32>]) -> Vec<f32> {
    let h = x.shape[1];
    let mut out = Vec::new();
    for (t, d) in decisions.iter().enumerate() {
        let row = Tensor::new(x.data[t * h..(t + 1) * h].to_vec(), &[1, h]).unwrap();
        let ys: Vec<Vec<f32>> = d
            .selected
            .iter()
            .map(|&e| {
                let mut tape = Tape::no_grad();
                let v = tape.leaf(&row);
                let y = l.experts[e].forward(&mut tape, &l.store, v).unwrap();
                tape.value(y).to_vec()
            })
            .collect();
        let mut acc = ys[0].clone();
        for j in 1..ys.len() {
            for q in 0..h {
                acc[q] += d.weights[j] * (ys[j][q] - ys[0][q]);
            }
        }
        out.extend(acc);
    }
    out
}
