use crate::autodiff::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{Layout, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
        b_layout: Layout,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        b_layout: Layout,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddSuffix {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Gelu {
        a: Var,
        gate: Vec<S>,
    },
    Softmax {
        a: Var,
        width: usize,
    },
    CausalSoftmax {
        a: Var,
        t: usize,
        scale: S,
    },
    CausalMask {
        a: Var,
        t: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        width: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        width: usize,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    SliceCols {
        a: Var,
        width: usize,
        offset: usize,
        n: usize,
    },
    GatherCols {
        a: Var,
        width: usize,
        idx: Vec<usize>,
        k: usize,
    },
    ScatterCols {
        a: Var,
        n: usize,
        idx: Vec<usize>,
        k: usize,
    },
    GatherRows {
        a: Var,
        width: usize,
        rows: Vec<usize>,
    },
    Permute0213 {
        a: Var,
        dims: [usize; 4],
    },
    Reshape {
        a: Var,
    },
    MeanRows {
        a: Var,
        rows: usize,
        width: usize,
    },
    Sum {
        a: Var,
    },
    DotConst {
        a: Var,
        coeffs: Vec<S>,
    },
    Combine {
        parts: Vec<Var>,
        slots: Vec<(usize, usize)>,
        weights: Var,
        k: usize,
        width: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Reverse-mode autodiff tape. Operations append nodes in evaluation order,
/// so every node's inputs precede it and a reverse sweep is a valid
/// topological replay of the chain rule.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64_lossy(v)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

// 0.5·(1 + tanh(u)) = σ(2u), so the gate needs a single exponential.
fn gelu_gate<S: Scalar>(x: S) -> S {
    let two_u = lit::<S>(2.0 * GELU_C) * (x + lit::<S>(GELU_A) * x * x * x);
    S::one() / (S::one() + (-two_u).exp())
}

fn gelu_grad<S: Scalar>(x: S, s: S) -> S {
    let d_two_u = lit::<S>(2.0 * GELU_C) * (S::one() + lit::<S>(3.0 * GELU_A) * x * x);
    s + x * s * (S::one() - s) * d_two_u
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no node will require gradients.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, inputs: &[Var], op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf { param },
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf; it requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad, None)
    }

    pub fn constant(&mut self, data: Vec<S>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(data, shape)?;
        Ok(self.push_leaf(t.shape, t.data, false, None))
    }

    /// Binds a store tensor; its gradient is delivered by [`Tape::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad, Some(id))
    }

    /// `a[.., K] · b[K, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Layout::Normal, "matmul")
    }

    /// `a[.., K] · b[P, K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Layout::Transposed, "matmul_nt")
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_layout: Layout, op: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let k = last_dim(&sa);
        let (bk, n) = match b_layout {
            Layout::Normal => (sb[0], sb[1]),
            Layout::Transposed => (sb[1], sb[0]),
        };
        if k != bk {
            return Err(Error::shape(op, &sa, &sb));
        }
        let rows = self.nodes[a.0].value.len() / k;
        let mut out = vec![S::zero(); rows * n];
        S::gemm(rows, k, n, self.value(a), Layout::Normal, self.value(b), b_layout, &mut out, false);
        let mut shape = sa;
        *shape.last_mut().expect("non-empty shape") = n;
        Ok(self.push(
            shape,
            out,
            &[a, b],
            Op::MatMul {
                a,
                b,
                rows,
                k,
                n,
                b_layout,
            },
        ))
    }

    /// Batched product over matching leading dimensions:
    /// `a[.., M, K] · b[.., K, P]`, or `b[.., P, K]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (bk, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != bk {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let groups: usize = sa[..r - 2].iter().product();
        let b_layout = if transpose_b { Layout::Transposed } else { Layout::Normal };
        let mut out = vec![S::zero(); groups * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for g in 0..groups {
                S::gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    Layout::Normal,
                    &bv[g * k * n..(g + 1) * k * n],
                    b_layout,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa;
        shape[r - 1] = n;
        Ok(self.push(
            shape,
            out,
            &[a, b],
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                b_layout,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<S> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias rows, positional tables).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_suffix", sa, sb));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(bv.len()) {
            add_assign(row, bv);
        }
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::AddSuffix { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Scale { a, c })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let gate: Vec<S> = self.value(a).iter().map(|&x| gelu_gate(x)).collect();
        let out = self.value(a).iter().zip(&gate).map(|(&x, &s)| x * s).collect();
        self.push(self.shape(a).to_vec(), out, &[a], Op::Gelu { a, gate })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let width = last_dim(self.shape(a));
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(width) {
            softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, &[a], Op::Softmax { a, width })
    }

    /// `softmax(causal_mask(scale · a))` in one pass over trailing `[T, T]`
    /// blocks; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: S) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::dim("causal_softmax", format!("expected trailing square block, got {s:?}")));
        }
        let t = s[s.len() - 1];
        let mut out = vec![S::zero(); self.value(a).len()];
        for (ob, ib) in out.chunks_exact_mut(t * t).zip(self.value(a).chunks_exact(t * t)) {
            for i in 0..t {
                let row = &mut ob[i * t..i * t + i + 1];
                for (o, &x) in row.iter_mut().zip(&ib[i * t..]) {
                    *o = x * scale;
                }
                softmax_in_place(row);
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, &[a], Op::CausalSoftmax { a, t, scale }))
    }

    /// Sets entries above the diagonal of the trailing `[T, T]` block to -inf.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::dim("causal_mask", format!("expected trailing square block, got {s:?}")));
        }
        let t = s[s.len() - 1];
        let mut out = self.value(a).to_vec();
        for block in out.chunks_exact_mut(t * t) {
            for i in 0..t {
                block[i * t + i + 1..(i + 1) * t].fill(S::neg_infinity());
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, &[a], Op::CausalMask { a, t }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let width = last_dim(self.shape(x));
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let wdiv = S::from_usize_lossy(width);
        let eps = lit::<S>(eps);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / width;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<S>() / wdiv;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / wdiv;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gv[c] + bv[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let width = last_dim(self.shape(logits));
        let lv = self.value(logits);
        let rows = lv.len() / width;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: width,
            });
        }
        let mut probs = lv.to_vec();
        let mut total = S::zero();
        for (r, row) in probs.chunks_exact_mut(width).enumerate() {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[targets[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / S::from_usize_lossy(rows);
        Ok(self.push(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                width,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Columns `[offset, offset + n)` of the last axis.
    pub fn slice_cols(&mut self, a: Var, offset: usize, n: usize) -> Result<Var> {
        let width = last_dim(self.shape(a));
        if n == 0 || offset + n > width {
            return Err(Error::dim(
                "slice",
                format!("window [{offset}, {}) outside last axis of size {width}", offset + n),
            ));
        }
        let out: Vec<S> = self
            .value(a)
            .chunks_exact(width)
            .flat_map(|row| row[offset..offset + n].iter().copied())
            .collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        Ok(self.push(shape, out, &[a], Op::SliceCols { a, width, offset, n }))
    }

    /// The last `n` coordinates of the last axis.
    pub fn slice_last(&mut self, a: Var, n: usize) -> Result<Var> {
        let width = last_dim(self.shape(a));
        if n == 0 || n > width {
            return Err(Error::dim("slice_last", format!("n = {n} with last axis of size {width}")));
        }
        self.slice_cols(a, width - n, n)
    }

    /// Row-wise top-k over the last axis. Indices are ordered by descending
    /// value with ties going to the lower index; values carry gradient as a
    /// gather, the selection itself does not.
    pub fn topk(&mut self, a: Var, k: usize) -> Result<(Vec<usize>, Var)> {
        let width = last_dim(self.shape(a));
        if k == 0 || k > width {
            return Err(Error::dim("topk", format!("k = {k} with last axis of size {width}")));
        }
        let mut idx = Vec::with_capacity(self.value(a).len() / width * k);
        for row in self.value(a).chunks_exact(width) {
            idx.extend(topk_indices(row, k));
        }
        let vals = self.gather_cols(a, &idx, k)?;
        Ok((idx, vals))
    }

    /// `out[r, j] = a[r, idx[r * k + j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let width = last_dim(self.shape(a));
        let av = self.value(a);
        let rows = av.len() / width;
        if idx.len() != rows * k {
            return Err(Error::shape("gather_cols", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(Error::Index {
                op: "gather_cols",
                index: bad,
                bound: width,
            });
        }
        let out: Vec<S> = (0..rows)
            .flat_map(|r| idx[r * k..(r + 1) * k].iter().map(move |&i| av[r * width + i]))
            .collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty shape") = k;
        Ok(self.push(
            shape,
            out,
            &[a],
            Op::GatherCols {
                a,
                width,
                idx: idx.to_vec(),
                k,
            },
        ))
    }

    /// Inverse of [`Tape::gather_cols`]: places `a[r, j]` at column
    /// `idx[r * k + j]` of an `n`-wide zero row.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let k = last_dim(self.shape(a));
        let av = self.value(a);
        let rows = av.len() / k;
        if idx.len() != rows * k {
            return Err(Error::shape("scatter_cols", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "scatter_cols",
                index: bad,
                bound: n,
            });
        }
        let mut out = vec![S::zero(); rows * n];
        for r in 0..rows {
            for j in 0..k {
                out[r * n + idx[r * k + j]] += av[r * k + j];
            }
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        Ok(self.push(
            shape,
            out,
            &[a],
            Op::ScatterCols {
                a,
                n,
                idx: idx.to_vec(),
                k,
            },
        ))
    }

    /// Selects rows of a matrix viewed as `[rows, last]`; also serves as the
    /// embedding lookup.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let width = last_dim(self.shape(a));
        let av = self.value(a);
        let bound = av.len() / width;
        if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound,
            });
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&av[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            vec![rows.len(), width],
            out,
            &[a],
            Op::GatherRows {
                a,
                width,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::dim("permute_0213", format!("expected rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213(self.value(a), dims);
        Ok(self.push(vec![dims[0], dims[2], dims[1], dims[3]], out, &[a], Op::Permute0213 { a, dims }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, &[a], Op::Reshape { a }))
    }

    /// Mean over all leading rows: `[.., W] -> [W]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let width = last_dim(self.shape(a));
        let av = self.value(a);
        let rows = av.len() / width;
        let mut out = vec![S::zero(); width];
        for row in av.chunks_exact(width) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let d = S::from_usize_lossy(rows);
        out.iter_mut().for_each(|o| *o /= d);
        self.push(vec![width], out, &[a], Op::MeanRows { a, rows, width })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<S>();
        self.push(vec![1], vec![s], &[a], Op::Sum { a })
    }

    /// `Σ coeffs[i] · a[i]` with constant coefficients.
    pub fn dot_const(&mut self, a: Var, coeffs: &[S]) -> Result<Var> {
        if coeffs.len() != self.value(a).len() {
            return Err(Error::shape("dot_const", self.shape(a), &[coeffs.len()]));
        }
        let s = self.value(a).iter().zip(coeffs).map(|(&x, &c)| x * c).sum::<S>();
        Ok(self.push(
            vec![1],
            vec![s],
            &[a],
            Op::DotConst {
                a,
                coeffs: coeffs.to_vec(),
            },
        ))
    }

    /// Weighted recombination of row-blocks. With `y_j = parts[p][q]` for
    /// `(p, q) = slots[r * k + j]`, row `r` is
    /// `y_0 + Σ_{j≥1} weights[r, j] · (y_j − y_0)`, summed in `j` order.
    /// For weights on the simplex this is `Σ_j weights[r, j] · y_j`, and it
    /// returns `y_0` bit for bit whenever all `y_j` coincide.
    pub fn combine(&mut self, parts: &[Var], slots: &[(usize, usize)], weights: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || slots.len() != ws[0] * ws[1] {
            return Err(Error::shape("combine", &ws, &[slots.len()]));
        }
        let (rows, k) = (ws[0], ws[1]);
        let width = match parts.first() {
            Some(&p) => last_dim(self.shape(p)),
            None => return Err(Error::dim("combine", "no parts")),
        };
        for &p in parts {
            if last_dim(self.shape(p)) != width {
                return Err(Error::shape("combine", self.shape(parts[0]), self.shape(p)));
            }
        }
        for &(p, q) in slots {
            let bound = parts.get(p).map(|&v| self.value(v).len() / width);
            match bound {
                Some(b) if q < b => {}
                Some(b) => {
                    return Err(Error::Index {
                        op: "combine",
                        index: q,
                        bound: b,
                    })
                }
                None => {
                    return Err(Error::Index {
                        op: "combine",
                        index: p,
                        bound: parts.len(),
                    })
                }
            }
        }
        let mut out = vec![S::zero(); rows * width];
        let wv = self.value(weights);
        let row = |j: usize, r: usize| {
            let (p, q) = slots[r * k + j];
            &self.nodes[parts[p].0].value[q * width..(q + 1) * width]
        };
        for r in 0..rows {
            let acc = &mut out[r * width..(r + 1) * width];
            let anchor = row(0, r);
            acc.copy_from_slice(anchor);
            for j in 1..k {
                let w = wv[r * k + j];
                for ((o, &y), &y0) in acc.iter_mut().zip(row(j, r)).zip(anchor) {
                    *o += w * (y - y0);
                }
            }
        }
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        Ok(self.push(
            vec![rows, width],
            out,
            &inputs,
            Op::Combine {
                parts: parts.to_vec(),
                slots: slots.to_vec(),
                weights,
                k,
                width,
            },
        ))
    }

    /// Gradient of the last backward sweeps with respect to `v`, if any
    /// reached it. Accumulates across calls until [`Tape::zero_grads`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds leaf gradients into the bound store tensors that require them.
    pub fn accumulate_grads(&self, store: &mut ParamStore<S>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, grad) {
                let t = store.get_mut(*id);
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are retained and
    /// accumulate across repeated calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            match self.grads[i].as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                None => self.grads[i] = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.as_slice();
        // Runs `f` on the gradient buffer of `v` if it participates.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let n = &nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul {
                a,
                b,
                rows,
                k,
                n,
                b_layout,
            } => {
                let (rows, k, n) = (*rows, *k, *n);
                with(*a, &mut |ga| {
                    // ga[R,K] += g[R,N] · bᵀ
                    let bl = match b_layout {
                        Layout::Normal => Layout::Transposed,
                        Layout::Transposed => Layout::Normal,
                    };
                    S::gemm(rows, n, k, g, Layout::Normal, val(*b), bl, ga, true);
                });
                with(*b, &mut |gb| match b_layout {
                    // gb[K,N] += aᵀ · g
                    Layout::Normal => S::gemm(k, rows, n, val(*a), Layout::Transposed, g, Layout::Normal, gb, true),
                    // gb[N,K] += gᵀ · a
                    Layout::Transposed => {
                        S::gemm(n, rows, k, g, Layout::Transposed, val(*a), Layout::Normal, gb, true)
                    }
                });
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                b_layout,
            } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let (sa, sb, so) = (m * k, k * n, m * n);
                with(*a, &mut |ga| {
                    let bl = match b_layout {
                        Layout::Normal => Layout::Transposed,
                        Layout::Transposed => Layout::Normal,
                    };
                    for q in 0..groups {
                        S::gemm(
                            m,
                            n,
                            k,
                            &g[q * so..(q + 1) * so],
                            Layout::Normal,
                            &val(*b)[q * sb..(q + 1) * sb],
                            bl,
                            &mut ga[q * sa..(q + 1) * sa],
                            true,
                        );
                    }
                });
                with(*b, &mut |gb| {
                    for q in 0..groups {
                        let gq = &g[q * so..(q + 1) * so];
                        let aq = &val(*a)[q * sa..(q + 1) * sa];
                        let out = &mut gb[q * sb..(q + 1) * sb];
                        match b_layout {
                            Layout::Normal => S::gemm(k, m, n, aq, Layout::Transposed, gq, Layout::Normal, out, true),
                            Layout::Transposed => {
                                S::gemm(n, m, k, gq, Layout::Transposed, aq, Layout::Normal, out, true)
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                with(*a, &mut |ga| add_assign(ga, g));
                with(*b, &mut |gb| add_assign(gb, g));
            }
            Op::AddSuffix { a, b } => {
                with(*a, &mut |ga| add_assign(ga, g));
                with(*b, &mut |gb| {
                    let w = gb.len();
                    for row in g.chunks_exact(w) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::Scale { a, c } => {
                with(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c));
            }
            Op::Gelu { a, gate } => {
                with(*a, &mut |ga| {
                    for (((d, &x), &s), &gx) in ga.iter_mut().zip(val(*a)).zip(gate).zip(g) {
                        *d += gx * gelu_grad(x, s);
                    }
                });
            }
            Op::CausalSoftmax { a, t, scale } => {
                let (t, y) = (*t, &node.value);
                with(*a, &mut |ga| {
                    for ((db, yb), gb) in ga.chunks_exact_mut(t * t).zip(y.chunks_exact(t * t)).zip(g.chunks_exact(t * t)) {
                        for i in 0..t {
                            let r = i * t..i * t + i + 1;
                            let (yr, gr) = (&yb[r.clone()], &gb[r.clone()]);
                            let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<S>();
                            for ((d, &p), &q) in db[r].iter_mut().zip(yr).zip(gr) {
                                *d += *scale * p * (q - dot);
                            }
                        }
                    }
                });
            }
            Op::Softmax { a, width } => {
                let y = &node.value;
                with(*a, &mut |ga| {
                    for ((dr, yr), gr) in ga.chunks_exact_mut(*width).zip(y.chunks_exact(*width)).zip(g.chunks_exact(*width)) {
                        let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<S>();
                        for c in 0..*width {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CausalMask { a, t } => {
                let t = *t;
                with(*a, &mut |ga| {
                    for (db, gb) in ga.chunks_exact_mut(t * t).zip(g.chunks_exact(t * t)) {
                        for i in 0..t {
                            for j in 0..=i {
                                db[i * t + j] += gb[i * t + j];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                xhat,
                rstd,
            } => {
                let w = *width;
                let gv = val(*gamma);
                with(*x, &mut |gx| {
                    let wd = S::from_usize_lossy(w);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let hr = &xhat[r * w..(r + 1) * w];
                        let mut sum_d = S::zero();
                        let mut sum_dh = S::zero();
                        for c in 0..w {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dh += d * hr[c];
                        }
                        let out = &mut gx[r * w..(r + 1) * w];
                        for c in 0..w {
                            let d = gr[c] * gv[c];
                            out[c] += rs / wd * (wd * d - sum_d - hr[c] * sum_dh);
                        }
                    }
                });
                with(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                        for c in 0..w {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                with(*beta, &mut |gb| {
                    for gr in g.chunks_exact(w) {
                        add_assign(gb, gr);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                width,
                targets,
                probs,
            } => {
                let scale = g[0] / S::from_usize_lossy(targets.len());
                with(*logits, &mut |gl| {
                    for (r, (dr, pr)) in gl.chunks_exact_mut(*width).zip(probs.chunks_exact(*width)).enumerate() {
                        for c in 0..*width {
                            dr[c] += pr[c] * scale;
                        }
                        dr[targets[r]] -= scale;
                    }
                });
            }
            Op::SliceCols { a, width, offset, n } => {
                with(*a, &mut |ga| {
                    for (dr, gr) in ga.chunks_exact_mut(*width).zip(g.chunks_exact(*n)) {
                        add_assign(&mut dr[*offset..*offset + *n], gr);
                    }
                });
            }
            Op::GatherCols { a, width, idx, k } => {
                with(*a, &mut |ga| {
                    for (r, gr) in g.chunks_exact(*k).enumerate() {
                        for j in 0..*k {
                            ga[r * width + idx[r * k + j]] += gr[j];
                        }
                    }
                });
            }
            Op::ScatterCols { a, n, idx, k } => {
                with(*a, &mut |ga| {
                    for (r, gr) in g.chunks_exact(*n).enumerate() {
                        for j in 0..*k {
                            ga[r * k + j] += gr[idx[r * k + j]];
                        }
                    }
                });
            }
            Op::GatherRows { a, width, rows } => {
                with(*a, &mut |ga| {
                    for (gr, &r) in g.chunks_exact(*width).zip(rows) {
                        add_assign(&mut ga[r * width..(r + 1) * width], gr);
                    }
                });
            }
            Op::Permute0213 { a, dims } => {
                let [d0, d1, d2, d3] = *dims;
                with(*a, &mut |ga| {
                    // Output layout is [d0, d2, d1, d3]; permuting it again maps back.
                    let back = permute_0213(g, [d0, d2, d1, d3]);
                    add_assign(ga, &back);
                });
            }
            Op::Reshape { a } => with(*a, &mut |ga| add_assign(ga, g)),
            Op::MeanRows { a, rows, width } => {
                let d = S::from_usize_lossy(*rows);
                with(*a, &mut |ga| {
                    for dr in ga.chunks_exact_mut(*width) {
                        dr.iter_mut().zip(g).for_each(|(o, &x)| *o += x / d);
                    }
                });
            }
            Op::Sum { a } => with(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::DotConst { a, coeffs } => {
                with(*a, &mut |ga| ga.iter_mut().zip(coeffs).for_each(|(d, &c)| *d += g[0] * c));
            }
            Op::Combine {
                parts,
                slots,
                weights,
                k,
                width,
            } => {
                let (k, w) = (*k, *width);
                let wv = val(*weights);
                let rows = slots.len() / k;
                // Coefficient of y_j in the output row: 1 − Σ_{j≥1} w_j for
                // the anchor, w_j otherwise.
                let coeff = |r: usize, j: usize| {
                    if j == 0 {
                        S::one() - (1..k).map(|i| wv[r * k + i]).sum::<S>()
                    } else {
                        wv[r * k + j]
                    }
                };
                for (pi, &p) in parts.iter().enumerate() {
                    with(p, &mut |gp| {
                        for r in 0..rows {
                            for j in 0..k {
                                let (sp, q) = slots[r * k + j];
                                if sp != pi {
                                    continue;
                                }
                                let c = coeff(r, j);
                                let dst = &mut gp[q * w..(q + 1) * w];
                                dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, &x)| *d += c * x);
                            }
                        }
                    });
                }
                let row = |r: usize, j: usize| {
                    let (p, q) = slots[r * k + j];
                    &nodes[parts[p].0].value[q * w..(q + 1) * w]
                };
                with(*weights, &mut |gw| {
                    for r in 0..rows {
                        let y0 = row(r, 0);
                        for j in 1..k {
                            gw[r * k + j] += row(r, j)
                                .iter()
                                .zip(y0)
                                .zip(&g[r * w..(r + 1) * w])
                                .map(|((&y, &a), &x)| (y - a) * x)
                                .sum::<S>();
                        }
                    }
                });
            }
        }
    }
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Indices of the `k` largest entries, descending, lowest index on ties.
pub fn topk_indices<S: Scalar>(row: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // Stable sort keeps ascending index order among equal values.
    order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order
}

fn permute_0213<S: Scalar>(x: &[S], [d0, d1, d2, d3]: [usize; 4]) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let src = ((a * d1 + b) * d2 + c) * d3;
                let dst = ((a * d2 + c) * d1 + b) * d3;
                out[dst..dst + d3].copy_from_slice(&x[src..src + d3]);
            }
        }
    }
    out
}
