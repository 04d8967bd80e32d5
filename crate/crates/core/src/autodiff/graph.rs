use std::collections::HashMap;

use super::kernels;
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{PmpError, Result};

/// Fill value for attention scores above the causal diagonal. Finite so that
/// tensors stay finite; `exp` of it underflows to exactly zero after max
/// subtraction.
pub const MASKED_SCORE: f64 = -1e9;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Sum {
        a: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    Silu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    CausalMask {
        x: usize,
        q_len: usize,
    },
    Rope {
        x: usize,
        theta: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of the registered parameters, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar = f32> {
    entries: Vec<(String, Tensor<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tape recording one forward pass.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so backward is a single reverse sweep. A graph supports one
/// `backward` call per recorded forward pass; call [`Graph::clear`] before
/// recording the next one.
#[derive(Debug)]
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, usize>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank(op: &'static str, shape: &[usize], min: usize) -> Result<()> {
    if shape.len() < min {
        return Err(PmpError::dim(op, shape, &[]));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn f64s(&self, i: usize) -> Vec<f64> {
        self.nodes[i].value.to_f64()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(PmpError::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_f64(&mut self, shape: Vec<usize>, data: &[f64], op: Op, rg: bool) -> Result<Var> {
        let t = Tensor::from_parts(shape, data.iter().map(|&x| S::narrow(x)).collect());
        self.push(t, op, rg)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<S>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf reported by [`Graph::backward`] under `name`.
    pub fn param(&mut self, name: &str, t: Tensor<S>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(PmpError::State(format!("parameter {name} registered twice")));
        }
        let v = self.push(t, Op::Leaf, true)?;
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    /// Matrix product over the last two axes. `b` is either a matrix shared by
    /// every leading index of `a`, or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(PmpError::dim("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(PmpError::dim("matmul", &sa, &sb));
        }
        let n = sb[sb.len() - 1];
        let (batch, m, b_batched) = if sb.len() == 2 {
            (1, numel(&sa[..sa.len() - 1]), false)
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(PmpError::dim("matmul", &sa, &sb));
            }
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2], true)
        };
        let av = self.f64s(a.0);
        let bv = self.f64s(b.0);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let bs = if b_batched { &bv[bi * k * n..(bi + 1) * k * n] } else { &bv[..] };
            kernels::matmul(
                &av[bi * m * k..(bi + 1) * m * k],
                bs,
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push_f64(
            shape,
            &out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            rg,
        )
    }

    /// Elementwise sum. `b` may match a trailing suffix of `a`'s shape, in
    /// which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(PmpError::dim("add", &sa, &sb));
        }
        let av = self.f64s(a.0);
        let bv = self.f64s(b.0);
        let nb = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push_f64(sa, &out, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(PmpError::dim("mul", &sa, &sb));
        }
        let av = self.f64s(a.0);
        let bv = self.f64s(b.0);
        let out: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push_f64(sa, &out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.f64s(a.0).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0);
        self.push_f64(shape, &out, Op::Scale { a: a.0, c }, rg)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.f64s(a.0).iter().sum();
        let rg = self.rg(a.0);
        self.push_f64(Vec::new(), &[s], Op::Sum { a: a.0 }, rg)
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.is_empty() {
            return Err(PmpError::dim("embedding", &st, &[ids.len()]));
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(PmpError::Data(format!(
                "token id {id} at position {pos} outside vocabulary of {vocab}"
            )));
        }
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(table.0);
        self.push(
            Tensor::from_parts(vec![ids.len(), dim], out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// RMS normalisation over the last axis followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gain).to_vec();
        check_rank("rms_norm", &sx, 1)?;
        let dim = sx[sx.len() - 1];
        if sg != [dim] {
            return Err(PmpError::dim("rms_norm", &sx, &sg));
        }
        let xv = self.f64s(x.0);
        let gv = self.f64s(gain.0);
        let rows = xv.len() / dim;
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / dim as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..dim {
                out[r * dim + j] = row[j] * inv * gv[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0);
        self.push_f64(
            sx,
            &out,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                inv_rms,
            },
            rg,
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_rank("softmax", &sx, 1)?;
        let dim = sx[sx.len() - 1];
        let xv = self.f64s(x.0);
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(dim).zip(out.chunks_mut(dim)) {
            softmax_row(row, o);
        }
        let rg = self.rg(x.0);
        self.push_f64(sx, &out, Op::Softmax { x: x.0 }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.f64s(x.0).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push_f64(shape, &out, Op::Silu { x: x.0 }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .f64s(x.0)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + gelu_inner(v).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push_f64(shape, &out, Op::Gelu { x: x.0 }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if numel(shape) != numel(&sx) || shape.iter().any(|&d| d == 0) {
            return Err(PmpError::dim("reshape", &sx, shape));
        }
        let data = self.nodes[x.0].value.data().to_vec();
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape { x: x.0 },
            rg,
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(PmpError::dim("permute", &sx, axes));
        }
        let data = kernels::permute(self.nodes[x.0].value.data(), &sx, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
            rg,
        )
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(PmpError::dim("transpose", self.shape(x), &[a, b]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(PmpError::Argument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(PmpError::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(PmpError::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(v.0));
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
            rg,
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start >= end || end > sx[axis] {
            return Err(PmpError::dim("slice", &sx, &[axis, start, end]));
        }
        let outer = numel(&sx[..axis]);
        let inner = numel(&sx[axis + 1..]);
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * sx[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = sx;
        shape[axis] = end - start;
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x: x.0,
                axis,
                start,
                end,
            },
            rg,
        )
    }

    /// Replaces scores above the causal diagonal by [`MASKED_SCORE`]. `x` has
    /// shape `[..., rows, keys]`; row `r` belongs to query position
    /// `r % q_len`, which lets several query groups share one key axis.
    pub fn causal_mask_fill(&mut self, x: Var, q_len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_rank("causal_mask_fill", &sx, 2)?;
        let rows = sx[sx.len() - 2];
        let keys = sx[sx.len() - 1];
        if q_len == 0 || rows % q_len != 0 {
            return Err(PmpError::dim("causal_mask_fill", &sx, &[q_len]));
        }
        let mut out = self.nodes[x.0].value.data().to_vec();
        let masked = S::narrow(MASKED_SCORE);
        for (r, row) in out.chunks_mut(keys).enumerate() {
            let pos = (r % rows) % q_len;
            for v in row.iter_mut().skip(pos + 1) {
                *v = masked;
            }
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(sx, out),
            Op::CausalMask { x: x.0, q_len },
            rg,
        )
    }

    /// Rotary position embedding on `[..., positions, heads, head_dim]`,
    /// rotating the pairs `(i, i + head_dim/2)` by `pos · theta^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, theta: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        check_rank("rope", &sx, 3)?;
        let hd = sx[sx.len() - 1];
        if hd % 2 != 0 {
            return Err(PmpError::dim("rope", &sx, &[hd]));
        }
        let out = rope_apply(&self.f64s(x.0), &sx, theta, 1.0);
        let rg = self.rg(x.0);
        self.push_f64(sx, &out, Op::Rope { x: x.0, theta }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, classes]`).
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(PmpError::dim("cross_entropy_mean", &sl, &[targets.len()]));
        }
        let classes = sl[1];
        if let Some((pos, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= classes) {
            return Err(PmpError::Data(format!(
                "target {t} at position {pos} outside {classes} classes"
            )));
        }
        let lv = self.f64s(logits.0);
        let mut total = 0.0;
        for (row, &t) in lv.chunks(classes).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits.0);
        self.push_f64(
            Vec::new(),
            &[loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `loss`, returning one gradient per
    /// registered parameter (zeros where the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.backward_done {
            return Err(PmpError::State(
                "backward already ran on this forward pass; record a new one first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(PmpError::dim("backward", self.shape(loss), &[]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads: HashMap<usize, Vec<f64>> = HashMap::new();
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.nodes[i].param.is_some() {
                param_grads.insert(i, g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut ordered: Vec<(usize, String)> =
            self.params.iter().map(|(n, &i)| (i, n.clone())).collect();
        ordered.sort();
        let mut entries = Vec::with_capacity(ordered.len());
        let mut index = HashMap::new();
        for (i, name) in ordered {
            let shape = self.nodes[i].value.shape().to_vec();
            let t = match param_grads.remove(&i) {
                Some(g) => Tensor::from_parts(shape, g.iter().map(|&x| S::narrow(x)).collect()),
                None => Tensor::zeros(shape),
            };
            index.insert(name.clone(), entries.len());
            entries.push((name, t));
        }
        Ok(Gradients { entries, index })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let av = self.f64s(a);
                let bv = self.f64s(b);
                if self.rg(a) {
                    let mut da = vec![0.0; av.len()];
                    let shared_bt = (!b_batched).then(|| kernels::transpose(&bv, k, n));
                    for bi in 0..batch {
                        let local;
                        let bt = match &shared_bt {
                            Some(t) => t,
                            None => {
                                local = kernels::transpose(&bv[bi * k * n..(bi + 1) * k * n], k, n);
                                &local
                            }
                        };
                        kernels::matmul(
                            &g[bi * m * n..(bi + 1) * m * n],
                            bt,
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    accumulate(grads, a, da);
                }
                if self.rg(b) {
                    if b_batched {
                        let mut db = vec![0.0; bv.len()];
                        for bi in 0..batch {
                            let at = kernels::transpose(&av[bi * m * k..(bi + 1) * m * k], m, k);
                            kernels::matmul(
                                &at,
                                &g[bi * m * n..(bi + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                        accumulate(grads, b, db);
                    } else {
                        let at = kernels::transpose(&av, m, k);
                        let mut db = vec![0.0; k * n];
                        kernels::matmul(&at, g, k, m, n, &mut db);
                        accumulate(grads, b, db);
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if self.rg(b) {
                    let nb = self.nodes[b].value.numel();
                    let mut db = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let bv = self.f64s(b);
                    accumulate(grads, a, g.iter().zip(&bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(b) {
                    let av = self.f64s(a);
                    accumulate(grads, b, g.iter().zip(&av).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale { a, c } => accumulate(grads, a, g.iter().map(|x| c * x).collect()),
            &Op::Sum { a } => {
                let n = self.nodes[a].value.numel();
                accumulate(grads, a, vec![g[0]; n]);
            }
            Op::Embedding { table, ids } => {
                let st = self.nodes[*table].value.shape();
                let dim = st[1];
                let mut dt = vec![0.0; st[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        dt[id * dim + j] += g[r * dim + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.f64s(*x);
                let gv = self.f64s(*gain);
                let dim = gv.len();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; dim];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xv[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let mut dot = 0.0;
                    for j in 0..dim {
                        let xhat = row[j] * inv;
                        dgain[j] += gr[j] * xhat;
                        dot += gr[j] * gv[j] * xhat;
                    }
                    let mean = dot / dim as f64;
                    for j in 0..dim {
                        let xhat = row[j] * inv;
                        dx[r * dim + j] = inv * (gr[j] * gv[j] - xhat * mean);
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gain) {
                    accumulate(grads, *gain, dgain);
                }
            }
            &Op::Softmax { x } => {
                let y = node.value.to_f64();
                let dim = node.value.shape()[node.value.shape().len() - 1];
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / dim {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dim {
                        dx[r * dim + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Silu { x } => {
                let xv = self.f64s(x);
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let s = sigmoid(v);
                        gi * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::Gelu { x } => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let xv = self.f64s(x);
                let dx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let t = gelu_inner(v).tanh();
                        let du = c * (1.0 + 3.0 * 0.044715 * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => accumulate(grads, x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                accumulate(grads, *x, kernels::permute(g, node.value.shape(), &inverse));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp].value.shape()[*axis] * inner;
                    if self.rg(inp) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, inp, d);
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                let sx = self.nodes[x].value.shape();
                let outer = numel(&sx[..axis]);
                let inner = numel(&sx[axis + 1..]);
                let mut dx = vec![0.0; numel(sx)];
                let width = (end - start) * inner;
                for o in 0..outer {
                    let base = o * sx[axis] * inner + start * inner;
                    dx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                accumulate(grads, x, dx);
            }
            &Op::CausalMask { x, q_len } => {
                let shape = node.value.shape();
                let rows = shape[shape.len() - 2];
                let keys = shape[shape.len() - 1];
                let mut dx = g.to_vec();
                for (r, row) in dx.chunks_mut(keys).enumerate() {
                    let pos = (r % rows) % q_len;
                    for v in row.iter_mut().skip(pos + 1) {
                        *v = 0.0;
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Rope { x, theta } => {
                accumulate(grads, x, rope_apply(g, node.value.shape(), theta, -1.0));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.f64s(*logits);
                let classes = lv.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut dl = vec![0.0; lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv[r * classes..(r + 1) * classes];
                    let out = &mut dl[r * classes..(r + 1) * classes];
                    softmax_row(row, out);
                    out[t] -= 1.0;
                    for v in out.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::Embedding { .. } => "embedding",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Softmax { .. } => "softmax",
        Op::Silu { .. } => "silu",
        Op::Gelu { .. } => "gelu",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::CausalMask { .. } => "causal_mask_fill",
        Op::Rope { .. } => "rope",
        Op::CrossEntropy { .. } => "cross_entropy_mean",
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gelu_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Rotates `x` by `sign` times the rotary angles. `sign = -1` is the inverse
/// (and the transpose) of `sign = 1`.
fn rope_apply(x: &[f64], shape: &[usize], theta: f64, sign: f64) -> Vec<f64> {
    let rank = shape.len();
    let hd = shape[rank - 1];
    let heads = shape[rank - 2];
    let positions = shape[rank - 3];
    let half = hd / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / hd as f64))
        .collect();
    let mut out = vec![0.0; x.len()];
    for (v, chunk) in x.chunks(hd).enumerate() {
        let pos = (v / heads) % positions;
        let o = &mut out[v * hd..(v + 1) * hd];
        for i in 0..half {
            let angle = pos as f64 * freqs[i];
            let (s, c) = (sign * angle).sin_cos();
            let (a, b) = (chunk[i], chunk[i + half]);
            o[i] = a * c - b * s;
            o[i + half] = a * s + b * c;
        }
    }
    out
}
