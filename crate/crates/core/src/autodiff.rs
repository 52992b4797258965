//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for its local gradient rule. Nodes are appended in forward
//! order, so walking the tape backwards from the loss is a valid reverse
//! topological order.
//!
//! Leaves are created either with [`Tape::param`] (gradients wanted) or
//! [`Tape::constant`]. A node only requires a gradient if one of its inputs
//! does, which lets frozen weights skip their weight-gradient products.

use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, StridedMut, StridedRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    MatMulNT {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    MulElem {
        a: usize,
        b: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    SoftmaxRows {
        x: usize,
    },
    Silu {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
        mean: bool,
    },
    Sum {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    ReplaceRows {
        x: usize,
        rows: Vec<usize>,
        src: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].value.shape().to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].requires_grad)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(format!(
                "variable belongs to tape {} but was used on tape {}",
                v.tape, self.id
            )));
        }
        if v.index >= self.nodes.borrow().len() {
            return Err(Error::Tape(format!("unknown node {}", v.index)));
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        let nodes = self.nodes();
        inputs.iter().any(|&i| nodes[i].requires_grad)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let (m, k) = matrix_dims(ta, "matmul")?;
            let (k2, n) = matrix_dims(tb, "matmul")?;
            if k != k2 {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                ta.data(),
                false,
                tb.data(),
                false,
                0.0,
                &mut out,
            );
            Tensor::matrix(m, n, out)?
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::MatMul { a: ia, b: ib }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`. This is how `x·Wᵀ` is formed for a
    /// weight stored as `out×in`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let (m, k) = matrix_dims(ta, "matmul_nt")?;
            let (n, k2) = matrix_dims(tb, "matmul_nt")?;
            if k != k2 {
                return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                ta.data(),
                false,
                tb.data(),
                true,
                0.0,
                &mut out,
            );
            Tensor::matrix(m, n, out)?
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::MatMulNT { a: ia, b: ib }, rg))
    }

    /// Elementwise sum. A rank-1 right operand whose length equals the last
    /// dimension of a matrix left operand is broadcast over its rows; no
    /// other broadcasting is accepted.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (value, op) = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.shape() == tb.shape() {
                (ta.zip_map(tb, |x, y| x + y)?, Op::Add { a: ia, b: ib })
            } else if let ([_, c], [n]) = (ta.shape(), tb.shape()) {
                if c != n {
                    return Err(Error::shape("add", ta.shape(), tb.shape()));
                }
                let bias = tb.data();
                let mut out = ta.data().to_vec();
                for row in out.chunks_mut(*c) {
                    for (o, b) in row.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                (
                    Tensor::new(ta.shape().to_vec(), out)?,
                    Op::AddBias { a: ia, bias: ib },
                )
            } else {
                return Err(Error::shape("add", ta.shape(), tb.shape()));
            }
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, op, rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.shape() != tb.shape() {
                return Err(Error::shape("sub", ta.shape(), tb.shape()));
            }
            ta.zip_map(tb, |x, y| x - y)?
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::Sub { a: ia, b: ib }, rg))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes()[ia].value.map(|x| x * c);
        let rg = self.grad_flag(&[ia]);
        Ok(self.push(value, Op::Scale { a: ia, c }, rg))
    }

    pub fn mul_elem(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            if ta.shape() != tb.shape() {
                return Err(Error::shape("mul_elem", ta.shape(), tb.shape()));
            }
            ta.zip_map(tb, |x, y| x * y)?
        };
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::MulElem { a: ia, b: ib }, rg))
    }

    /// Each row divided by `sqrt(mean(x²) + eps)` and multiplied by `gain`.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(gain)?);
        if !(eps >= 0.0) {
            return Err(Error::Config(format!(
                "rms_norm eps must be >= 0, got {eps}"
            )));
        }
        let (value, inv_rms) = {
            let nodes = self.nodes();
            let (tx, tg) = (&nodes[ix].value, &nodes[ig].value);
            let (rows, d) = tx.dims2()?;
            if tg.shape() != [d] {
                return Err(Error::shape("rms_norm", tx.shape(), tg.shape()));
            }
            let g = tg.data();
            let mut out = vec![0.0; rows * d];
            let mut inv = Vec::with_capacity(rows);
            for (xr, or) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let r = 1.0 / (ms + eps).sqrt();
                for ((o, &xv), &gv) in or.iter_mut().zip(xr).zip(g) {
                    *o = xv * r * gv;
                }
                inv.push(r);
            }
            (Tensor::new(tx.shape().to_vec(), out)?, inv)
        };
        let rg = self.grad_flag(&[ix, ig]);
        Ok(self.push(
            value,
            Op::RmsNorm {
                x: ix,
                gain: ig,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let tx = &nodes[ix].value;
            let (_, d) = tx.dims2()?;
            let mut out = tx.data().to_vec();
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
            Tensor::new(tx.shape().to_vec(), out)?
        };
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, Op::SoftmaxRows { x: ix }, rg))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = self.nodes()[ix].value.map(|v| v * sigmoid(v));
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, Op::Silu { x: ix }, rg))
    }

    /// Rows of `table` selected by `ids`, producing `len(ids)×d`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        if ids.is_empty() {
            return Err(Error::Config("embedding lookup of an empty id list".into()));
        }
        let value = {
            let nodes = self.nodes();
            let tt = &nodes[it].value;
            let (vocab, d) = matrix_dims(tt, "embedding")?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Index {
                        what: "token id",
                        index: id,
                        bound: vocab,
                    });
                }
                out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            Tensor::matrix(ids.len(), d, out)?
        };
        let rg = self.grad_flag(&[it]);
        Ok(self.push(
            value,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, true)
    }

    /// Summed (not averaged) negative log-likelihood.
    pub fn cross_entropy_sum(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, false)
    }

    fn cross_entropy_impl(&self, logits: Var, targets: &[usize], mean: bool) -> Result<Var> {
        let il = self.check(logits)?;
        let (value, probs) = {
            let nodes = self.nodes();
            let tl = &nodes[il].value;
            let (rows, vocab) = tl.dims2()?;
            if rows != targets.len() || rows == 0 {
                return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
            }
            let mut probs = tl.data().to_vec();
            let mut total = 0.0;
            for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
                if t >= vocab {
                    return Err(Error::Index {
                        what: "target id",
                        index: t,
                        bound: vocab,
                    });
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|z| (z - max).exp()).sum();
                total += (max - row[t]) + s.ln();
                softmax_in_place(row);
            }
            if mean {
                total /= rows as f64;
            }
            (Tensor::scalar(total), probs)
        };
        let rg = self.grad_flag(&[il]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                mean,
            },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let value = Tensor::scalar(self.nodes()[ix].value.sum());
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(value, Op::Sum { x: ix }, rg))
    }

    /// Multi-head causal self-attention over one sequence. `q`, `k`, `v`
    /// are `T×d` with heads laid out as contiguous column blocks of width
    /// `d / heads`; position `t` attends to positions `0..=t`.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q)?, self.check(k)?, self.check(v)?);
        let (value, probs) = {
            let nodes = self.nodes();
            let (tq, tk, tv) = (&nodes[iq].value, &nodes[ik].value, &nodes[iv].value);
            let (t, d) = matrix_dims(tq, "attention")?;
            if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
                return Err(Error::shape("attention", tq.shape(), tk.shape()));
            }
            if heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!(
                    "{heads} heads do not divide width {d}"
                )));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = vec![0.0; heads * t * t];
            let mut out = vec![0.0; t * d];
            for (h, p) in probs.chunks_mut(t * t).enumerate() {
                let off = h * dh;
                gemm_strided(
                    t,
                    dh,
                    t,
                    scale,
                    StridedRef::new(tq.data(), off, d, 1),
                    StridedRef::new(tk.data(), off, 1, d),
                    0.0,
                    StridedMut::new(p, 0, t, 1),
                );
                for (i, row) in p.chunks_mut(t).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                gemm_strided(
                    t,
                    t,
                    dh,
                    1.0,
                    StridedRef::new(p, 0, t, 1),
                    StridedRef::new(tv.data(), off, d, 1),
                    0.0,
                    StridedMut::new(&mut out, off, d, 1),
                );
            }
            (Tensor::matrix(t, d, out)?, probs)
        };
        let rg = self.grad_flag(&[iq, ik, iv]);
        Ok(self.push(
            value,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let tx = &nodes[ix].value;
            let (n, d) = matrix_dims(tx, "gather_rows")?;
            if rows.is_empty() {
                return Err(Error::Config("gather of zero rows".into()));
            }
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= n {
                    return Err(Error::Index {
                        what: "row",
                        index: r,
                        bound: n,
                    });
                }
                out.extend_from_slice(&tx.data()[r * d..(r + 1) * d]);
            }
            Tensor::matrix(rows.len(), d, out)?
        };
        let rg = self.grad_flag(&[ix]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x: ix,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `x` with row `rows[i]` replaced by row `i` of `src`. Rows must
    /// be distinct.
    pub fn replace_rows(&self, x: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (ix, is) = (self.check(x)?, self.check(src)?);
        let value = {
            let nodes = self.nodes();
            let (tx, ts) = (&nodes[ix].value, &nodes[is].value);
            let (n, d) = matrix_dims(tx, "replace_rows")?;
            if ts.shape() != [rows.len(), d] {
                return Err(Error::shape("replace_rows", tx.shape(), ts.shape()));
            }
            let mut seen = vec![false; n];
            let mut out = tx.data().to_vec();
            for (i, &r) in rows.iter().enumerate() {
                if r >= n {
                    return Err(Error::Index {
                        what: "row",
                        index: r,
                        bound: n,
                    });
                }
                if std::mem::replace(&mut seen[r], true) {
                    return Err(Error::Config(format!("row {r} replaced twice")));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&ts.data()[i * d..(i + 1) * d]);
            }
            Tensor::matrix(n, d, out)?
        };
        let rg = self.grad_flag(&[ix, is]);
        Ok(self.push(
            value,
            Op::ReplaceRows {
                x: ix,
                rows: rows.to_vec(),
                src: is,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every ancestor that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let nodes = self.nodes();
        if !nodes[il].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        if nodes[il].requires_grad {
            grads[il] = Some(Tensor::ones(nodes[il].value.shape()));
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// The gradient of `v`, or zeros shaped like `v` if it was unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        match self.get(v) {
            Some(g) => Ok(g.clone()),
            None => Ok(Tensor::zeros(&tape.shape(v)?)),
        }
    }

    /// Number of nodes that received a gradient.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Tensor>], j: usize) -> Option<&'g mut [f64]> {
    if !nodes[j].requires_grad {
        return None;
    }
    let g = grads[j].get_or_insert_with(|| Tensor::zeros(nodes[j].value.shape()));
    Some(g.data_mut())
}

fn backprop(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, 1.0, gd, false, tb.data(), true, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, 1.0, ta.data(), true, gd, false, 1.0, gb);
            }
        }
        Op::MatMulNT { a, b } => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, 1.0, gd, false, tb.data(), false, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(n, m, k, 1.0, gd, true, ta.data(), false, 1.0, gb);
            }
        }
        Op::Add { a, b } => {
            for j in [*a, *b] {
                if let Some(s) = slot(nodes, grads, j) {
                    s.iter_mut().zip(gd).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::AddBias { a, bias } => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *bias) {
                let n = s.len();
                for row in gd.chunks(n) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(gd).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Scale { a, c } => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(gd).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::MulElem { a, b } => {
            let (ta, tb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), y) in s.iter_mut().zip(gd).zip(tb.data()) {
                    *s += g * y;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, g), x) in s.iter_mut().zip(gd).zip(ta.data()) {
                    *s += g * x;
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (tx, tg) = (&nodes[*x].value, &nodes[*gain].value);
            let d = tg.len();
            let gain_v = tg.data();
            if let Some(s) = slot(nodes, grads, *x) {
                for (((sr, xr), gr), &r) in s
                    .chunks_mut(d)
                    .zip(tx.data().chunks(d))
                    .zip(gd.chunks(d))
                    .zip(inv_rms)
                {
                    let dot: f64 = gr
                        .iter()
                        .zip(gain_v)
                        .zip(xr)
                        .map(|((g, w), x)| g * w * x)
                        .sum();
                    let coef = r * r * r * dot / d as f64;
                    for (((s, &xv), &gv), &w) in sr.iter_mut().zip(xr).zip(gr).zip(gain_v) {
                        *s += r * w * gv - xv * coef;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *gain) {
                for ((xr, gr), &r) in tx.data().chunks(d).zip(gd.chunks(d)).zip(inv_rms) {
                    for ((s, &xv), &gv) in s.iter_mut().zip(xr).zip(gr) {
                        *s += gv * xv * r;
                    }
                }
            }
        }
        Op::SoftmaxRows { x } => {
            let y = &nodes[i].value;
            let (_, d) = y.dims2().expect("softmax output is a matrix or vector");
            if let Some(s) = slot(nodes, grads, *x) {
                for ((sr, yr), gr) in s.chunks_mut(d).zip(y.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((s, &yv), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                        *s += yv * (gv - dot);
                    }
                }
            }
        }
        Op::Silu { x } => {
            let tx = nodes[*x].value.clone();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, &xv), &gv) in s.iter_mut().zip(tx.data()).zip(gd) {
                    let sg = sigmoid(xv);
                    *s += gv * sg * (1.0 + xv * (1.0 - sg));
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.shape()[1];
            if let Some(s) = slot(nodes, grads, *table) {
                for (row, &id) in gd.chunks(d).zip(ids) {
                    s[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            mean,
        } => {
            let rows = targets.len();
            let vocab = probs.len() / rows;
            let mut coef = gd[0];
            if *mean {
                coef /= rows as f64;
            }
            if let Some(s) = slot(nodes, grads, *logits) {
                for ((sr, pr), &t) in s.chunks_mut(vocab).zip(probs.chunks(vocab)).zip(targets) {
                    for (s, &p) in sr.iter_mut().zip(pr) {
                        *s += coef * p;
                    }
                    sr[t] -= coef;
                }
            }
        }
        Op::Sum { x } => {
            let c = gd[0];
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().for_each(|s| *s += c);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (tq, tk, tv) = (
                nodes[*q].value.clone(),
                nodes[*k].value.clone(),
                nodes[*v].value.clone(),
            );
            let (t, d) = (tq.shape()[0], tq.shape()[1]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let need_qk = nodes[*q].requires_grad || nodes[*k].requires_grad;
            let mut dp = vec![0.0; t * t];
            for (h, p) in probs.chunks(t * t).enumerate() {
                let off = h * dh;
                if let Some(gv) = slot(nodes, grads, *v) {
                    gemm_strided(
                        t,
                        t,
                        dh,
                        1.0,
                        StridedRef::new(p, 0, 1, t),
                        StridedRef::new(gd, off, d, 1),
                        1.0,
                        StridedMut::new(gv, off, d, 1),
                    );
                }
                if !need_qk {
                    continue;
                }
                gemm_strided(
                    t,
                    dh,
                    t,
                    1.0,
                    StridedRef::new(gd, off, d, 1),
                    StridedRef::new(tv.data(), off, 1, d),
                    0.0,
                    StridedMut::new(&mut dp, 0, t, 1),
                );
                for (i, (dr, pr)) in dp.chunks_mut(t).zip(p.chunks(t)).enumerate() {
                    let dot: f64 = dr[..=i].iter().zip(&pr[..=i]).map(|(a, b)| a * b).sum();
                    for (dv, &pv) in dr[..=i].iter_mut().zip(&pr[..=i]) {
                        *dv = pv * (*dv - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                if let Some(gq) = slot(nodes, grads, *q) {
                    gemm_strided(
                        t,
                        t,
                        dh,
                        scale,
                        StridedRef::new(&dp, 0, t, 1),
                        StridedRef::new(tk.data(), off, d, 1),
                        1.0,
                        StridedMut::new(gq, off, d, 1),
                    );
                }
                if let Some(gk) = slot(nodes, grads, *k) {
                    gemm_strided(
                        t,
                        t,
                        dh,
                        scale,
                        StridedRef::new(&dp, 0, 1, t),
                        StridedRef::new(tq.data(), off, d, 1),
                        1.0,
                        StridedMut::new(gk, off, d, 1),
                    );
                }
            }
        }
        Op::GatherRows { x, rows } => {
            let d = nodes[*x].value.shape()[1];
            if let Some(s) = slot(nodes, grads, *x) {
                for (row, &r) in gd.chunks(d).zip(rows) {
                    s[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::ReplaceRows { x, rows, src } => {
            let d = nodes[*x].value.shape()[1];
            if let Some(s) = slot(nodes, grads, *x) {
                let mut masked = gd.to_vec();
                for &r in rows {
                    masked[r * d..(r + 1) * d].fill(0.0);
                }
                s.iter_mut().zip(&masked).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *src) {
                for (sr, &r) in s.chunks_mut(d).zip(rows) {
                    sr.iter_mut()
                        .zip(&gd[r * d..(r + 1) * d])
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
    }
}
