//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node in creation order. Leaves are
//! either parameters (tracked) or constants (never accumulate gradient).
//! [`Tape::backward`] consumes the tape, walks the nodes in reverse exactly
//! once and returns the gradients of the tracked leaves.

use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow {
        x: Var,
        row: Var,
    },
    AddTiled {
        x: Var,
        tile: Var,
    },
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    SelectCols {
        x: Var,
        idx: Vec<usize>,
    },
    PrependRow {
        x: Var,
        row: Var,
        group: usize,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-threaded operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients of the tracked leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a * b`, or `a * b^T` when `b_t` is set.
    pub fn matmul_opt(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            &mut out,
            false,
        );
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, b_t }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    /// `x * w^T + bias` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (n, din) = self.matrix(x, "linear")?;
        let (dout, win) = self.matrix(w, "linear")?;
        if din != win {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![S::zero(); n * dout];
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape("linear bias", bv.shape(), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.tracked(&deps);
        Ok(self.push(Tensor::new(&[n, dout], out)?, Op::Linear { x, w, bias }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Adds one row vector to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.matrix(x, "add_row")?;
        let rv = self.value(row);
        if rv.len() != d {
            return Err(Error::shape("add_row", self.shape(x), rv.shape()));
        }
        let mut out = self.value(x).clone();
        let rd = rv.data().to_vec();
        for r in out.data_mut().chunks_mut(d) {
            r.iter_mut().zip(&rd).for_each(|(o, &b)| *o = *o + b);
        }
        let rg = self.tracked(&[x, row]);
        Ok(self.push(out, Op::AddRow { x, row }, rg))
    }

    /// Adds a `[t, d]` tile to each consecutive block of `t` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (n, d) = self.matrix(x, "add_tiled")?;
        let (t, td) = self.matrix(tile, "add_tiled")?;
        if td != d || n % t != 0 {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(tile)));
        }
        let mut out = self.value(x).clone();
        let tv = self.value(tile).data().to_vec();
        for block in out.data_mut().chunks_mut(t * d) {
            block.iter_mut().zip(&tv).for_each(|(o, &b)| *o = *o + b);
        }
        let rg = self.tracked(&[x, tile]);
        Ok(self.push(out, Op::AddTiled { x, tile }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu(v).0);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax along `axis` (exponent-shifted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).clone();
        softmax_strided(out.data_mut(), outer, len, inner);
        let rg = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix(x, "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = S::lit(LN_EPS);
        let dn = S::lit(d as f64);
        let mut xhat = vec![S::zero(); n * d];
        let mut rstd = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq, dim]`; each block of `seq` rows is
    /// one sequence and attends only within itself.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (n, d) = self.matrix(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || seq == 0 || n % seq != 0 {
            return Err(Error::Config(format!(
                "attention with dim {d}, heads {heads}, rows {n}, seq {seq}"
            )));
        }
        let dh = d / heads;
        let batch = n / seq;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); n * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        let kj = &kv[(b * seq + j) * d + off..][..dh];
                        p[i * seq + j] = dot(qi, kj) * scale;
                    }
                    softmax_strided(&mut p[i * seq..(i + 1) * seq], 1, seq, 1);
                    let oi = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        let w = p[i * seq + j];
                        let vj = &vv[(b * seq + j) * d + off..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + w * x);
                    }
                }
            }
        }
        let rg = self.tracked(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                len: c,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_strided(&mut probs, n, c, 1);
        let lv = self.value(logits).data();
        let mut total = S::zero();
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<S>().ln();
            total = total + (lse - row[labels[i]]);
        }
        let loss = total / S::lit(n as f64);
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let n = S::lit(av.len() as f64);
        let s: S = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / S::lit(v.len() as f64);
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(x, "select_rows")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], out)?,
            Op::SelectRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix(x, "select_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Index {
                what: "column",
                index: bad,
                len: c,
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * idx.len());
        for i in 0..n {
            out.extend(idx.iter().map(|&j| xv[i * c + j]));
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(&[n, idx.len()], out)?,
            Op::SelectCols { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Inserts `row` in front of every consecutive block of `group` rows.
    pub fn prepend_row(&mut self, x: Var, row: Var, group: usize) -> Result<Var> {
        let (n, d) = self.matrix(x, "prepend_row")?;
        if group == 0 || n % group != 0 || self.value(row).len() != d {
            return Err(Error::shape("prepend_row", self.shape(x), self.shape(row)));
        }
        let blocks = n / group;
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity((n + blocks) * d);
        for b in 0..blocks {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[b * group * d..(b + 1) * group * d]);
        }
        let rg = self.tracked(&[x, row]);
        Ok(self.push(
            Tensor::new(&[n + blocks, d], out)?,
            Op::PrependRow { x, row, group },
            rg,
        ))
    }

    /// Runs the reverse pass from a single-element `loss` and returns the
    /// gradients of every tracked leaf. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", nodes[loss.0].value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, &mut grads, node, &g);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Tensor<S>>], node: &Node<S>, g: &Tensor<S>) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, b_t } => {
            let (m, k) = val(a).matrix_dims();
            let n = node.value.shape()[1];
            if rg(a) {
                let mut da = vec![S::zero(); m * k];
                // b_t: out = a b^T, da = g b; else da = g b^T
                gemm(m, n, k, gd, false, val(b).data(), !b_t, &mut da, false);
                accumulate(nodes, grads, a, Tensor::new(&[m, k], da).unwrap());
            }
            if rg(b) {
                let bshape = val(b).shape().to_vec();
                let mut db = vec![S::zero(); k * n];
                if b_t {
                    gemm(n, m, k, gd, true, val(a).data(), false, &mut db, false);
                } else {
                    gemm(k, m, n, val(a).data(), true, gd, false, &mut db, false);
                }
                accumulate(nodes, grads, b, Tensor::new(&bshape, db).unwrap());
            }
        }
        &Op::Linear { x, w, bias } => {
            let (n, din) = val(x).matrix_dims();
            let dout = val(w).shape()[0];
            if rg(x) {
                let mut dx = vec![S::zero(); n * din];
                gemm(n, dout, din, gd, false, val(w).data(), false, &mut dx, false);
                accumulate(nodes, grads, x, Tensor::new(&[n, din], dx).unwrap());
            }
            if rg(w) {
                let mut dw = vec![S::zero(); dout * din];
                gemm(dout, n, din, gd, true, val(x).data(), false, &mut dw, false);
                accumulate(nodes, grads, w, Tensor::new(&[dout, din], dw).unwrap());
            }
            if let Some(b) = bias.filter(|&b| rg(b)) {
                let db = column_sums(gd, dout);
                accumulate(nodes, grads, b, Tensor::new(val(b).shape(), db).unwrap());
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                accumulate(nodes, grads, a, g.zip_map(val(b), "mul", |x, y| x * y).unwrap());
            }
            if rg(b) {
                accumulate(nodes, grads, b, g.zip_map(val(a), "mul", |x, y| x * y).unwrap());
            }
        }
        &Op::Scale(x, s) => accumulate(nodes, grads, x, g.map(|v| v * s)),
        &Op::AddRow { x, row } => {
            accumulate(nodes, grads, x, g.clone());
            if rg(row) {
                let d = val(row).len();
                let dr = column_sums(gd, d);
                accumulate(nodes, grads, row, Tensor::new(val(row).shape(), dr).unwrap());
            }
        }
        &Op::AddTiled { x, tile } => {
            accumulate(nodes, grads, x, g.clone());
            if rg(tile) {
                let tl = val(tile).len();
                let mut dt = vec![S::zero(); tl];
                for block in gd.chunks(tl) {
                    dt.iter_mut().zip(block).for_each(|(a, &b)| *a = *a + b);
                }
                accumulate(nodes, grads, tile, Tensor::new(val(tile).shape(), dt).unwrap());
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            let d = gd.iter().zip(y).map(|(&g, &y)| g * y * (S::one() - y)).collect();
            accumulate(nodes, grads, x, Tensor::new(g.shape(), d).unwrap());
        }
        &Op::Gelu(x) => {
            let xv = val(x).data();
            let d = gd.iter().zip(xv).map(|(&g, &x)| g * gelu(x).1).collect();
            accumulate(nodes, grads, x, Tensor::new(g.shape(), d).unwrap());
        }
        &Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            let mut dx = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let s: S = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - s);
                    }
                }
            }
            accumulate(nodes, grads, x, Tensor::new(g.shape(), dx).unwrap());
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (n, d) = val(*x).matrix_dims();
            let gv = val(*gain).data();
            if rg(*x) {
                let dn = S::lit(d as f64);
                let mut dx = vec![S::zero(); n * d];
                for i in 0..n {
                    let gr = &gd[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let dxh: Vec<S> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let s1: S = dxh.iter().copied().sum();
                    let s2: S = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = rstd[i] / dn * (dn * dxh[j] - s1 - xh[j] * s2);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(&[n, d], dx).unwrap());
            }
            if rg(*gain) {
                let mut dg = vec![S::zero(); d];
                for (k, (&g, &h)) in gd.iter().zip(xhat).enumerate() {
                    dg[k % d] = dg[k % d] + g * h;
                }
                accumulate(nodes, grads, *gain, Tensor::new(val(*gain).shape(), dg).unwrap());
            }
            if rg(*bias) {
                let db = column_sums(gd, d);
                accumulate(nodes, grads, *bias, Tensor::new(val(*bias).shape(), db).unwrap());
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq,
            probs,
        } => {
            let (q, k, v, heads, seq) = (*q, *k, *v, *heads, *seq);
            let (n, d) = val(q).matrix_dims();
            let dh = d / heads;
            let batch = n / seq;
            let scale = S::one() / S::lit(dh as f64).sqrt();
            let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
            let mut dq = vec![S::zero(); n * d];
            let mut dk = vec![S::zero(); n * d];
            let mut dv = vec![S::zero(); n * d];
            let mut dp = vec![S::zero(); seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                    let row = |t: usize| (b * seq + t) * d + off;
                    for i in 0..seq {
                        let gi = &gd[row(i)..][..dh];
                        for j in 0..seq {
                            dp[j] = dot(gi, &vv[row(j)..][..dh]);
                            let w = p[i * seq + j];
                            dv[row(j)..][..dh]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(a, &x)| *a = *a + w * x);
                        }
                        let s: S = (0..seq).map(|j| p[i * seq + j] * dp[j]).sum();
                        for j in 0..seq {
                            let ds = p[i * seq + j] * (dp[j] - s) * scale;
                            let (ri, rj) = (row(i), row(j));
                            for t in 0..dh {
                                dq[ri + t] = dq[ri + t] + ds * kv[rj + t];
                                dk[rj + t] = dk[rj + t] + ds * qv[ri + t];
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, q, Tensor::new(&[n, d], dq).unwrap());
            accumulate(nodes, grads, k, Tensor::new(&[n, d], dk).unwrap());
            accumulate(nodes, grads, v, Tensor::new(&[n, d], dv).unwrap());
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let (n, c) = val(*logits).matrix_dims();
            let scale = gd[0] / S::lit(n as f64);
            let mut dl = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                dl[i * c + y] = dl[i * c + y] - S::one();
            }
            dl.iter_mut().for_each(|x| *x = *x * scale);
            accumulate(nodes, grads, *logits, Tensor::new(&[n, c], dl).unwrap());
        }
        &Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let k = S::lit(2.0) * gd[0] / S::lit(av.len() as f64);
            let diff = av.zip_map(bv, "mse", |x, y| (x - y) * k).unwrap();
            if rg(b) {
                accumulate(nodes, grads, b, diff.map(|x| -x));
            }
            accumulate(nodes, grads, a, diff);
        }
        &Op::Sum(x) => accumulate(nodes, grads, x, Tensor::full(val(x).shape(), gd[0])),
        &Op::Mean(x) => {
            let n = S::lit(val(x).len() as f64);
            accumulate(nodes, grads, x, Tensor::full(val(x).shape(), gd[0] / n));
        }
        Op::SelectRows { x, idx } => {
            let (n, d) = val(*x).matrix_dims();
            let mut dx = vec![S::zero(); n * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] = dx[i * d + j] + gd[r * d + j];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(&[n, d], dx).unwrap());
        }
        Op::SelectCols { x, idx } => {
            let (n, c) = val(*x).matrix_dims();
            let m = idx.len();
            let mut dx = vec![S::zero(); n * c];
            for i in 0..n {
                for (r, &j) in idx.iter().enumerate() {
                    dx[i * c + j] = dx[i * c + j] + gd[i * m + r];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(&[n, c], dx).unwrap());
        }
        &Op::PrependRow { x, row, group } => {
            let (n, d) = val(x).matrix_dims();
            let blocks = n / group;
            let mut dx = Vec::with_capacity(n * d);
            let mut dr = vec![S::zero(); d];
            for b in 0..blocks {
                let base = b * (group + 1) * d;
                dr.iter_mut().zip(&gd[base..base + d]).for_each(|(a, &x)| *a = *a + x);
                dx.extend_from_slice(&gd[base + d..base + (group + 1) * d]);
            }
            accumulate(nodes, grads, x, Tensor::new(&[n, d], dx).unwrap());
            accumulate(nodes, grads, row, Tensor::new(val(row).shape(), dr).unwrap());
        }
    }
}

fn column_sums<S: Scalar>(data: &[S], cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); cols];
    for row in data.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    out
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Tanh-approximated GELU and its derivative.
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (y, dy)
}

/// In-place softmax over the middle axis of an `[outer, len, inner]` view.
pub(crate) fn softmax_strided<S: Scalar>(data: &mut [S], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let m = (0..len).map(|j| data[at(j)]).fold(S::neg_infinity(), S::max);
            let mut s = S::zero();
            for j in 0..len {
                let e = (data[at(j)] - m).exp();
                data[at(j)] = e;
                s = s + e;
            }
            for j in 0..len {
                data[at(j)] = data[at(j)] / s;
            }
        }
    }
}

/// Softmax of a plain slice, outside any tape.
pub fn softmax_slice<S: Scalar>(xs: &[S]) -> Vec<S> {
    let mut v = xs.to_vec();
    let n = v.len();
    softmax_strided(&mut v, 1, n, 1);
    v
}
