//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; `backward` walks the
//! nodes once in reverse and accumulates vector-Jacobian products into the
//! gradient buffers of nodes that require them.

use crate::error::{Error, Result};
use crate::numerics::tensor::{dims2, dot, matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a · bᵀ`
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    WeightedSum {
        weights: Var,
        items: Vec<Var>,
    },
    Sum(Var),
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

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Numerically stable softmax of a single slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|x| x.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor and
    /// its gradient buffer starts at zero.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        let rg = value.requires_grad();
        value.set_requires_grad(false);
        value.set_requires_grad(rg);
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(true);
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` with `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|v| v * c).collect()).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out =
            Tensor::new(tx.shape(), tx.data().iter().map(|&v| gelu_scalar(v)).collect()).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if n < 2 {
            return Err(Error::contract("layernorm needs a normalization extent of at least 2"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(Error::Dimension {
                op: "layernorm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
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

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "softmax",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    buf[j] = src[(o * n + j) * inner + i];
                }
                for (j, p) in softmax_slice(&buf).into_iter().enumerate() {
                    out[(o * n + j) * inner + i] = p;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Mean token-level cross-entropy of `logits[T×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_masked(logits, targets, None)
    }

    /// Cross-entropy averaged over positions with nonzero `mask` weight.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: Option<&[f64]>) -> Result<Var> {
        let tl = self.value(logits);
        let v = tl.cols();
        let t = tl.rows();
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let weights: Vec<f64> = match mask {
            Some(m) if m.len() != t => {
                return Err(Error::Dimension {
                    op: "cross_entropy",
                    left: vec![t],
                    right: vec![m.len()],
                })
            }
            Some(m) => m.to_vec(),
            None => vec![1.0; t],
        };
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::contract("cross_entropy mask selects no positions"));
        }
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for r in 0..t {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let out = Tensor::scalar(loss / total);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| w / total).collect(),
                probs,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = dims2(tt, "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]` with heads laid out contiguously
    /// along `d`. Position `t` attends to positions `0..=t` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = dims2(tq, "attention")?;
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() || rows != batch * seq {
            return Err(Error::Dimension {
                op: "attention",
                left: tq.shape().to_vec(),
                right: vec![batch, seq, heads],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("d={d} not divisible by heads={heads}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for t in 0..seq {
                    let qi = (b * seq + t) * d + off;
                    let qrow = &qd[qi..qi + dh];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ki = (b * seq + s) * d + off;
                        let sc = dot(qrow, &kd[ki..ki + dh]) * scale;
                        scores[s] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let pbase = ((b * heads + h) * seq + t) * seq;
                    let orow = (b * seq + t) * d + off;
                    for s in 0..=t {
                        let p = scores[s] / z;
                        probs[pbase + s] = p;
                        let vi = (b * seq + s) * d + off;
                        for j in 0..dh {
                            out[orow + j] += p * vd[vi + j];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Row-wise mixture: `out[i] = Σ_j weights[i, j] · items[j][i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        let (m, nexp) = dims2(tw, "weighted_sum")?;
        if nexp != items.len() || items.is_empty() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                left: tw.shape().to_vec(),
                right: vec![items.len()],
            });
        }
        let shape = self.value(items[0]).shape().to_vec();
        let n = self.value(items[0]).cols();
        let mut out = vec![0.0; m * n];
        for (j, &item) in items.iter().enumerate() {
            let ti = self.value(item);
            if ti.shape() != shape.as_slice() || ti.rows() != m {
                return Err(Error::Dimension {
                    op: "weighted_sum",
                    left: shape,
                    right: ti.shape().to_vec(),
                });
            }
            for i in 0..m {
                let w = tw.data()[i * nexp + j];
                let src = ti.row(i);
                for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let mut deps = items.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Back-propagates from a scalar `loss`, adding into the gradient buffer
    /// of every node that requires gradients. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if needs(*a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    matmul_nt(g, val(*b), da, *m, *n, *k);
                }
                if needs(*b) {
                    let db = accumulate(&mut grads[b.0], k * n);
                    matmul_tn(val(*a), g, db, *m, *k, *n);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                if needs(*a) {
                    let da = accumulate(&mut grads[a.0], m * k);
                    matmul_nn(g, val(*b), da, *m, *n, *k);
                }
                if needs(*b) {
                    let db = accumulate(&mut grads[b.0], n * k);
                    matmul_tn(g, val(*a), db, *m, *n, *k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let dv = accumulate(&mut grads[v.0], g.len());
                        dv.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if needs(v) {
                        let o = val(other);
                        let dv = accumulate(&mut grads[v.0], g.len());
                        for ((d, g), o) in dv.iter_mut().zip(g).zip(o) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if needs(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if needs(*bias) {
                    let n = len(*bias);
                    let db = accumulate(&mut grads[bias.0], n);
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Gelu(x) => {
                if needs(*x) {
                    let xs = val(*x);
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for ((d, g), &xv) in dx.iter_mut().zip(g).zip(xs) {
                        *d += g * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = len(*gain);
                let gv = val(*gain);
                if needs(*gain) {
                    let dg = accumulate(&mut grads[gain.0], n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*bias) {
                    let db = accumulate(&mut grads[bias.0], n);
                    for grow in g.chunks(n) {
                        db.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
                if needs(*x) {
                    let dx = accumulate(&mut grads[x.0], g.len());
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        let rs = rstd[r];
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            dx[r * n + j] += rs / nf * (nf * dh - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if needs(*x) {
                    let y = node.value.data();
                    let dx = accumulate(&mut grads[x.0], g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s: f64 = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let v = probs.len() / targets.len();
                    let dl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let c = g[0] * w;
                        if c == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] += c * probs[r * v + j];
                        }
                        dl[r * v + t] -= c;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = nodes[table.0].value.cols();
                    let dt = accumulate(&mut grads[table.0], len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = nodes[q.0].value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for t in 0..seq {
                            let gi = (b * seq + t) * d + off;
                            let grow = &g[gi..gi + dh];
                            let pbase = ((b * heads + h) * seq + t) * seq;
                            let mut s = 0.0;
                            for sidx in 0..=t {
                                let vi = (b * seq + sidx) * d + off;
                                let p = probs[pbase + sidx];
                                dp[sidx] = dot(grow, &vd[vi..vi + dh]);
                                s += p * dp[sidx];
                                for j in 0..dh {
                                    dv[vi + j] += p * grow[j];
                                }
                            }
                            for sidx in 0..=t {
                                let ds = probs[pbase + sidx] * (dp[sidx] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ki = (b * seq + sidx) * d + off;
                                for j in 0..dh {
                                    dq[gi + j] += ds * kd[ki + j];
                                    dk[ki + j] += ds * qd[gi + j];
                                }
                            }
                        }
                    }
                }
                for (var, delta) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        let slot = accumulate(&mut grads[var.0], delta.len());
                        slot.iter_mut().zip(&delta).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::WeightedSum { weights, items } => {
                let nexp = items.len();
                let w = val(*weights);
                let m = w.len() / nexp;
                let n = g.len() / m;
                for (j, &item) in items.iter().enumerate() {
                    if needs(item) {
                        let di = accumulate(&mut grads[item.0], g.len());
                        for i in 0..m {
                            let wij = w[i * nexp + j];
                            for c in 0..n {
                                di[i * n + c] += wij * g[i * n + c];
                            }
                        }
                    }
                }
                if needs(*weights) {
                    let mut dw = vec![0.0; m * nexp];
                    for (j, &item) in items.iter().enumerate() {
                        let iv = val(item);
                        for i in 0..m {
                            dw[i * nexp + j] = dot(&g[i * n..(i + 1) * n], &iv[i * n..(i + 1) * n]);
                        }
                    }
                    let slot = accumulate(&mut grads[weights.0], m * nexp);
                    slot.iter_mut().zip(&dw).for_each(|(s, d)| *s += d);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let dx = accumulate(&mut grads[x.0], len(*x));
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }
}
