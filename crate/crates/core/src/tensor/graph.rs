//! Operation-recording graph with reverse-mode gradient accumulation.
//!
//! Ops are appended in execution order, so every node's inputs precede it and
//! a single reverse sweep visits each op exactly once. A graph is built for
//! one forward pass, differentiated once, and dropped; concurrent workers each
//! own a private graph.

use super::kernels::{self, ScanDims};
use super::{pool, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct ScanState {
    dims: ScanDims,
    h: Vec<f64>,
    abar: Vec<f64>,
}

impl Drop for ScanState {
    fn drop(&mut self) {
        pool::give(std::mem::take(&mut self.h));
        pool::give(std::mem::take(&mut self.abar));
    }
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ReverseRows(Var),
    LastRow(Var),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    NegExp(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    TiedLogits {
        table: Var,
        hidden: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        target: usize,
    },
    SelectiveScan {
        inputs: [Var; 6],
        state: Box<ScanState>,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Records a forward computation and runs reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        tune_allocator();
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) target w.r.t. `v`,
    /// if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let needs = self.needs(x);
        self.push(Op::Scale(x, factor), value, needs)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!("matmul: inner dims {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for r in 0..m {
                let o_row = &mut out[r * n..(r + 1) * n];
                for k in 0..ka {
                    let av = ad[r * ka + k];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &bd[k * n..(k + 1) * n];
                    for j in 0..n {
                        o_row[j] += av * b_row[j];
                    }
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    /// Broadcast-add a length-D row vector to every row of an L×D tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        if self.value(row).shape() != [d] {
            return Err(Error::Dimension(format!(
                "add_row: row shape {:?}, expected [{d}]",
                self.value(row).shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let rd = self.value(row).data();
        for t in 0..l {
            for j in 0..d {
                data[t * d + j] += rd[j];
            }
        }
        let value = Tensor::new(vec![l, d], data)?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(Op::AddRow(x, row), value, needs))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) out of {d} columns",
                start + len
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(l * len);
        for t in 0..l {
            data.extend_from_slice(&xd[t * d + start..t * d + start + len]);
        }
        let value = Tensor::new(vec![l, len], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, needs))
    }

    /// Reverse the row order of a 2-D tensor.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(l * d);
        for t in (0..l).rev() {
            data.extend_from_slice(&xd[t * d..(t + 1) * d]);
        }
        let value = Tensor::new(vec![l, d], data)?;
        let needs = self.needs(x);
        Ok(self.push(Op::ReverseRows(x), value, needs))
    }

    /// Final row of a 2-D tensor as a 1-D vector.
    pub fn last_row(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let data = self.value(x).data()[(l - 1) * d..].to_vec();
        let value = Tensor::from_vec(data);
        let needs = self.needs(x);
        Ok(self.push(Op::LastRow(x), value, needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v / (1.0 + (-v).exp()))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| {
            if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Elementwise `-exp(x)`; keeps scan eigenvalues strictly negative.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::NegExp(x), |v| -v.exp())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let needs = self.needs(x);
        self.push(op, value, needs)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    /// Gather rows of `table` by id. Row `ids[t]` becomes output row `t`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                vocab: rows.saturating_sub(1) as u32,
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// Weight-tied logits: score of item v (1-based) is `<table_v, hidden>`,
    /// for every v in `1..rows`. The padding row 0 gets no score.
    pub fn tied_logits(&mut self, table: Var, hidden: Var) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if self.value(hidden).shape() != [d] {
            return Err(Error::Dimension(format!(
                "tied_logits: hidden shape {:?}, expected [{d}]",
                self.value(hidden).shape()
            )));
        }
        if rows < 2 {
            return Err(Error::Contract("tied_logits: empty vocabulary".into()));
        }
        let td = self.value(table).data();
        let hd = self.value(hidden).data();
        let mut data = Vec::with_capacity(rows - 1);
        for v in 1..rows {
            let row = &td[v * d..(v + 1) * d];
            data.push(row.iter().zip(hd).map(|(a, b)| a * b).sum());
        }
        let value = Tensor::from_vec(data);
        let needs = self.needs(table) || self.needs(hidden);
        Ok(self.push(Op::TiedLogits { table, hidden }, value, needs))
    }

    /// Softmax cross-entropy of 1-D logits against a 0-based target index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits must be 1-D, got {:?}",
                t.shape()
            )));
        }
        let n = t.numel();
        if target >= n {
            return Err(Error::Contract(format!(
                "cross_entropy: target {target} out of {n} classes"
            )));
        }
        let ld = t.data();
        let max = ld.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = ld.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= z;
        }
        let loss = z.ln() + max - ld[target];
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                target,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Selective-scan recurrence (see [`kernels::scan_forward`]).
    ///
    /// `u`, `delta`: L×D. `a`: D×S. `b`, `c`: L×S. `skip`: D. Output L×D.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        skip: Var,
    ) -> Result<Var> {
        let (l, d) = self.value(u).dims2()?;
        let (da, s) = self.value(a).dims2()?;
        if self.value(delta).shape() != [l, d] {
            return Err(Error::Dimension(format!(
                "selective_scan: delta shape {:?}, expected [{l}, {d}]",
                self.value(delta).shape()
            )));
        }
        if da != d {
            return Err(Error::Dimension(format!(
                "selective_scan: a has {da} channels, input has {d}"
            )));
        }
        for (name, v, want) in [("b", b, [l, s]), ("c", c, [l, s])] {
            if self.value(v).shape() != want {
                return Err(Error::Dimension(format!(
                    "selective_scan: {name} shape {:?}, expected {want:?}",
                    self.value(v).shape()
                )));
            }
        }
        if self.value(skip).shape() != [d] {
            return Err(Error::Dimension(format!(
                "selective_scan: skip shape {:?}, expected [{d}]",
                self.value(skip).shape()
            )));
        }
        for (name, v) in [
            ("u", u),
            ("delta", delta),
            ("a", a),
            ("b", b),
            ("c", c),
            ("skip", skip),
        ] {
            if !self.value(v).all_finite() {
                return Err(Error::Numeric(format!(
                    "selective_scan: non-finite values in {name}"
                )));
            }
        }

        let dims = ScanDims {
            len: l,
            channels: d,
            state: s,
        };
        let mut y = vec![0.0; l * d];
        let mut h = pool::take(l * d * s);
        let mut abar = pool::take(l * d * s);
        kernels::scan_forward(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(skip).data(),
            &mut y,
            &mut h,
            &mut abar,
        );
        // Inputs with exploding exp arguments (positive delta*a) can take the
        // recurrence to infinity even though every input is finite.
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "selective_scan: recurrence overflowed to non-finite values".into(),
            ));
        }
        let value = Tensor::new(vec![l, d], y)?;
        let needs = [u, delta, a, b, c, skip].iter().any(|&v| self.needs(v));
        Ok(self.push(
            Op::SelectiveScan {
                inputs: [u, delta, a, b, c, skip],
                state: Box::new(ScanState { dims, h, abar }),
            },
            value,
            needs,
        ))
    }

    /// Causal depthwise convolution: `x` L×D, `w` D×K, output L×D.
    pub fn causal_depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        let (dw, k) = self.value(w).dims2()?;
        if dw != d {
            return Err(Error::Dimension(format!(
                "causal_depthwise_conv: w has {dw} channels, input has {d}"
            )));
        }
        if k == 0 {
            return Err(Error::Dimension(
                "causal_depthwise_conv: empty kernel".into(),
            ));
        }
        let mut y = vec![0.0; l * d];
        kernels::conv_forward(l, d, k, self.value(x).data(), self.value(w).data(), &mut y);
        let value = Tensor::new(vec![l, d], y)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Op::CausalConv { x, w }, value, needs))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate on every
    /// node that (transitively) feeds the loss; fetch them with
    /// [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let g = node.grad.as_ref().expect("grad present");
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, g);
                    accumulate(before, *b, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = before[b.0].value.data();
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(g, v)| g * v).collect();
                        accumulate_vec(before, a, ga);
                    }
                    let av = before[a.0].value.data();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, v)| g * v).collect();
                    accumulate_vec(before, b, gb);
                }
                Op::Scale(x, factor) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate_vec(before, *x, gx);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = before[a.0].value.dims2()?;
                    let n = before[b.0].value.dims2()?.1;
                    if before[a.0].needs_grad {
                        let bd = before[b.0].value.data();
                        let mut ga = vec![0.0; m * k];
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let b_row = &bd[kk * n..(kk + 1) * n];
                                ga[r * k + kk] +=
                                    g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                        accumulate_vec(before, a, ga);
                    }
                    if before[b.0].needs_grad {
                        let ad = before[a.0].value.data();
                        let mut gb = vec![0.0; k * n];
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let av = ad[r * k + kk];
                                if av == 0.0 {
                                    continue;
                                }
                                let gb_row = &mut gb[kk * n..(kk + 1) * n];
                                for j in 0..n {
                                    gb_row[j] += av * g_row[j];
                                }
                            }
                        }
                        accumulate_vec(before, b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    accumulate(before, x, g);
                    let d = before[row.0].value.numel();
                    let mut gr = vec![0.0; d];
                    for (t, chunk) in g.chunks_exact(d).enumerate() {
                        let _ = t;
                        for j in 0..d {
                            gr[j] += chunk[j];
                        }
                    }
                    accumulate_vec(before, row, gr);
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let (l, d) = before[x.0].value.dims2()?;
                    let mut gx = vec![0.0; l * d];
                    for t in 0..l {
                        gx[t * d + start..t * d + start + len]
                            .copy_from_slice(&g[t * len..(t + 1) * len]);
                    }
                    accumulate_vec(before, x, gx);
                }
                Op::ReverseRows(x) => {
                    let x = *x;
                    let (l, d) = before[x.0].value.dims2()?;
                    let mut gx = Vec::with_capacity(l * d);
                    for t in (0..l).rev() {
                        gx.extend_from_slice(&g[t * d..(t + 1) * d]);
                    }
                    accumulate_vec(before, x, gx);
                }
                Op::LastRow(x) => {
                    let x = *x;
                    let (l, d) = before[x.0].value.dims2()?;
                    let mut gx = vec![0.0; l * d];
                    gx[(l - 1) * d..].copy_from_slice(g);
                    accumulate_vec(before, x, gx);
                }
                Op::Silu(x) => {
                    let x = *x;
                    let xv = before[x.0].value.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate_vec(before, x, gx);
                }
                Op::Softplus(x) => {
                    let x = *x;
                    let xv = before[x.0].value.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| g / (1.0 + (-v).exp()))
                        .collect();
                    accumulate_vec(before, x, gx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let yv = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(yv).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    accumulate_vec(before, x, gx);
                }
                Op::NegExp(x) => {
                    let x = *x;
                    let yv = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(yv).map(|(g, &y)| g * y).collect();
                    accumulate_vec(before, x, gx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gx = vec![g[0]; before[x.0].value.numel()];
                    accumulate_vec(before, x, gx);
                }
                Op::Embedding { table, ids } => {
                    let table = *table;
                    let d = before[table.0].value.dims2()?.1;
                    let mut gt = vec![0.0; before[table.0].value.numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        let row = &g[t * d..(t + 1) * d];
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for j in 0..d {
                            dst[j] += row[j];
                        }
                    }
                    accumulate_vec(before, table, gt);
                }
                Op::TiedLogits { table, hidden } => {
                    let (table, hidden) = (*table, *hidden);
                    let (rows, d) = before[table.0].value.dims2()?;
                    if before[hidden.0].needs_grad {
                        let td = before[table.0].value.data();
                        let mut gh = vec![0.0; d];
                        for v in 1..rows {
                            let gv = g[v - 1];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &td[v * d..(v + 1) * d];
                            for j in 0..d {
                                gh[j] += gv * row[j];
                            }
                        }
                        accumulate_vec(before, hidden, gh);
                    }
                    if before[table.0].needs_grad {
                        let hd = before[hidden.0].value.data().to_vec();
                        let mut gt = vec![0.0; rows * d];
                        for v in 1..rows {
                            let gv = g[v - 1];
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut gt[v * d..(v + 1) * d];
                            for j in 0..d {
                                dst[j] += gv * hd[j];
                            }
                        }
                        accumulate_vec(before, table, gt);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    target,
                } => {
                    let gl: Vec<f64> = probs
                        .iter()
                        .enumerate()
                        .map(|(j, &p)| g[0] * (p - if j == *target { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate_vec(before, *logits, gl);
                }
                Op::SelectiveScan { inputs, state } => {
                    let [u, delta, a, b, c, skip] = *inputs;
                    let dims = state.dims;
                    let mut du = vec![0.0; before[u.0].value.numel()];
                    let mut ddelta = vec![0.0; before[delta.0].value.numel()];
                    let mut da = vec![0.0; before[a.0].value.numel()];
                    let mut db = vec![0.0; before[b.0].value.numel()];
                    let mut dc = vec![0.0; before[c.0].value.numel()];
                    let mut dskip = vec![0.0; before[skip.0].value.numel()];
                    let mut scratch = vec![0.0; dims.channels * dims.state];
                    kernels::scan_backward(
                        dims,
                        before[u.0].value.data(),
                        before[delta.0].value.data(),
                        before[a.0].value.data(),
                        before[b.0].value.data(),
                        before[c.0].value.data(),
                        before[skip.0].value.data(),
                        &state.h,
                        &state.abar,
                        g,
                        &mut du,
                        &mut ddelta,
                        &mut da,
                        &mut db,
                        &mut dc,
                        &mut dskip,
                        &mut scratch,
                    );
                    accumulate_vec(before, u, du);
                    accumulate_vec(before, delta, ddelta);
                    accumulate_vec(before, a, da);
                    accumulate_vec(before, b, db);
                    accumulate_vec(before, c, dc);
                    accumulate_vec(before, skip, dskip);
                }
                Op::CausalConv { x, w } => {
                    let (x, w) = (*x, *w);
                    let (l, d) = before[x.0].value.dims2()?;
                    let k = before[w.0].value.dims2()?.1;
                    let mut dx = vec![0.0; l * d];
                    let mut dw = vec![0.0; d * k];
                    kernels::conv_backward(
                        l,
                        d,
                        k,
                        before[x.0].value.data(),
                        before[w.0].value.data(),
                        g,
                        &mut dx,
                        &mut dw,
                    );
                    accumulate_vec(before, x, dx);
                    accumulate_vec(before, w, dw);
                }
            }
        }
        Ok(())
    }
}

/// Per-example graphs allocate and drop around a megabyte of buffers; with
/// glibc defaults the larger ones are mmap-served and the heap top gets
/// trimmed on every drop, which costs page faults. Raise both thresholds
/// once per process.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static TUNE: Once = Once::new();
        TUNE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 24);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 24);
        });
    }
}

fn accumulate(nodes: &mut [Node], target: Var, g: &[f64]) {
    let node = &mut nodes[target.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

/// Like [`accumulate`], but takes ownership so a fresh contribution becomes
/// the gradient buffer without a copy.
fn accumulate_vec(nodes: &mut [Node], target: Var, g: Vec<f64>) {
    let node = &mut nodes[target.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        None => node.grad = Some(g),
    }
}
