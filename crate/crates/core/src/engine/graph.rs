use super::tensor::{broadcast_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    L1Rows(Var, Var),
    BceRows(Var, Vec<f64>),
    SoftmaxCeRows(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "ewmul",
            Op::Scale(..) => "scale",
            Op::SumAxis(..) => "reduce_sum",
            Op::SumAll(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::L1Rows(..) => "l1",
            Op::BceRows(..) => "binary_cross_entropy",
            Op::SoftmaxCeRows(..) => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1Rows(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::BceRows(a, _)
            | Op::SoftmaxCeRows(a, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input of node `k` has an
/// index below `k`. Leaves created with [`Graph::param`] collect gradients on
/// [`Graph::backward`]; constants never do.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Whether `v` was created as a gradient-collecting leaf.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Input node ids of `v`, for structural inspection.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Smallest distance of any relu input or l1 residual to its kink.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the
    /// perturbation size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for &x in self.nodes[a.0].value.data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::L1Rows(a, b) => {
                    let (pa, pb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (x, y) in pa.iter().zip(pb) {
                        margin = margin.min((x - y).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---------------------------------------------------------------------
    // forward ops

    /// `[r×k]·[k×c] → [r×c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, sa);
            let mb = broadcast_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((out_shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data)?))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data)?))
    }

    /// Element-wise product with trailing-axis broadcasting, so a row vector
    /// multiplies every row of a matrix.
    pub fn ewmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.broadcast_binary("ewmul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data)?))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.ewmul(a, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * k).collect())
            .expect("same shape");
        self.push(Op::Scale(a, k), value)
    }

    /// Sums out `axis`; the result drops that axis.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("reduce_sum", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Op::SumAxis(a, axis), Tensor::new(out_shape, out)?))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim("mean", self.shape(a), &[axis]))?;
        let s = self.reduce_sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape.to_vec())
            .map_err(|_| Error::dim("reshape", self.shape(a), shape))?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map_unary(a, sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// Per-row mean absolute error of two `[n×k]` tensors; returns `[n]`.
    pub fn l1_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st || sp.len() != 2 {
            return Err(Error::dim("l1", sp, st));
        }
        let (n, k) = (sp[0], sp[1]);
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let out = (0..n)
            .map(|i| (0..k).map(|j| (p[i * k + j] - t[i * k + j]).abs()).sum::<f64>() / k as f64)
            .collect();
        Ok(self.push(Op::L1Rows(pred, target), Tensor::new(vec![n], out)?))
    }

    /// Per-sample binary cross-entropy of probabilities `[n]` or `[n×1]`
    /// against labels in {0,1}; returns `[n]`.
    pub fn bce_rows(&mut self, prob: Var, labels: &[f64]) -> Result<Var> {
        let s = self.shape(prob);
        let n = match s {
            [n] | [n, 1] => *n,
            _ => return Err(Error::dim("binary_cross_entropy", s, &[labels.len()])),
        };
        if n != labels.len() {
            return Err(Error::dim("binary_cross_entropy", s, &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(Error::Validation(format!("label {bad} is not in {{0,1}}")));
        }
        let p = self.value(prob).data();
        let out = p
            .iter()
            .zip(labels)
            .map(|(&p, &l)| {
                let p = clamp_prob(p);
                -(l * p.ln() + (1.0 - l) * (1.0 - p).ln())
            })
            .collect();
        Ok(self.push(
            Op::BceRows(prob, labels.to_vec()),
            Tensor::new(vec![n], out)?,
        ))
    }

    /// Per-row softmax cross-entropy of logits `[n×k]`; returns `[n]`.
    pub fn softmax_ce_rows(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != classes.len() {
            return Err(Error::dim("softmax_cross_entropy", s, &[classes.len()]));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::Validation(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let z = self.value(logits).data();
        let out = (0..n)
            .map(|i| {
                let row = &z[i * k..(i + 1) * k];
                log_sum_exp(row) - row[classes[i]]
            })
            .collect();
        Ok(self.push(
            Op::SoftmaxCeRows(logits, classes.to_vec()),
            Tensor::new(vec![n], out)?,
        ))
    }

    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        let rows = self.l1_rows(pred, target)?;
        Ok(self.mean(rows))
    }

    pub fn binary_cross_entropy(&mut self, prob: Var, labels: &[f64]) -> Result<Var> {
        let rows = self.bce_rows(prob, labels)?;
        Ok(self.mean(rows))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let rows = self.softmax_ce_rows(logits, classes)?;
        Ok(self.mean(rows))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Accumulates d`loss`/d`leaf` into every gradient-collecting leaf.
    ///
    /// Gradients add onto whatever the leaves already hold; call
    /// [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => self.nodes[i].value.accumulate_grad(&g),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                    let (r, k, c) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].needs_grad {
                        let da = matmul_a_bt(&g, self.value(b).data(), r, c, k);
                        add_into(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_at_b(self.value(a).data(), &g, r, k, c);
                        add_into(&mut adj[b.0], &db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let ga = self.unbroadcast(&g, &out_shape, a, 1.0);
                    let gb = self.unbroadcast(&g, &out_shape, b, sign);
                    if let Some(ga) = ga {
                        add_into(&mut adj[a.0], &ga);
                    }
                    if let Some(gb) = gb {
                        add_into(&mut adj[b.0], &gb);
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let mb = broadcast_map(&out_shape, self.shape(b));
                    let ma = broadcast_map(&out_shape, self.shape(a));
                    let (da, db) = (self.value(a).data(), self.value(b).data());
                    let ga = self.nodes[a.0].needs_grad.then(|| {
                        let mut acc = vec![0.0; da.len()];
                        for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                            acc[ia] += g[o] * db[ib];
                        }
                        acc
                    });
                    let gb = self.nodes[b.0].needs_grad.then(|| {
                        let mut acc = vec![0.0; db.len()];
                        for (o, (&ia, &ib)) in ma.iter().zip(&mb).enumerate() {
                            acc[ib] += g[o] * da[ia];
                        }
                        acc
                    });
                    if let Some(ga) = ga {
                        add_into(&mut adj[a.0], &ga);
                    }
                    if let Some(gb) = gb {
                        add_into(&mut adj[b.0], &gb);
                    }
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                    add_into(&mut adj[a.0], &ga);
                }
                Op::SumAxis(a, axis) => {
                    let shape = self.shape(a).to_vec();
                    let (outer, n, inner) = split_axis(&shape, axis);
                    let mut ga = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            ga[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    add_into(&mut adj[a.0], &ga);
                }
                Op::SumAll(a) => {
                    let ga = vec![g[0]; self.value(a).numel()];
                    add_into(&mut adj[a.0], &ga);
                }
                Op::Reshape(a) => add_into(&mut adj[a.0], &g),
                Op::Transpose(a) => {
                    let s = self.shape(a);
                    let (r, c) = (s[0], s[1]);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    add_into(&mut adj[a.0], &ga);
                }
                Op::Relu(a) => {
                    let x = self.value(a).data();
                    let ga: Vec<f64> = x
                        .iter()
                        .zip(&g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    add_into(&mut adj[a.0], &ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.data();
                    let ga: Vec<f64> = y.iter().zip(&g).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                    add_into(&mut adj[a.0], &ga);
                }
                Op::L1Rows(a, b) => {
                    let s = self.shape(a);
                    let k = s[1];
                    let (p, t) = (self.value(a).data(), self.value(b).data());
                    let ga: Vec<f64> = p
                        .iter()
                        .zip(t)
                        .enumerate()
                        .map(|(idx, (&p, &t))| g[idx / k] * sign(p - t) / k as f64)
                        .collect();
                    if self.nodes[b.0].needs_grad {
                        let gb: Vec<f64> = ga.iter().map(|x| -x).collect();
                        add_into(&mut adj[b.0], &gb);
                    }
                    if self.nodes[a.0].needs_grad {
                        add_into(&mut adj[a.0], &ga);
                    }
                }
                Op::BceRows(a, ref labels) => {
                    let p = self.value(a).data();
                    let ga: Vec<f64> = p
                        .iter()
                        .zip(labels)
                        .zip(&g)
                        .map(|((&p, &l), &g)| {
                            let p = clamp_prob(p);
                            g * (-l / p + (1.0 - l) / (1.0 - p))
                        })
                        .collect();
                    add_into(&mut adj[a.0], &ga);
                }
                Op::SoftmaxCeRows(a, ref classes) => {
                    let s = self.shape(a);
                    let k = s[1];
                    let z = self.value(a).data();
                    let mut ga = vec![0.0; z.len()];
                    for (row, &class) in classes.iter().enumerate() {
                        let zr = &z[row * k..(row + 1) * k];
                        let lse = log_sum_exp(zr);
                        for j in 0..k {
                            let soft = (zr[j] - lse).exp();
                            let target = if j == class { 1.0 } else { 0.0 };
                            ga[row * k + j] = g[row] * (soft - target);
                        }
                    }
                    add_into(&mut adj[a.0], &ga);
                }
            }
        }
        Ok(())
    }

    /// Sums an output-shaped gradient down to the shape of operand `v`.
    fn unbroadcast(
        &self,
        g: &[f64],
        out_shape: &[usize],
        v: Var,
        factor: f64,
    ) -> Option<Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.shape(v);
        let mut acc = vec![0.0; self.value(v).numel()];
        if shape == out_shape {
            for (o, &x) in g.iter().enumerate() {
                acc[o] += factor * x;
            }
        } else {
            for (o, &src) in broadcast_map(out_shape, shape).iter().enumerate() {
                acc[src] += factor * g[o];
            }
        }
        Some(acc)
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Row-major `[r×k]·[k×c]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[kk * c..(kk + 1) * c]) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `g[r×c] · bᵀ` where `b` is `[k×c]`.
fn matmul_a_bt(g: &[f64], b: &[f64], r: usize, c: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * k];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            out[i * k + kk] = grow.iter().zip(&b[kk * c..(kk + 1) * c]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `[r×k]` and `g` is `[r×c]`.
fn matmul_at_b(a: &[f64], g: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &gv) in out[kk * c..(kk + 1) * c].iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
    out
}
