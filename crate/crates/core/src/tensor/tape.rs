use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ProjectCols {
        x: Var,
        weights: Vec<Vec<(usize, T)>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'s, T: Scalar> {
    value: Cow<'s, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications in execution order; every node's inputs
/// precede it, so a reverse sweep is a valid topological order.
pub struct Tape<'s, T: Scalar = f32> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<'s, T>>,
    grad_enabled: bool,
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<'s, T: Scalar> Tape<'s, T> {
    /// Tape over a parameter store, recording for backward.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that never records gradient dependencies.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    /// Tape with no parameter store; only explicit leaves.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.dims(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("tape node dims are consistent")
    }

    fn push(&mut self, value: Cow<'s, [T]>, rows: usize, cols: usize, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf borrowing a parameter from the store without copying.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store.expect("tape has no parameter store");
        let t = store.get(id);
        let (r, c) = t.matrix_dims();
        let rg = t.requires_grad();
        self.push(Cow::Borrowed(t.data()), r, c, Op::Leaf { param: Some(id) }, rg)
    }

    /// Owned leaf; gradients (if requested) are reported via [`Gradients::leaf`].
    pub fn leaf(&mut self, data: Vec<T>, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err("leaf", (rows, cols), (1, data.len())));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf { param: None }, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        self.leaf(data, rows, cols, false)
    }

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the natural layout for `x · Wᵀ` with `W[out×in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", (m, k), (n, k2)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("add", self.dims(a), self.dims(b)));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err("mul", self.dims(a), self.dims(b)));
        }
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b), rg))
    }

    /// Adds a row vector `b[1×n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (1, n) {
            return Err(shape_err("add_row", (m, n), self.dims(b)));
        }
        let bias = self.value(b);
        let out: Vec<T> = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), m, n, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| x * c).collect();
        let (r, cols) = self.dims(a);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), r, cols, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), r, c, Op::Gelu(a), rg)
    }

    /// Softmax over each row. Entries equal to `-inf` get probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), r, c, Op::SoftmaxRows(a), rg)
    }

    /// Layer normalisation over the last axis with learned `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(invalid("layer_norm eps must be positive"));
        }
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) {
            return Err(shape_err("layer_norm gain", (m, n), self.dims(gain)));
        }
        if self.dims(bias) != (1, n) {
            return Err(shape_err("layer_norm bias", (m, n), self.dims(bias)));
        }
        let nf = T::from_f64(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        {
            let xv = self.value(x);
            let g = self.value(gain);
            let b = self.value(bias);
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
                let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
                let rs = T::one() / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[i * n + j] = h;
                    out[i * n + j] = h * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            m,
            n,
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

    /// Row lookup `table[ids[i]]` for each `i`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(invalid("embedding lookup needs at least one id"));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            ids.len(),
            d,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if rows.is_empty() {
            return Err(invalid("select_rows needs at least one row"));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::OutOfRange {
                    what: "rows",
                    index: r,
                    size: m,
                });
            }
            out.extend_from_slice(&self.value(x)[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            rows.len(),
            n,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", (m, n), (start, len)));
        }
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), m, len, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols of nothing"))?;
        let m = self.dims(first).0;
        let mut n = 0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(shape_err("concat_cols", self.dims(first), self.dims(p)));
            }
            n += self.dims(p).1;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Cow::Owned(out), m, n, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows of nothing"))?;
        let n = self.dims(first).1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.dims(p).1 != n {
                return Err(shape_err("concat_rows", self.dims(first), self.dims(p)));
            }
            m += self.dims(p).0;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Cow::Owned(out), m, n, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sparse linear map over columns: `out[r][c] = Σ w · x[r][col]` for each
    /// `(col, w)` in `weights[c]`.
    pub fn project_cols(&mut self, x: Var, weights: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let (m, n) = self.dims(x);
        for &(col, _) in weights.iter().flatten() {
            if col >= n {
                return Err(Error::OutOfRange {
                    what: "projected column",
                    index: col,
                    size: n,
                });
            }
        }
        let c = weights.len();
        let mut out = vec![T::zero(); m * c];
        {
            let xv = self.value(x);
            for i in 0..m {
                for (k, ws) in weights.iter().enumerate() {
                    out[i * c + k] = ws.iter().fold(T::zero(), |a, &(col, w)| a + w * xv[i * n + col]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Cow::Owned(out), m, c, Op::ProjectCols { x, weights }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if c < 2 {
            return Err(invalid("cross_entropy needs at least two classes"));
        }
        if targets.len() != b {
            return Err(shape_err("cross_entropy", (b, c), (targets.len(), 1)));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(Error::OutOfRange {
                    what: "class target",
                    index: t,
                    size: c,
                });
            }
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = max + row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
            loss = loss + (lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss = loss / T::from_f64(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(vec![s]), 1, 1, Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: vec![self.dims(loss).0, self.dims(loss).1],
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut out = Gradients {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { param } => {
                    match param {
                        Some(id) => out.params.push((*id, g)),
                        None => {
                            out.leaves.insert(idx, g);
                        }
                    }
                    continue;
                }
                op => self.propagate(op, node, &g, &mut grads),
            }
        }
        // A parameter read several times yields one leaf per read; merge them.
        out.params.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(ParamId, Vec<T>)> = Vec::with_capacity(out.params.len());
        for (id, g) in out.params.drain(..) {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => add_into(acc, &g),
                _ => merged.push((id, g)),
            }
        }
        out.params = merged;
        Ok(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, op: &Op<T>, node: &Node<'s, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf { .. } => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    matmul_nt(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    matmul_tn(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · B
                    matmul_nn(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = dCᵀ · A
                    matmul_tn(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(o, (&d, &y))| *o = *o + d * y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(av)).for_each(|(o, (&d, &x))| *o = *o + d * x);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let n = node.cols;
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *c);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(o, (&d, &x))| *o = *o + d * gelu_grad(x));
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.cols;
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |acc, (&d, &p)| acc + d * p);
                        for j in 0..n {
                            orow[j] = orow[j] + yrow[j] * (grow[j] - dot);
                        }
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
                let n = node.cols;
                let nf = T::from_f64(n as f64);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                let gain_v = self.value(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = grow[j] * gain_v[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hrow[j];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for j in 0..n {
                            let d = grow[j] * gain_v[j];
                            gx[i * n + j] = gx[i * n + j] + rstd[i] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.cols;
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let n = node.cols;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.cols;
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.cols;
                let mut offset = 0;
                for p in parts {
                    let c = self.dims(*p).1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for (i, grow) in g.chunks(n).enumerate() {
                            add_into(&mut gp[i * c..(i + 1) * c], &grow[offset..offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ProjectCols { x, weights } => {
                let c = node.cols;
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, grow) in g.chunks(c).enumerate() {
                        for (k, ws) in weights.iter().enumerate() {
                            for &(col, w) in ws {
                                gx[i * n + col] = gx[i * n + col] + w * grow[k];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.dims(*logits).1;
                let scale = g[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + (probs[i * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<'_, f64>, data: &[f64], r: usize, c: usize) -> Var {
        t.leaf(data.to_vec(), r, c, true).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::detached();
        let a = leaf(&mut t, &[1.0, 0.0, 0.0, 1.0], 2, 2);
        let b = leaf(&mut t, &[3.0, 4.0], 2, 1);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0]);

        let a = leaf(&mut t, &[2.0], 1, 1);
        let b = leaf(&mut t, &[3.0], 1, 1);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[6.0]);

        let a = leaf(&mut t, &[1.0, 2.0, 3.0, 4.0], 2, 2);
        let b = leaf(&mut t, &[5.0, 6.0], 2, 1);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::detached();
        let a = leaf(&mut t, &[1.0; 6], 2, 3);
        let b = leaf(&mut t, &[1.0; 4], 2, 2);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f64>::detached();
        let x = leaf(&mut t, &[0.0, 0.0], 1, 2);
        let s = t.softmax_rows(x);
        assert_eq!(t.value(s), &[0.5, 0.5]);

        let x = leaf(&mut t, &[3.0, 3.0, 3.0, 3.0], 1, 4);
        let g = t.constant(vec![1.0; 4], 1, 4).unwrap();
        let b = t.constant(vec![0.0; 4], 1, 4).unwrap();
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        assert!(t.layer_norm(x, g, b, 0.0).is_err());

        let z = leaf(&mut t, &[0.0], 1, 1);
        let z = t.gelu(z);
        assert_eq!(t.value(z), &[0.0]);
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let mut t = Tape::<f32>::detached();
        let x = t.leaf(vec![1.0, f32::NEG_INFINITY, 1.0], 1, 3, true).unwrap();
        let s = t.softmax_rows(x);
        assert_eq!(t.value(s), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::detached();
        for x in [-4.0, 0.0, 7.5] {
            let l = leaf(&mut t, &[x, x], 1, 2);
            let ce = t.cross_entropy(l, &[0]).unwrap();
            assert!((t.value(ce)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let l = leaf(&mut t, &[1000.0, 0.0], 1, 2);
        let ce = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.value(ce)[0].abs() < 1e-12);

        let l = leaf(&mut t, &[1.0, 0.0], 1, 2);
        let ce = t.cross_entropy(l, &[1]).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((t.value(ce)[0] - expected).abs() < 1e-12);
        assert!((expected - 1.3133).abs() < 1e-4);

        assert!(t.cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::<f64>::detached();
        let w = leaf(&mut t, &[0.3, -1.0, 2.0], 1, 3);
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.leaf(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::detached();
        let w = leaf(&mut t, &[2.0], 1, 1);
        let sq = t.mul(w, w).unwrap();
        let half = t.scale(sq, 0.5);
        let g = t.backward(half).unwrap();
        assert_eq!(g.leaf(w).unwrap(), &[2.0]);

        let w = leaf(&mut t, &[1.0, 2.0], 1, 2);
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store
            .insert("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true))
            .unwrap();
        let b = store.insert("b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let mut t = Tape::new(&store);
        let va = t.param(a);
        let vb = t.param(b);
        let p = t.mul(va, vb).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.param(a).unwrap(), &[3.0, 4.0]);
        assert!(g.param(b).is_none());
    }

    #[test]
    fn inference_tape_records_no_dependencies() {
        let mut store = ParamStore::<f32>::new();
        let a = store
            .insert("a", Tensor::new(vec![1], vec![1.0]).unwrap().with_requires_grad(true))
            .unwrap();
        let mut t = Tape::inference(&store);
        let va = t.param(a);
        let s = t.sum(va);
        assert!(!t.requires_grad(s));
        assert!(t.backward(s).unwrap().param(a).is_none());
    }
}
