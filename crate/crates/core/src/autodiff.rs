//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! replays the tape from a scalar output towards the leaves, touching only
//! nodes that depend on a trainable leaf.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Tanh(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    GatherCols(Var, Vec<usize>),
    ScatterCols(Vec<(Var, Vec<usize>)>),
    Conv3x3 {
        input: Var,
        kernel: [f64; 9],
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            Error::shape(
                op,
                format!(
                    "node {} has shape {:?}, expected rank 2",
                    v.0,
                    self.value(v).shape()
                ),
            )
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "node {} {:?} vs node {} {:?}",
                    a.0,
                    self.value(a).shape(),
                    b.0,
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    /// `[n,k] @ [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("node {} is {n}x{k} but node {} is {k2}x{m}", a.0, b.0),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
            &mut out,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![n, m], out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Adds a length-`m` row vector to every row of an `[n,m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "add_row", |x, r| x + r)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of an `[n,m]` matrix elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(a, row, "mul_row", |x, r| x * r)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    fn row_broadcast(
        &self,
        a: Var,
        row: Var,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (n, m) = self.dims2(a, op)?;
        let r = self.value(row);
        if r.shape() != [m] {
            return Err(Error::shape(
                op,
                format!(
                    "row node {} has shape {:?}, expected [{m}]",
                    row.0,
                    r.shape()
                ),
            ));
        }
        let src = self.value(a).data();
        let rd = r.data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(
                src[i * m..(i + 1) * m]
                    .iter()
                    .zip(rd)
                    .map(|(&x, &y)| f(x, y)),
            );
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, Op::Offset(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum `[n,m] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2(a, "sum_cols")?;
        let src = self.value(a).data();
        let out = (0..n)
            .map(|i| src[i * m..(i + 1) * m].iter().sum())
            .collect();
        self.push(
            "sum_cols",
            Tensor::from_parts(vec![n], out),
            Op::SumCols(a),
            &[a],
        )
    }

    /// Selects columns `[n,m] -> [n, idx.len()]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2(a, "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::shape(
                "gather_cols",
                format!("column {bad} out of range for width {m}"),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * idx.len());
        for i in 0..n {
            out.extend(idx.iter().map(|&j| src[i * m + j]));
        }
        let t = Tensor::from_parts(vec![n, idx.len()], out);
        self.push("gather_cols", t, Op::GatherCols(a, idx.to_vec()), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_cols(a, &idx)
    }

    /// Assembles an `[n, width]` matrix whose columns `idx` come from the
    /// matching part. The index sets must partition `0..width`.
    pub fn scatter_cols(&mut self, parts: &[(Var, Vec<usize>)], width: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("scatter_cols needs at least one part"))?;
        let (n, _) = self.dims2(first.0, "scatter_cols")?;
        let mut seen = vec![false; width];
        let mut out = vec![0.0; n * width];
        for (v, idx) in parts {
            let (rows, cols) = self.dims2(*v, "scatter_cols")?;
            if rows != n || cols != idx.len() {
                return Err(Error::shape(
                    "scatter_cols",
                    format!(
                        "part node {} is {rows}x{cols}, expected {n}x{}",
                        v.0,
                        idx.len()
                    ),
                ));
            }
            for &j in idx {
                if j >= width || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::shape(
                        "scatter_cols",
                        format!("column {j} invalid or repeated"),
                    ));
                }
            }
            let src = self.value(*v).data();
            for i in 0..n {
                for (c, &j) in idx.iter().enumerate() {
                    out[i * width + j] = src[i * cols + c];
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape(
                "scatter_cols",
                "index sets do not cover every column",
            ));
        }
        let parents: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::from_parts(vec![n, width], out);
        self.push("scatter_cols", t, Op::ScatterCols(parts.to_vec()), &parents)
    }

    /// Cross-correlates each row, viewed as a `height x width` image, with a
    /// fixed 3x3 kernel under replicate padding.
    pub fn conv3x3(
        &mut self,
        a: Var,
        kernel: [f64; 9],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let (n, m) = self.dims2(a, "conv3x3")?;
        if m != height * width {
            return Err(Error::shape(
                "conv3x3",
                format!("row length {m} is not {height}x{width}"),
            ));
        }
        if height < 3 || width < 3 {
            return Err(Error::shape(
                "conv3x3",
                format!("{height}x{width} field is smaller than the 3x3 kernel"),
            ));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for s in 0..n {
            conv3x3_forward(
                &src[s * m..(s + 1) * m],
                &kernel,
                height,
                width,
                &mut out[s * m..(s + 1) * m],
            );
        }
        let t = Tensor::from_parts(vec![n, m], out);
        self.push(
            "conv3x3",
            t,
            Op::Conv3x3 {
                input: a,
                kernel,
                height,
                width,
            },
            &[a],
        )
    }

    /// Gradients of the scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output node {} has shape {:?}, expected a scalar",
                    out.0,
                    self.value(out).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).dims2().unwrap().1;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &|s| gemm_bt(g, bd, n, m, k, s));
                acc(*b, &|s| gemm_at(ad, g, n, k, m, s));
            }
            Op::AddRow(a, r) => {
                let m = self.value(*r).len();
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*r, &|s| {
                    for row in g.chunks(m) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let m = self.value(*r).len();
                let ad = self.value(*a).data();
                let rd = self.value(*r).data();
                acc(*a, &|s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i] * rd[i % m];
                    }
                });
                acc(*r, &|s| {
                    for (i, (&gi, &ai)) in g.iter().zip(ad).enumerate() {
                        s[i % m] += gi * ai;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| axpy(s, g, 1.0));
                acc(*b, &|s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                acc(*a, &|s| elementwise_acc(s, g, bd, |x| x));
                acc(*b, &|s| elementwise_acc(s, g, ad, |x| x));
            }
            Op::Scale(a, c) => acc(*a, &|s| axpy(s, g, *c)),
            Op::Offset(a) => acc(*a, &|s| axpy(s, g, 1.0)),
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                acc(*a, &|s| {
                    elementwise_acc(s, g, ad, |x| if x > 0.0 { 1.0 } else { 0.0 })
                });
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                acc(*a, &|s| elementwise_acc(s, g, ad, sigmoid));
            }
            Op::Exp(a) => acc(*a, &|s| elementwise_acc(s, g, val, |y| y)),
            Op::Tanh(a) => acc(*a, &|s| elementwise_acc(s, g, val, |y| 1.0 - y * y)),
            Op::Square(a) => {
                let ad = self.value(*a).data();
                acc(*a, &|s| elementwise_acc(s, g, ad, |x| 2.0 * x));
            }
            Op::Clamp(a, lo, hi) => {
                let ad = self.value(*a).data();
                let (lo, hi) = (*lo, *hi);
                acc(*a, &|s| {
                    elementwise_acc(s, g, ad, |x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::SumCols(a) => {
                let (_, m) = self.value(*a).dims2().unwrap();
                acc(*a, &|s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i / m];
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let (_, m) = self.value(*a).dims2().unwrap();
                let k = idx.len();
                acc(*a, &|s| {
                    for (i, grow) in g.chunks(k).enumerate() {
                        for (c, &j) in idx.iter().enumerate() {
                            s[i * m + j] += grow[c];
                        }
                    }
                });
            }
            Op::ScatterCols(parts) => {
                let width = node.value.dims2().unwrap().1;
                for (v, idx) in parts {
                    let k = idx.len();
                    acc(*v, &|s| {
                        for (i, grow) in g.chunks(width).enumerate() {
                            for (c, &j) in idx.iter().enumerate() {
                                s[i * k + c] += grow[j];
                            }
                        }
                    });
                }
            }
            Op::Conv3x3 {
                input,
                kernel,
                height,
                width,
            } => {
                let m = height * width;
                acc(*input, &|s| {
                    for (gs, ss) in g.chunks(m).zip(s.chunks_mut(m)) {
                        conv3x3_adjoint(gs, kernel, *height, *width, ss);
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(
            tape.value(v).shape().to_vec(),
            g.clone(),
        ))
    }

    /// Gradient for `v`, zeros if it does not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(tape, v)
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Tape leaves for every entry of a [`ParamStore`].
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    /// Registers every entry as a trainable leaf.
    pub fn trainable(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, true)
    }

    /// Registers every entry as a constant.
    pub fn frozen(tape: &mut Tape, store: &ParamStore) -> Self {
        Self::bind(tape, store, false)
    }

    fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("program references unknown parameter `{name}`")))
    }

    /// Collects per-parameter gradients into a store shaped like `store`.
    pub fn collect(
        &self,
        tape: &Tape,
        grads: &Gradients,
        store: &ParamStore,
    ) -> Result<ParamStore> {
        let mut out = ParamStore::new(store.rng_seed);
        for (name, _) in store.iter() {
            out.insert(name, grads.wrt(tape, self.get(name)?))?;
        }
        Ok(out)
    }
}

/// Runs `program` on a fresh tape with `params` bound as trainable leaves
/// and `inputs` as a constant, returning the scalar output and its gradient
/// with respect to every parameter.
pub fn evaluate_with_gradients<F>(
    params: &ParamStore,
    inputs: &Tensor,
    program: F,
) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Tape, &Bindings, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bindings = Bindings::trainable(&mut tape, params);
    let input = tape.constant(inputs.clone());
    let out = program(&mut tape, &bindings, input)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    Ok((value, bindings.collect(&tape, &grads, params)?))
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn elementwise_acc(dst: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64) -> f64) {
    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x) {
        *d += gi * f(xi);
    }
}

/// `out[n,m] += a[n,k] @ b[k,m]`
pub(crate) fn gemm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,k] += g[n,m] @ b[k,m]^T`
fn gemm_bt(g: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,m] += a[n,k]^T @ g[n,m]`
fn gemm_at(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn conv3x3_forward(f: &[f64], k: &[f64; 9], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..3 {
                let r = clamp_index(i as isize + a as isize - 1, h);
                for b in 0..3 {
                    let c = clamp_index(j as isize + b as isize - 1, w);
                    acc += k[a * 3 + b] * f[r * w + c];
                }
            }
            out[i * w + j] = acc;
        }
    }
}

fn conv3x3_adjoint(g: &[f64], k: &[f64; 9], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let gij = g[i * w + j];
            if gij == 0.0 {
                continue;
            }
            for a in 0..3 {
                let r = clamp_index(i as isize + a as isize - 1, h);
                for b in 0..3 {
                    let c = clamp_index(j as isize + b as isize - 1, w);
                    out[r * w + c] += k[a * 3 + b] * gij;
                }
            }
        }
    }
}
