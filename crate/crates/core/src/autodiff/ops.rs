//! Primitive operations and their backward rules.
//!
//! Elementwise binary ops accept either identical shapes or a right-hand
//! side whose shape equals the trailing dimensions of the left-hand side
//! (broadcast over the leading batch dimension). Nothing else broadcasts.

use super::tape::{CustomOp, Node, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) enum Op {
    Add { lhs: usize, rhs: usize, bcast: bool },
    Sub { lhs: usize, rhs: usize, bcast: bool },
    Mul { lhs: usize, rhs: usize, bcast: bool },
    Div { lhs: usize, rhs: usize, bcast: bool },
    MatMul { lhs: usize, rhs: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumAxis { input: usize, axis: usize },
    Scale { input: usize, factor: f64 },
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Pow { input: usize, exponent: f64 },
    Relu(usize),
    Silu(usize),
    Square(usize),
    Abs(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
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

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Returns `Some(true)` for a row broadcast, `Some(false)` for an exact match.
fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<bool> {
    if lhs == rhs {
        return Some(false);
    }
    if lhs.len() >= 2 {
        let tail = &lhs[1..];
        if rhs == tail || (rhs.len() == lhs.len() && rhs[0] == 1 && &rhs[1..] == tail) {
            return Some(true);
        }
    }
    None
}

fn sum_rows_into(g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for chunk in g.chunks(width) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let v = self.value();
        let data: Vec<f64> = v.data().iter().map(|&x| f(x)).collect();
        check_finite(name, &data)?;
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.tape.push(out, self.requires_grad(), Some(op(self.id))))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize, bool) -> Op,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let bcast = broadcast_kind(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let bd = b.data();
        let w = bd.len().max(1);
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[if bcast { i % w } else { i }]))
            .collect();
        check_finite(name, &data)?;
        let rg = self.requires_grad() || rhs.requires_grad();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.tape.push(out, rg, Some(op(self.id, rhs.id, bcast))))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, |lhs, rhs, bcast| Op::Add { lhs, rhs, bcast })
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, |lhs, rhs, bcast| Op::Sub { lhs, rhs, bcast })
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, |lhs, rhs, bcast| Op::Mul { lhs, rhs, bcast })
    }

    pub fn div(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let b = rhs.value();
        if let Some(index) = b.data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary(rhs, "div", |a, b| a / b, |lhs, rhs, bcast| Op::Div { lhs, rhs, bcast })
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (n, k) = dims2("matmul", &a)?;
        let (k2, m) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = matmul_raw(a.data(), b.data(), n, k, m);
        check_finite("matmul", &out)?;
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, m], out),
            rg,
            Some(Op::MatMul {
                lhs: self.id,
                rhs: rhs.id,
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (n, m) = dims2("transpose", &a)?;
        let d = a.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            self.requires_grad(),
            Some(Op::Transpose(self.id)),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), a.data().to_vec()),
            self.requires_grad(),
            Some(Op::Reshape(self.id)),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.value().data().iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.tape.push(
            Tensor::from_parts(vec![], vec![s]),
            self.requires_grad(),
            Some(Op::Sum(self.id)),
        ))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Reduces a matrix along `axis`: 0 gives per-column sums `[m]`,
    /// 1 gives per-row sums `[n]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (n, m) = dims2("sum_axis", &a)?;
        let d = a.data();
        let out = match axis {
            0 => sum_rows_into(d, m),
            1 => d.chunks(m.max(1)).map(|r| r.iter().sum()).take(n).collect(),
            _ => return Err(Error::invalid(format!("sum_axis: axis {axis}"))),
        };
        check_finite("sum_axis", &out)?;
        let len = out.len();
        Ok(self.tape.push(
            Tensor::from_parts(vec![len], out),
            self.requires_grad(),
            Some(Op::SumAxis {
                input: self.id,
                axis,
            }),
        ))
    }

    /// Column means of a matrix, `[n, m] -> [m]`.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let n = self.value().rows();
        if n == 0 {
            return Err(Error::invalid("mean_rows of an empty matrix"));
        }
        self.sum_axis(0)?.scale(1.0 / n as f64)
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * factor, |input| Op::Scale { input, factor })
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some((index, &value)) = self
            .value()
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn pow(&self, exponent: f64) -> Result<Var<'t>> {
        let integral = exponent.fract() == 0.0;
        if let Some((index, &value)) = self.value().data().iter().enumerate().find(|(_, &v)| {
            (v < 0.0 && !integral) || (v == 0.0 && exponent < 1.0 && exponent != 0.0)
        }) {
            return Err(Error::Domain {
                op: "pow",
                index,
                value,
            });
        }
        self.unary("pow", |x| x.powf(exponent), |input| Op::Pow { input, exponent })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary("silu", silu, Op::Silu)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, Op::Square)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, Op::Abs)
    }

    /// Concatenates matrices (or vectors, along axis 0).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        let (shape, data) = match (axis, s0.len()) {
            (0, 1) | (0, 2) => {
                let mut rows = 0;
                let mut data = Vec::new();
                for v in &values {
                    if v.shape().len() != s0.len() || v.shape()[1..] != s0[1..] {
                        return Err(Error::Shape {
                            op: "concat",
                            lhs: s0,
                            rhs: v.shape().to_vec(),
                        });
                    }
                    rows += v.shape()[0];
                    data.extend_from_slice(v.data());
                }
                let mut shape = s0.clone();
                shape[0] = rows;
                (shape, data)
            }
            (1, 2) => {
                let n = s0[0];
                let mut widths = Vec::with_capacity(values.len());
                for v in &values {
                    match v.shape() {
                        [r, c] if *r == n => widths.push(*c),
                        s => {
                            return Err(Error::Shape {
                                op: "concat",
                                lhs: s0,
                                rhs: s.to_vec(),
                            })
                        }
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(n * total);
                for r in 0..n {
                    for (v, &w) in values.iter().zip(&widths) {
                        data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                    }
                }
                (vec![n, total], data)
            }
            _ => return Err(Error::invalid(format!("concat: axis {axis} for rank {}", s0.len()))),
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            Tensor::from_parts(shape, data),
            rg,
            Some(Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            }),
        ))
    }

    /// Gathers rows (leading-dimension slices) by index.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("index_select: row {bad} of {n}")));
        }
        let out = a.select_rows(indices);
        Ok(self.tape.push(
            out,
            self.requires_grad(),
            Some(Op::IndexSelect {
                input: self.id,
                indices: indices.to_vec(),
            }),
        ))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (_, m) = dims2("softmax_rows", &a)?;
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        check_finite("softmax_rows", &out)?;
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            self.requires_grad(),
            Some(Op::SoftmaxRows(self.id)),
        ))
    }

    /// Row-wise `log(sum(exp(.)))`, `[n, m] -> [n]`.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (n, m) = dims2("logsumexp_rows", &a)?;
        if m == 0 {
            return Err(Error::invalid("logsumexp_rows over zero columns"));
        }
        let out: Vec<f64> = a.data().chunks(m).map(logsumexp).collect();
        check_finite("logsumexp_rows", &out)?;
        Ok(self.tape.push(
            Tensor::from_parts(vec![n], out),
            self.requires_grad(),
            Some(Op::LogSumExpRows(self.id)),
        ))
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

impl Op {
    /// Gradient contributions `(input id, d loss / d input)`.
    pub(crate) fn backward(&self, g: &[f64], out: &Tensor, nodes: &[Node]) -> Vec<(usize, Vec<f64>)> {
        let val = |id: usize| &*nodes[id].value;
        let rg = |id: usize| nodes[id].requires_grad;
        let map = |id: usize, f: &dyn Fn(usize, f64) -> f64| {
            let x = val(id).data();
            (id, g.iter().enumerate().map(|(i, &gi)| gi * f(i, x[i])).collect())
        };
        let reduce_rhs = |gr: Vec<f64>, rhs: usize, bcast: bool| {
            if bcast {
                sum_rows_into(&gr, val(rhs).numel())
            } else {
                gr
            }
        };
        match self {
            Op::Add { lhs, rhs, bcast } => {
                let mut v = vec![(*lhs, g.to_vec())];
                if rg(*rhs) {
                    v.push((*rhs, reduce_rhs(g.to_vec(), *rhs, *bcast)));
                }
                v
            }
            Op::Sub { lhs, rhs, bcast } => {
                let mut v = vec![(*lhs, g.to_vec())];
                if rg(*rhs) {
                    let neg = g.iter().map(|x| -x).collect();
                    v.push((*rhs, reduce_rhs(neg, *rhs, *bcast)));
                }
                v
            }
            Op::Mul { lhs, rhs, bcast } => {
                let a = val(*lhs).data();
                let b = val(*rhs).data();
                let w = b.len().max(1);
                let bi = |i: usize| if *bcast { i % w } else { i };
                let mut v = Vec::with_capacity(2);
                if rg(*lhs) {
                    v.push((*lhs, g.iter().enumerate().map(|(i, gi)| gi * b[bi(i)]).collect()));
                }
                if rg(*rhs) {
                    let gr = g.iter().zip(a).map(|(gi, ai)| gi * ai).collect();
                    v.push((*rhs, reduce_rhs(gr, *rhs, *bcast)));
                }
                v
            }
            Op::Div { lhs, rhs, bcast } => {
                let a = val(*lhs).data();
                let b = val(*rhs).data();
                let w = b.len().max(1);
                let bi = |i: usize| if *bcast { i % w } else { i };
                let mut v = Vec::with_capacity(2);
                if rg(*lhs) {
                    v.push((*lhs, g.iter().enumerate().map(|(i, gi)| gi / b[bi(i)]).collect()));
                }
                if rg(*rhs) {
                    let gr = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| -gi * a[i] / (b[bi(i)] * b[bi(i)]))
                        .collect();
                    v.push((*rhs, reduce_rhs(gr, *rhs, *bcast)));
                }
                v
            }
            Op::MatMul { lhs, rhs } => {
                let a = val(*lhs);
                let b = val(*rhs);
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                let mut v = Vec::with_capacity(2);
                if rg(*lhs) {
                    // dA = G B^T
                    let bt = transpose_raw(b.data(), k, m);
                    v.push((*lhs, matmul_raw(g, &bt, n, m, k)));
                }
                if rg(*rhs) {
                    // dB = A^T G
                    let at = transpose_raw(a.data(), n, k);
                    v.push((*rhs, matmul_raw(&at, g, k, n, m)));
                }
                v
            }
            Op::Transpose(input) => {
                let s = out.shape();
                vec![(*input, transpose_raw(g, s[0], s[1]))]
            }
            Op::Reshape(input) => vec![(*input, g.to_vec())],
            Op::Sum(input) => vec![(*input, vec![g[0]; val(*input).numel()])],
            Op::SumAxis { input, axis } => {
                let s = val(*input).shape();
                let (n, m) = (s[0], s[1]);
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] = if *axis == 0 { g[j] } else { g[i] };
                    }
                }
                vec![(*input, d)]
            }
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|x| x * factor).collect())],
            Op::AddScalar(input) => vec![(*input, g.to_vec())],
            Op::Exp(input) => {
                let y = out.data();
                vec![(*input, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())]
            }
            Op::Log(input) => vec![map(*input, &|_, x| 1.0 / x)],
            Op::Pow { input, exponent } => {
                let p = *exponent;
                vec![map(*input, &|_, x| if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) })]
            }
            Op::Relu(input) => vec![map(*input, &|_, x| if x > 0.0 { 1.0 } else { 0.0 })],
            Op::Silu(input) => vec![map(*input, &|_, x| silu_grad(x))],
            Op::Square(input) => vec![map(*input, &|_, x| 2.0 * x)],
            Op::Abs(input) => vec![map(*input, &|_, x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })],
            Op::Concat { inputs, axis } => {
                let mut v = Vec::with_capacity(inputs.len());
                if *axis == 0 {
                    let mut offset = 0;
                    for &id in inputs {
                        let len = val(id).numel();
                        if rg(id) {
                            v.push((id, g[offset..offset + len].to_vec()));
                        }
                        offset += len;
                    }
                } else {
                    let n = out.shape()[0];
                    let total = out.shape()[1];
                    let mut col = 0;
                    for &id in inputs {
                        let w = val(id).shape()[1];
                        if rg(id) {
                            let mut d = Vec::with_capacity(n * w);
                            for r in 0..n {
                                d.extend_from_slice(&g[r * total + col..r * total + col + w]);
                            }
                            v.push((id, d));
                        }
                        col += w;
                    }
                }
                v
            }
            Op::IndexSelect { input, indices } => {
                let src = val(*input);
                let c = src.cols();
                let mut d = vec![0.0; src.numel()];
                for (k, &row) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] += g[k * c + j];
                    }
                }
                vec![(*input, d)]
            }
            Op::SoftmaxRows(input) => {
                let m = out.shape()[1].max(1);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*input, d)]
            }
            Op::LogSumExpRows(input) => {
                let x = val(*input);
                let m = x.shape()[1];
                let lse = out.data();
                let mut d = vec![0.0; x.numel()];
                for (i, (dr, xr)) in d.chunks_mut(m).zip(x.data().chunks(m)).enumerate() {
                    for (dv, xv) in dr.iter_mut().zip(xr) {
                        *dv = g[i] * (xv - lse[i]).exp();
                    }
                }
                vec![(*input, d)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&i| rg(i)).collect();
                op.backward(g, &ins, out, &needs)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &id)| gi.map(|gi| (id, gi)))
                    .collect()
            }
        }
    }
}
