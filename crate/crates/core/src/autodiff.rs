//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created earlier, so replaying the tape from the end visits each node after
//! all of its consumers. Parameters are leaves registered under a name;
//! [`Graph::backward`] returns gradients for those names only.
//!
//! Every operation checks its output for NaN or infinity and reports
//! [`Error::NonFinite`] instead of letting it reach the parameters.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Square,
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddBias(Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Reduce(ReduceOp, Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, width: usize },
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<String>,
}

/// Numerically safe `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Gradients of a scalar loss keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

impl From<BTreeMap<String, Tensor>> for Gradients {
    fn from(grads: BTreeMap<String, Tensor>) -> Self {
        Self { grads }
    }
}

/// Computation tape built during one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Output shape of a reduction and, for each input element, the flat index it
/// reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() || reduced[a] {
            return Err(Error::dim(format!("invalid reduction axis {a} for shape {shape:?}")));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    // stride of each kept input axis within the output
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            out_strides[ax] = stride;
            stride *= shape[ax];
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok((out_shape, map))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`] under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        let v = self.push(&name.clone(), value, Op::Leaf)?;
        self.nodes[v.0].param = Some(name);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    /// Elementwise binary operation. Shapes must match unless one operand
    /// holds a single value, which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if op == BinaryOp::Div && tb.data().iter().any(|&d| d <= 0.0) {
            return Err(Error::Domain("division by a non-positive value".into()));
        }
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let value = if ta.shape() == tb.shape() {
            ta.zip_with(tb, f)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::dim(format!(
                "{op:?} operands {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        self.push("binary", value, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2()?;
        if tb.shape() != [n] {
            return Err(Error::dim(format!("bias {:?} for matrix {:?}", tb.shape(), tx.shape())));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_bias", value, Op::AddBias(x, bias))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = match op {
            UnaryOp::Exp => tx.map(f64::exp),
            UnaryOp::Log => {
                if tx.data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain("log of a non-positive value".into()));
                }
                tx.map(f64::ln)
            }
            UnaryOp::Square => tx.map(|v| v * v),
            UnaryOp::Softplus => tx.map(softplus),
            UnaryOp::Relu => tx.map(|v| v.max(0.0)),
        };
        self.push("unary", value, Op::Unary(op, x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        self.push("scale", value, Op::Scale(x, k))
    }

    /// Reduces over `axes`, removing them from the shape. An empty axis list
    /// is the identity.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (out_shape, map) = reduce_map(tx.shape(), axes)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in tx.data().iter().zip(&map) {
            out[o] += v;
        }
        if op == ReduceOp::Mean {
            let count = (tx.numel() / out.len()) as f64;
            out.iter_mut().for_each(|v| *v /= count);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("reduce", value, Op::Reduce(op, x, axes.to_vec()))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.mean(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Concatenates 2-D tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::dim("concat operands differ in row count"));
            }
            widths.push(c);
        }
        let rows = rows.ok_or_else(|| Error::dim("concat of nothing"))?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::dim(format!(
                "slice {start}..{} of {cols} columns",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new(vec![rows, width], out)?;
        self.push("slice", value, Op::Slice { x, start, width })
    }

    /// Splits an even last dimension `2D` into two halves of width `D`.
    pub fn split_last(&mut self, x: Var) -> Result<(Var, Var)> {
        let (_, cols) = self.value(x).dims2()?;
        if cols % 2 != 0 {
            return Err(Error::dim(format!("cannot halve {cols} columns")));
        }
        let half = cols / 2;
        Ok((self.slice_last(x, 0, half)?, self.slice_last(x, half, half)?))
    }

    /// Selects rows of a 2-D tensor by index; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if index.is_empty() {
            return Err(Error::dim("gather with no rows"));
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::dim(format!("row {i} out of {rows}")));
            }
            out.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        self.push("gather", value, Op::GatherRows(x, index.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(upstream);
                continue;
            }
            for (parent, contrib) in self.local_grads(node, &upstream)? {
                accumulate(&mut grads[parent.0], contrib)?;
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Some(name) = &node.param {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                check_finite(&format!("gradient of {name}"), &g)?;
                match out.get_mut(name) {
                    Some(existing) => add_assign(existing, &g)?,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(up.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(ta.data(), up.data(), &mut gb, m, k, n);
                vec![(*a, Tensor::new(vec![m, k], ga)?), (*b, Tensor::new(vec![k, n], gb)?)]
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = up.numel();
                let av = |i: usize| if ta.numel() == 1 { ta.data()[0] } else { ta.data()[i] };
                let bv = |i: usize| if tb.numel() == 1 { tb.data()[0] } else { tb.data()[i] };
                let (da, db): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| {
                        let g = up.data()[i];
                        match op {
                            BinaryOp::Add => (g, g),
                            BinaryOp::Sub => (g, -g),
                            BinaryOp::Mul => (g * bv(i), g * av(i)),
                            BinaryOp::Div => {
                                let y = bv(i);
                                (g / y, -g * av(i) / (y * y))
                            }
                        }
                    })
                    .unzip();
                vec![
                    (*a, collapse_broadcast(da, up.shape(), ta.shape())?),
                    (*b, collapse_broadcast(db, up.shape(), tb.shape())?),
                ]
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in up.data().chunks(n) {
                    for (g, &u) in gb.iter_mut().zip(row) {
                        *g += u;
                    }
                }
                vec![(*x, up.clone()), (*bias, Tensor::from_vec(gb))]
            }
            Op::Unary(op, x) => {
                let tx = self.value(*x);
                let g = match op {
                    UnaryOp::Exp => up.zip_with(out, |u, y| u * y)?,
                    UnaryOp::Log => up.zip_with(tx, |u, v| u / v)?,
                    UnaryOp::Square => up.zip_with(tx, |u, v| 2.0 * u * v)?,
                    UnaryOp::Softplus => up.zip_with(tx, |u, v| u * sigmoid(v))?,
                    UnaryOp::Relu => up.zip_with(tx, |u, v| if v > 0.0 { u } else { 0.0 })?,
                };
                vec![(*x, g)]
            }
            Op::Scale(x, k) => vec![(*x, up.map(|u| u * k))],
            Op::Reduce(op, x, axes) => {
                let tx = self.value(*x);
                let (_, map) = reduce_map(tx.shape(), axes)?;
                let k = match op {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => (tx.numel() / up.numel()) as f64,
                };
                let g = map.iter().map(|&o| up.data()[o] / k).collect();
                vec![(*x, Tensor::new(tx.shape().to_vec(), g)?)]
            }
            Op::Reshape(x) => vec![(*x, up.reshape(self.value(*x).shape())?)],
            Op::Concat(parts) => {
                let (rows, total) = up.dims2()?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&up.data()[r * total + offset..r * total + offset + w]);
                    }
                    res.push((p, Tensor::new(vec![rows, w], g)?));
                    offset += w;
                }
                res
            }
            Op::Slice { x, start, width } => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&up.data()[r * width..(r + 1) * width]);
                }
                vec![(*x, Tensor::new(vec![rows, cols], g)?)]
            }
            Op::GatherRows(x, index) => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut g = vec![0.0; rows * cols];
                for (k, &i) in index.iter().enumerate() {
                    for (o, &u) in g[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&up.data()[k * cols..(k + 1) * cols])
                    {
                        *o += u;
                    }
                }
                vec![(*x, Tensor::new(vec![rows, cols], g)?)]
            }
        })
    }
}

fn collapse_broadcast(g: Vec<f64>, full: &[usize], target: &[usize]) -> Result<Tensor> {
    if full == target {
        Tensor::new(full.to_vec(), g)
    } else {
        Tensor::new(target.to_vec(), vec![g.iter().sum()])
    }
}

fn add_assign(acc: &mut Tensor, g: &Tensor) -> Result<()> {
    if acc.shape() != g.shape() {
        return Err(Error::dim("gradient shape mismatch during accumulation"));
    }
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => add_assign(acc, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-9);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus_inv(1.0) - 0.541_324_854_612_918_1).abs() < 1e-12);
        assert!((softplus(softplus_inv(0.3)) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[3], &[0.3, -1.0, 7.0])).unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.square(p).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = g.mean_all(p).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 2.5);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reduce_over_empty_axes_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.sum(x, &[]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn reduce_middle_axis() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()))
            .unwrap();
        let y = g.sum(x, &[1]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[6.0, 9.0, 24.0, 27.0]);
        assert!(g.sum(x, &[3]).is_err());
        assert!(g.sum(x, &[1, 1]).is_err());
    }

    #[test]
    fn errors_on_bad_inputs() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[1.0; 6])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
        let neg = g.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.log(neg), Err(Error::Domain(_))));
        let c = g.constant(t(&[3], &[1.0; 3])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
        let big = g.constant(t(&[1], &[800.0])).unwrap();
        assert!(matches!(g.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn split_then_concat_round_trips() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]))
            .unwrap();
        let (l, r) = g.split_last(x).unwrap();
        assert_eq!(g.value(l).data(), &[1.0, 2.0, 5.0, 6.0]);
        let back = g.concat_last(&[l, r]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn reshape_round_trips() {
        let mut g = Graph::new();
        let x = g
            .constant(t(&[4, 6], &(0..24).map(f64::from).collect::<Vec<_>>()))
            .unwrap();
        let flat = g.reshape(x, &[24]).unwrap();
        let back = g.reshape(flat, &[4, 6]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.reshape(x, &[25]).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[3.0, -1.0])).unwrap();
        let a = g.square(p).unwrap();
        let b = g.scale(p, 5.0).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum_all(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[11.0, 3.0]);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let k = g.param("k", Tensor::scalar(2.0)).unwrap();
        let y = g.mul(x, k).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("k").unwrap().data(), &[6.0]);
        assert_eq!(grads.get("x").unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[1.0, 1.0])).unwrap();
        let _q = g.param("q", t(&[3], &[1.0; 3])).unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("q").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
