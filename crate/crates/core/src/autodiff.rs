//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly as ops are recorded; [`Tape::backward`] walks
//! the tape in reverse. A node takes part in the backward pass only if it
//! (transitively) depends on a leaf created with `requires_grad = true`, so
//! frozen networks evaluated on a tape cost nothing extra at backward time.
//!
//! The primitive set is deliberately small. Broadcasting exists only in
//! [`Tape::add_bias`] (row vector over rows) and [`Tape::scale_by`] (scalar
//! over a tensor).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamSet};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    Recip(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Silu(..) => "silu",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::Recip(..) => "recip",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variables bound to the parameters of a [`ParamSet`], by name.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Collect gradients for bound parameters. Parameters that received no
    /// gradient get zeros.
    pub fn collect(&self, tape: &Tape, vars: &ParamVars) -> Grads {
        vars.iter()
            .map(|(name, &v)| {
                let shape = tape.value(v).shape().to_vec();
                let t = match self.get(v) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect()
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

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A new constant holding the current value of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Record every parameter of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> ParamVars {
        params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone(), trainable)))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let name = op.name();
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[i, j] + bias[j]` for a rank-2 `a` and a bias with `cols(a)` values.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_bias")?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} values for {n} columns", b.numel()),
            ));
        }
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(b.data()) {
                *o += bj;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// Multiply every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must hold one value, has shape {:?}", sv.shape()),
            ));
        }
        let k = sv.item();
        let value = self.value(a).scale(k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row sums of a rank-2 tensor, as `[rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.value(a).dims2("sum_cols")?;
        let t = self.value(a);
        let data = (0..m).map(|i| t.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![m, 1], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumCols(a), rg))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let m = self.value(parts[0]).dims2("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            if r != m {
                return Err(Error::shape("concat", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{end} of {n} columns"),
            ));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let value = Tensor::new(vec![m, end - start], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    /// Name of the first recorded op whose output is not finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op.name())
    }

    /// Reverse pass from a single-valued `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
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
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let elementwise = |x: &[f64], slot: &mut [f64], d: &dyn Fn(usize, f64) -> f64| {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += g[i] * d(i, x[i]);
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                let n = self.nodes[b.0].value.cols();
                if needs(*a) {
                    let bv = val(*b);
                    acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s, 1.0));
                }
                if needs(*b) {
                    let av = val(*a);
                    acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s, 1.0));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| elementwise(bv, s, &|_, y| y));
                acc(*b, &mut |s| elementwise(av, s, &|_, x| x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| elementwise(bv, s, &|_, y| 1.0 / y));
                acc(*b, &mut |s| elementwise(bv, s, &|i, y| -av[i] / (y * y)));
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let n = self.nodes[bias.0].value.numel();
                acc(*bias, &mut |s| {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::ScaleBy(a, sc) => {
                let k = val(*sc)[0];
                let av = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
                acc(*sc, &mut |s| {
                    s[0] += g.iter().zip(av).map(|(g, x)| g * x).sum::<f64>();
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| elementwise(y, s, &|_, y| 1.0 - y * y));
            }
            Op::Silu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    elementwise(x, s, &|_, x| {
                        let sg = sigmoid(x);
                        sg * (1.0 + x * (1.0 - sg))
                    })
                });
            }
            Op::Sin(a) => {
                let x = val(*a);
                acc(*a, &mut |s| elementwise(x, s, &|_, x| x.cos()));
            }
            Op::Cos(a) => {
                let x = val(*a);
                acc(*a, &mut |s| elementwise(x, s, &|_, x| -x.sin()));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| elementwise(y, s, &|_, y| y));
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |s| elementwise(x, s, &|_, x| 1.0 / x));
            }
            Op::Sqrt(a) => {
                // The derivative at 0 is taken as 0 so that a vanishing norm
                // does not poison the whole backward pass.
                let y = node.value.data();
                acc(*a, &mut |s| {
                    elementwise(y, s, &|_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
                });
            }
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &mut |s| elementwise(x, s, &|_, x| sigmoid(x)));
            }
            Op::Recip(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| elementwise(y, s, &|_, y| -y * y));
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |s| elementwise(x, s, &|_, x| 2.0 * x));
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].value.cols();
                acc(*a, &mut |s| {
                    for (row, gi) in s.chunks_exact_mut(n).zip(g) {
                        row.iter_mut().for_each(|s| *s += gi);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    acc(p, &mut |s| {
                        for (row, grow) in s.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            row.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let n = self.nodes[a.0].value.cols();
                let w = end - start;
                acc(*a, &mut |s| {
                    for (row, grow) in s.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        row[*start..*end]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g);
                    }
                });
            }
        }
    }
}

/// Evaluate `graph` with every parameter of `params` trainable and return
/// the loss with its gradient for each parameter.
///
/// A non-finite loss is reported as [`Error::NonFinite`] naming the first
/// op that produced a non-finite value.
pub fn forward_backward<F>(params: &ParamSet, graph: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind(params, true);
    let loss = graph(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::shape(
            "forward_backward",
            format!("loss must be scalar, got {:?}", value.shape()),
        ));
    }
    let l = value.item();
    if !l.is_finite() {
        let op = tape.first_non_finite().unwrap_or("loss");
        return Err(Error::NonFinite { op });
    }
    let grads = tape.backward(loss)?;
    Ok((l, grads.collect(&tape, &vars)))
}
