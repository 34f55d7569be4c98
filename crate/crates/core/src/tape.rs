//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass along
//! with its output value. [`Tape::backward`] then walks the record in
//! reverse, applying each primitive's adjoint rule. Nodes are appended in
//! evaluation order, so operands always precede their consumers and the
//! reverse walk is a valid topological order.
//!
//! Leaves are either constants or parameters. Only parameters (and the
//! nodes that depend on them) receive adjoints; anything built purely from
//! constants is skipped during the reverse walk.
//!
//! ```
//! use mmtta::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::from_rows(&[[2.0], [3.0]]));
//! let x = tape.constant(Tensor::from_rows(&[[1.0, 4.0]]));
//! let y = tape.matmul(x, w).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! // d(x·w)/dw = xᵀ
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    /// `ln(max(x, floor))`; the adjoint is zero where the floor is active.
    Log(Var, f64),
    MeanRows(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`. Every parameter on the
    /// tape has an entry (zero when the output does not depend on it);
    /// constants have none.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Param, t, true);
        self.params.push(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    /// `x[B×N] + bias[1×N]` with the bias repeated per row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let g = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRow(x, bias), value, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scale(k);
        let g = self.needs(x);
        self.push(Op::Scale(x, k), value, g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let g = self.needs(x);
        self.push(Op::Relu(x), value, g)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let g = self.needs(x);
        self.push(Op::SoftmaxRows(x), value, g)
    }

    /// Natural log with inputs clamped from below at `floor`.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let g = self.needs(x);
        self.push(Op::Log(x, floor), value, g)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_rows();
        let g = self.needs(x);
        self.push(Op::MeanRows(x), value, g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let g = self.needs(x);
        self.push(Op::Sum(x), value, g)
    }

    /// Adjoints of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::full(out_val.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let n = g.cols();
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut adj, *bias, Tensor::new(shape, gb)?)?;
                    }
                    if self.needs(*x) {
                        accumulate(&mut adj, *x, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.mul(self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = g.mul(self.value(*a))?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::Scale(x, k) => {
                    accumulate(&mut adj, *x, g.scale(*k))?;
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), "relu_adjoint", |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::SoftmaxRows(x) => {
                    // dx = y ⊙ (dy − rowsum(dy ⊙ y))
                    let y = &node.value;
                    let n = y.cols();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    accumulate(&mut adj, *x, Tensor::new(y.shape().to_vec(), gx)?)?;
                }
                Op::Log(x, floor) => {
                    let floor = *floor;
                    let gx = g.zip_map(self.value(*x), "log_adjoint", |gv, xv| {
                        if xv > floor {
                            gv / xv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let b = xv.rows() as f64;
                    let n = xv.cols();
                    let mut gx = Vec::with_capacity(xv.len());
                    for _ in 0..xv.rows() {
                        gx.extend(g.data().iter().map(|v| v / b));
                    }
                    debug_assert_eq!(g.len(), n);
                    accumulate(&mut adj, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                Op::Sum(x) => {
                    let s = g.item()?;
                    accumulate(&mut adj, *x, Tensor::full(self.value(*x).shape(), s))?;
                }
            }
        }

        for &p in &self.params {
            if adj[p.0].is_none() {
                adj[p.0] = Some(Tensor::zeros(self.value(p).shape()));
            }
        }
        // Only parameters keep their adjoints; intermediates were consumed.
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for &p in &self.params {
            grads[p.0] = adj[p.0].take();
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
