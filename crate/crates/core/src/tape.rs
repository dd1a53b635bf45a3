//! Explicit, per-computation tape for reverse-mode differentiation.
//!
//! ```
//! use tcav_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.reduce_sum(sq).unwrap();
//! let grads = tape.gradient(y, &[x]).unwrap();
//! assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, Padding};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Operation that produced a node, with its input ids and whatever the
/// backward pass needs beyond the input values.
#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        geometry: ConvGeometry,
    },
    Relu(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Tensor,
        labels: Vec<usize>,
    },
    ReduceSum(usize),
    Reshape(usize),
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: OpKind,
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<TapeNode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    fn push(&mut self, op: OpKind, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&TapeNode> {
        if v.tape != self.id {
            return Err(Error::Detached(v.index));
        }
        self.nodes.get(v.index).ok_or(Error::Detached(v.index))
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl Fn(usize, usize) -> OpKind,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let value = f(&na.value, &nb.value)?;
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(op(a.index, b.index), value, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(&Tensor) -> Result<Tensor>, op: OpKind) -> Result<Var> {
        let na = self.node(a)?;
        let value = f(&na.value)?;
        let rg = na.requires_grad;
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, ops::add, OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, ops::sub, OpKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, ops::mul, OpKind::Mul)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, ops::matmul, OpKind::MatMul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |t| Ok(ops::scale(t, c)), OpKind::Scale(a.index, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(ops::relu(t)), OpKind::Relu(a.index))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |t| Ok(ops::reduce_sum(t)), OpKind::ReduceSum(a.index))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.unary(a, ops::flatten, OpKind::Reshape(a.index))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, |t| t.reshape(shape), OpKind::Reshape(a.index))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (nx, nw) = (self.node(x)?, self.node(w)?);
        let geometry = ConvGeometry::resolve(nx.value.shape(), nw.value.shape(), stride, padding)?;
        let value = ops::conv2d(&nx.value, &nw.value, stride, padding)?;
        let rg = nx.requires_grad || nw.requires_grad;
        Ok(self.push(
            OpKind::Conv2d {
                x: x.index,
                w: w.index,
                geometry,
            },
            value,
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let nl = self.node(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&nl.value, labels)?;
        let rg = nl.requires_grad;
        Ok(self.push(
            OpKind::SoftmaxCrossEntropy {
                logits: logits.index,
                probs,
                labels: labels.to_vec(),
            },
            loss,
            rg,
        ))
    }

    /// Returns d`output`/d`w` for each `w` in `wrt`.
    ///
    /// `output` must hold a single value. Constants, and variables recorded
    /// on another tape, are rejected as detached; a variable the output does
    /// not depend on gets a zero gradient.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out_node = self.node(output)?;
        if out_node.value.len() != 1 {
            return Err(Error::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        for &w in wrt {
            if !self.node(w)?.requires_grad {
                return Err(Error::Detached(w.index));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.index + 1];
        if out_node.requires_grad {
            grads[output.index] = Some(vec![1.0]);
        }
        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.nodes[w.index].value.shape().to_vec();
                match grads.get_mut(w.index).and_then(Option::take) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |j: usize| self.nodes[j].requires_grad;
        let value = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            OpKind::Leaf | OpKind::Constant => {}
            OpKind::Add(a, b) | OpKind::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, OpKind::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    let mut gb = ops::reduce_to_period(g, value(*b).len());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            OpKind::Mul(a, b) => {
                let (va, vb) = (value(*a).data(), value(*b).data());
                let period = vb.len();
                if needs(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * vb[k % period])
                        .collect();
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(va).map(|(gv, av)| gv * av).collect();
                    accumulate(grads, *b, ops::reduce_to_period(&prod, period));
                }
            }
            OpKind::Scale(a, c) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().map(|v| v * c).collect());
                }
            }
            OpKind::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(value(*a), value(*b), g, needs(*a), needs(*b));
                if let Some(ga) = ga {
                    accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, gb);
                }
            }
            OpKind::Conv2d { x, w, geometry } => {
                let (gx, gw) =
                    ops::conv2d_backward(value(*x), value(*w), g, geometry, needs(*x), needs(*w));
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
            }
            OpKind::Relu(a) => {
                if needs(*a) {
                    let ga = g
                        .iter()
                        .zip(value(*a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, ga);
                }
            }
            OpKind::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                if needs(*logits) {
                    let k = probs.shape()[1];
                    let n = labels.len() as f64;
                    let mut gl: Vec<f64> = probs.data().iter().map(|p| p * g[0] / n).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        gl[row * k + label] -= g[0] / n;
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            OpKind::ReduceSum(a) => {
                if needs(*a) {
                    accumulate(grads, *a, vec![g[0]; value(*a).len()]);
                }
            }
            OpKind::Reshape(a) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, g: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}
