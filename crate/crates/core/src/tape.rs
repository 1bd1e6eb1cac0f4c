//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. [`Tape::backward`] walks that record in reverse and accumulates
//! gradients for every leaf created with [`Tape::leaf`].
//!
//! ```
//! use geoalign_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::error::{Error, Result};
use crate::math;
use crate::ops;
use crate::tensor::{Grouping, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Conv {
        input: usize,
        weights: usize,
        dilation: usize,
        grouping: Grouping,
    },
    Pool(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    Sigmoid(usize),
    Abs(usize),
    Relu(usize),
    Softplus(usize),
    Sum(usize),
    MeanAxis {
        input: usize,
        axis: usize,
    },
    MaskedMean {
        input: usize,
        mask: Vec<bool>,
        count: usize,
    },
    Select {
        input: usize,
        axis: usize,
        index: usize,
    },
    Normalize {
        input: usize,
        axis: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(core::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            visited.push(id);
            let up = Tensor::new(node.value.shape().to_vec(), g)?;
            for (parent, pg) in local_gradients(&nodes, id, &up)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg.into_data()),
                }
            }
        }

        let mut leaves = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves.push((id, Tensor::new(node.value.shape().to_vec(), data)?));
            }
        }
        Ok(Gradients { leaves, visited })
    }
}

fn local_gradients(nodes: &[Node], id: usize, up: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = &nodes[id];
    let val = |i: usize| &*nodes[i].value;
    let out = &*node.value;
    let elementwise = |i: usize, f: &dyn Fn(f64, f64, f64) -> f64| -> Result<Vec<(usize, Tensor)>> {
        let x = val(i);
        let data = x
            .data()
            .iter()
            .zip(out.data())
            .zip(up.data())
            .map(|((&x, &y), &g)| f(x, y, g))
            .collect();
        Ok(vec![(i, Tensor::new(x.shape().to_vec(), data)?)])
    };
    let broadcast = |a: usize, b: usize, da: &dyn Fn(usize, usize) -> f64, db: &dyn Fn(usize, usize) -> f64| {
        let (sa, sb) = (val(a).shape(), val(b).shape());
        let ia = ops::broadcast_index(sa, out.shape());
        let ib = ops::broadcast_index(sb, out.shape());
        let ga: Vec<f64> = (0..ia.len()).map(|k| up.data()[k] * da(ia[k], ib[k])).collect();
        let gb: Vec<f64> = (0..ib.len()).map(|k| up.data()[k] * db(ia[k], ib[k])).collect();
        Ok::<_, Error>(vec![(a, ops::reduce_to(&ga, &ia, sa)?), (b, ops::reduce_to(&gb, &ib, sb)?)])
    };

    match node.op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add(a, b) => broadcast(a, b, &|_, _| 1.0, &|_, _| 1.0),
        Op::Sub(a, b) => broadcast(a, b, &|_, _| 1.0, &|_, _| -1.0),
        Op::Mul(a, b) => {
            let (xa, xb) = (val(a).data(), val(b).data());
            broadcast(a, b, &|_, j| xb[j], &|i, _| xa[i])
        }
        Op::Scale(a, s) => elementwise(a, &|_, _, g| g * s),
        Op::Offset(a) => elementwise(a, &|_, _, g| g),
        Op::Conv {
            input,
            weights,
            dilation,
            grouping,
        } => {
            let (gi, gw) = ops::conv2d_backward(val(input), val(weights), dilation, grouping, up)?;
            Ok(vec![(input, gi), (weights, gw)])
        }
        Op::Pool(input) => Ok(vec![(input, ops::adaptive_avg_pool_backward(val(input).shape(), up)?)]),
        Op::Softmax { input, axis } => Ok(vec![(input, ops::softmax_backward(out, axis, up)?)]),
        Op::Sigmoid(a) => elementwise(a, &|_, y, g| g * y * (1.0 - y)),
        Op::Abs(a) => elementwise(a, &|x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        }),
        Op::Relu(a) => elementwise(a, &|x, _, g| if x > 0.0 { g } else { 0.0 }),
        Op::Softplus(a) => elementwise(a, &|x, _, g| g * math::sigmoid(x)),
        Op::Sum(a) => {
            let g = up.data()[0];
            Ok(vec![(a, Tensor::full(val(a).shape().to_vec(), g)?)])
        }
        Op::MeanAxis { input, axis } => {
            let x = val(input);
            let (outer, n, inner) = ops::axis_split(x.shape(), axis, "mean_axis")?;
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        g[(o * n + k) * inner + i] = up.data()[o * inner + i] / n as f64;
                    }
                }
            }
            Ok(vec![(input, Tensor::new(x.shape().to_vec(), g)?)])
        }
        Op::MaskedMean { input, ref mask, count } => {
            let share = up.data()[0] / count as f64;
            let g = mask.iter().map(|&m| if m { share } else { 0.0 }).collect();
            Ok(vec![(input, Tensor::new(val(input).shape().to_vec(), g)?)])
        }
        Op::Select { input, axis, index } => {
            let x = val(input);
            let (outer, n, inner) = ops::axis_split(x.shape(), axis, "select")?;
            let mut g = vec![0.0; x.len()];
            for o in 0..outer {
                g[(o * n + index) * inner..][..inner].copy_from_slice(&up.data()[o * inner..][..inner]);
            }
            Ok(vec![(input, Tensor::new(x.shape().to_vec(), g)?)])
        }
        Op::Normalize { input, axis } => Ok(vec![(input, ops::l2_normalize_backward(val(input), out, axis, up)?)]),
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::leaf`].
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.iter().find(|(id, _)| *id == var.id).map(|(_, g)| g)
    }

    /// Ids of the non-leaf operations visited by the backward pass, in visit order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires_grad(self.id);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        assert!(core::ptr::eq(self.tape, other.tape), "operands belong to different tapes");
        let rg = self.tape.requires_grad(self.id) || self.tape.requires_grad(other.id);
        self.tape.push(value, op, rg)
    }

    /// Broadcasting addition (same rank; dimensions equal or 1).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = ops::broadcast_zip(&self.value(), &other.value(), "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = ops::broadcast_zip(&self.value(), &other.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = ops::broadcast_zip(&self.value(), &other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let v = self.value().map(|x| x * factor);
        self.unary(v, Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        let v = self.value().map(|x| x + offset);
        self.unary(v, Op::Offset(self.id))
    }

    /// Same-size dilated correlation with replicate borders.
    pub fn conv2d(self, weights: Var<'t>, dilation: usize, grouping: Grouping) -> Result<Var<'t>> {
        let v = ops::conv2d_raw(&self.value(), &weights.value(), dilation, grouping)?;
        Ok(self.binary(
            weights,
            v,
            Op::Conv {
                input: self.id,
                weights: weights.id,
                dilation,
                grouping,
            },
        ))
    }

    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let v = ops::adaptive_avg_pool(&self.value(), out_h, out_w)?;
        Ok(self.unary(v, Op::Pool(self.id)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = ops::softmax_over_axis(&self.value(), axis)?;
        Ok(self.unary(v, Op::Softmax { input: self.id, axis }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(math::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    /// `max(0, x)`.
    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(math::softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = ops::mean_axis(&self.value(), axis)?;
        Ok(self.unary(v, Op::MeanAxis { input: self.id, axis }))
    }

    /// Mean over the elements where `mask` is set; errors when none are.
    pub fn masked_mean(self, mask: &[bool]) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyPartition { op: "masked_mean" });
        }
        let total: f64 = x.data().iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        let v = Tensor::scalar(total / count as f64);
        Ok(self.unary(
            v,
            Op::MaskedMean {
                input: self.id,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    pub fn select(self, axis: usize, index: usize) -> Result<Var<'t>> {
        let v = ops::select(&self.value(), axis, index)?;
        Ok(self.unary(
            v,
            Op::Select {
                input: self.id,
                axis,
                index,
            },
        ))
    }

    pub fn l2_normalize(self, axis: usize) -> Result<Var<'t>> {
        let v = ops::l2_normalize(&self.value(), axis)?;
        Ok(self.unary(v, Op::Normalize { input: self.id, axis }))
    }
}
