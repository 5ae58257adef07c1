//! Reverse-mode autodiff whose backward pass records its own operations.
//!
//! A [`Graph`] is an append-only tape. Every [`Tensor`] is a handle to one
//! node of that tape. [`backward`] walks the tape in reverse and, when asked
//! to `create_graph`, expresses every gradient with the same differentiable
//! operations used in the forward pass, so the returned gradients can be
//! differentiated again.

mod array;
mod conv;
mod optim;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use array::Array;
pub use optim::{sgd_update, AdamState};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    /// `(g, x) -> g * [x > 0]`
    ReluMask,
    Abs,
    /// `(g, x) -> g * sign(x)`
    SignMask,
    Sum,
    /// Broadcast a scalar to the node's own shape.
    Expand,
    Conv {
        pad: usize,
    },
    ConvInputGrad {
        pad: usize,
    },
    ConvWeightGrad {
        pad: usize,
    },
    /// `(x: NCHW, b: C) -> x + b[c]`
    AddBias,
    /// `NCHW -> C`
    ChannelSum,
    /// `C -> NCHW` with the node's own shape.
    ChannelExpand,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Rc<Array>,
    requires_grad: bool,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Shared handle to a computation tape. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array) -> Tensor {
        self.push_raw(Op::Leaf, Vec::new(), Rc::new(value), true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Array) -> Tensor {
        self.push_raw(Op::Constant, Vec::new(), Rc::new(value), false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.leaf(Array::scalar(value))
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    fn push_raw(&self, op: Op, inputs: Vec<NodeId>, value: Rc<Array>, requires_grad: bool) -> Tensor {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    fn push(&self, op: Op, inputs: &[&Tensor], value: Array) -> Tensor {
        let requires_grad = {
            let tape = self.tape.borrow();
            !tape.no_grad && inputs.iter().any(|t| tape.nodes[t.id].requires_grad)
        };
        if !requires_grad {
            // Nothing upstream can receive a gradient, so keep no edges.
            return self.push_raw(Op::Constant, Vec::new(), Rc::new(value), false);
        }
        let ids = inputs.iter().map(|t| t.id).collect();
        self.push_raw(op, ids, Rc::new(value), true)
    }

    fn value(&self, id: NodeId) -> Rc<Array> {
        Rc::clone(&self.tape.borrow().nodes[id].value)
    }

    fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            graph: self.clone(),
            id,
        }
    }
}

/// Restores the tape's grad mode when dropped.
struct NoGradGuard<'a> {
    graph: &'a Graph,
    previous: bool,
}

impl<'a> NoGradGuard<'a> {
    fn new(graph: &'a Graph, enable: bool) -> Self {
        let mut tape = graph.tape.borrow_mut();
        let previous = tape.no_grad;
        tape.no_grad = previous || enable;
        drop(tape);
        NoGradGuard { graph, previous }
    }
}

impl Drop for NoGradGuard<'_> {
    fn drop(&mut self) {
        self.graph.tape.borrow_mut().no_grad = self.previous;
    }
}

/// Handle to a node in a [`Graph`]. Values are immutable once recorded.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn check_same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_graph(&self, other: &Tensor) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_graph(other)?;
        let (a, b) = (self.value(), other.value());
        check_same_shape(name, &a, &b)?;
        Ok(self.graph.push(op, &[self, other], a.zip_map(&b, f)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn mul_scalar(&self, factor: f64) -> Tensor {
        let v = self.value().map(|x| x * factor);
        self.graph.push(Op::Scale(factor), &[self], v)
    }

    pub fn relu(&self) -> Tensor {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.graph.push(Op::Relu, &[self], v)
    }

    pub fn abs(&self) -> Tensor {
        let v = self.value().map(f64::abs);
        self.graph.push(Op::Abs, &[self], v)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let v = Array::scalar(self.value().data().iter().sum());
        self.graph.push(Op::Sum, &[self], v)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value().len().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Tensor {
        self.graph.push_raw(Op::Constant, Vec::new(), self.value(), false)
    }

    fn relu_mask(&self, x: &Tensor) -> Tensor {
        let v = self.value().zip_map(&x.value(), |g, x| if x > 0.0 { g } else { 0.0 });
        self.graph.push(Op::ReluMask, &[self, x], v)
    }

    fn sign_mask(&self, x: &Tensor) -> Tensor {
        let v = self.value().zip_map(&x.value(), |g, x| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        });
        self.graph.push(Op::SignMask, &[self, x], v)
    }

    fn expand(&self, shape: &[usize]) -> Tensor {
        let v = Array::full(shape, self.item());
        self.graph.push(Op::Expand, &[self], v)
    }

    fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.check_graph(bias)?;
        let x = self.value();
        let b = bias.value();
        let [_, c, h, w] = nchw("add_bias", x.shape())?;
        if b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![c],
                rhs: b.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bc = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self
            .graph
            .push(Op::AddBias, &[self, bias], Array::from_parts(x.shape().to_vec(), out)))
    }

    fn channel_sum(&self) -> Tensor {
        let x = self.value();
        let [_, c, h, w] = nchw("channel_sum", x.shape()).expect("channel_sum on NCHW");
        let mut out = vec![0.0; c];
        for (i, chunk) in x.data().chunks(h * w).enumerate() {
            out[i % c] += chunk.iter().sum::<f64>();
        }
        self.graph
            .push(Op::ChannelSum, &[self], Array::from_parts(vec![c], out))
    }

    fn channel_expand(&self, shape: &[usize]) -> Tensor {
        let b = self.value();
        let [n, c, h, w] = nchw("channel_expand", shape).expect("channel_expand to NCHW");
        let mut out = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &bc in b.data() {
                out.extend(std::iter::repeat_n(bc, h * w));
            }
        }
        self.graph
            .push(Op::ChannelExpand, &[self], Array::from_parts(shape.to_vec(), out))
    }

    fn conv(&self, weight: &Tensor, pad: usize) -> Result<Tensor> {
        self.check_graph(weight)?;
        let v = conv::forward(&self.value(), &weight.value(), pad)?;
        Ok(self.graph.push(Op::Conv { pad }, &[self, weight], v))
    }

    fn conv_input_grad(&self, weight: &Tensor, pad: usize, height: usize, width: usize) -> Result<Tensor> {
        let v = conv::input_grad(&self.value(), &weight.value(), pad, height, width)?;
        Ok(self.graph.push(Op::ConvInputGrad { pad }, &[self, weight], v))
    }

    fn conv_weight_grad(x: &Tensor, gy: &Tensor, pad: usize, kh: usize, kw: usize) -> Result<Tensor> {
        let v = conv::weight_grad(&x.value(), &gy.value(), pad, kh, kw)?;
        Ok(x.graph.push(Op::ConvWeightGrad { pad }, &[x, gy], v))
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension {
            op,
            msg: format!("expected NCHW tensor, got shape {shape:?}"),
        }),
    }
}

/// Stride-1 2-D convolution (cross-correlation) with symmetric zero padding.
///
/// `input` is NCHW, `weight` is OIhw and `bias` has O elements. The output
/// has spatial extent `H + 2*padding - (h - 1)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    input.check_graph(bias)?;
    input.conv(weight, padding)?.add_bias(bias)
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(target)?.abs().mean())
}

/// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` the gradients are recorded on the same tape and can
/// be differentiated again; otherwise they are constants.
pub fn backward(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let graph = loss.graph.clone();
    let loss_value = loss.value();
    if loss_value.len() != 1 {
        return Err(Error::NotScalar(loss_value.shape().to_vec()));
    }
    for t in wrt {
        loss.check_graph(t)?;
    }

    // Route gradients only through nodes that lie on a path from some
    // `wrt` tensor to the loss.
    let end = loss.id + 1;
    let mut needed = vec![false; end];
    {
        let tape = graph.tape.borrow();
        let mut ancestor = vec![false; end];
        ancestor[loss.id] = true;
        for id in (0..end).rev() {
            if ancestor[id] {
                for &i in &tape.nodes[id].inputs {
                    ancestor[i] = true;
                }
            }
        }
        for (slot, t) in wrt.iter().enumerate() {
            if t.id >= end || !ancestor[t.id] {
                return Err(Error::Unreachable(slot));
            }
            needed[t.id] = true;
        }
        for id in 0..end {
            if !needed[id] && tape.nodes[id].inputs.iter().any(|&i| needed[i]) {
                needed[id] = ancestor[id];
            }
        }
    }

    let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];
    let _guard = NoGradGuard::new(&graph, !create_graph);
    let mut grads: Vec<Option<Tensor>> = vec![None; end];
    grads[loss.id] = Some(graph.constant(Array::full(loss_value.shape(), 1.0)));

    for id in (0..end).rev() {
        let Some(g) = grads[id].take() else { continue };
        for (slot, t) in wrt.iter().enumerate() {
            if t.id == id {
                results[slot] = Some(g.clone());
            }
        }
        let (op, inputs) = {
            let tape = graph.tape.borrow();
            let node = &tape.nodes[id];
            (node.op, node.inputs.clone())
        };
        if inputs.iter().all(|&i| !needed[i]) {
            continue;
        }
        let input = |k: usize| graph.tensor(inputs[k]);
        let contributions: Vec<Option<Tensor>> = match op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g)],
            Op::Sub => vec![Some(g.clone()), Some(g.mul_scalar(-1.0))],
            Op::Mul => vec![Some(g.mul(&input(1))?), Some(g.mul(&input(0))?)],
            Op::Scale(c) => vec![Some(g.mul_scalar(c))],
            Op::Relu => vec![Some(g.relu_mask(&input(0)))],
            Op::ReluMask => vec![Some(g.relu_mask(&input(1))), None],
            Op::Abs => vec![Some(g.sign_mask(&input(0)))],
            Op::SignMask => vec![Some(g.sign_mask(&input(1))), None],
            Op::Sum => vec![Some(g.expand(input(0).value().shape()))],
            Op::Expand => vec![Some(g.sum())],
            Op::Conv { pad } => {
                let (x, w) = (input(0), input(1));
                let xs = x.value();
                let ws = w.value();
                let dx = if needed[x.id] {
                    Some(g.conv_input_grad(&w, pad, xs.shape()[2], xs.shape()[3])?)
                } else {
                    None
                };
                let dw = if needed[w.id] {
                    Some(Tensor::conv_weight_grad(&x, &g, pad, ws.shape()[2], ws.shape()[3])?)
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::ConvInputGrad { pad } => {
                let (gy, w) = (input(0), input(1));
                let ws = w.value();
                let d_gy = if needed[gy.id] { Some(g.conv(&w, pad)?) } else { None };
                let d_w = if needed[w.id] {
                    Some(Tensor::conv_weight_grad(&g, &gy, pad, ws.shape()[2], ws.shape()[3])?)
                } else {
                    None
                };
                vec![d_gy, d_w]
            }
            Op::ConvWeightGrad { pad } => {
                let (x, gy) = (input(0), input(1));
                let xs = x.value();
                let d_x = if needed[x.id] {
                    Some(gy.conv_input_grad(&g, pad, xs.shape()[2], xs.shape()[3])?)
                } else {
                    None
                };
                let d_gy = if needed[gy.id] { Some(x.conv(&g, pad)?) } else { None };
                vec![d_x, d_gy]
            }
            Op::AddBias => vec![Some(g.clone()), Some(g.channel_sum())],
            Op::ChannelSum => vec![Some(g.channel_expand(input(0).value().shape()))],
            Op::ChannelExpand => vec![Some(g.channel_sum())],
        };
        for (k, contribution) in contributions.into_iter().enumerate() {
            let Some(c) = contribution else { continue };
            let target = inputs[k];
            if !needed[target] {
                continue;
            }
            grads[target] = Some(match grads[target].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }

    results
        .into_iter()
        .enumerate()
        .map(|(slot, r)| match r {
            Some(t) => Ok(t),
            // Reachable only through piecewise-constant masks.
            None => Ok(graph.constant(Array::zeros(wrt[slot].value().shape()))),
        })
        .collect()
}
