//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each operation appends one node holding its output value and whatever the
//! adjoint needs. Nodes only reference earlier nodes, so creation order is a
//! topological order and the backward sweep is a single reverse pass that
//! visits every node once.

use crate::error::{Error, Result};
use crate::ops;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adjoint of a user-supplied operation: given the input values, the output
/// value and the output gradient, return one gradient per input.
pub type CustomAdjoint<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool2d { x: Var, kh: usize, kw: usize, stride: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu { x: Var },
    LogSoftmax { x: Var },
    Nll { logp: Var, targets: Vec<usize> },
    Entropy { logp: Var },
    SpatialRows { x: Var },
    SegmentSum { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    Custom { inputs: Vec<Var>, adjoint: CustomAdjoint<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives gradients but is not tied to any parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a parameter; [`Tape::backward`] accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.input(store.get(id).value.clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul { a, b })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push("linear", out, Op::Linear { x, w, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn avgpool2d(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let out = ops::avgpool2d(self.value(x), kh, kw, stride)?;
        self.push("avgpool2d", out, Op::AvgPool2d { x, kh, kw, stride })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::maxpool2d(self.value(x), k, stride)?;
        self.push("maxpool2d", out, Op::MaxPool2d { x, argmax })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ops::relu(self.value(x));
        self.push("relu", out, Op::Relu { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::log_softmax(self.value(x))?;
        self.push("log_softmax", out, Op::LogSoftmax { x })
    }

    pub fn nll_loss(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let v = ops::nll(self.value(logp), targets)?;
        self.push(
            "nll_loss",
            Tensor::scalar(v),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn entropy(&mut self, logp: Var) -> Result<Var> {
        let v = ops::entropy(self.value(logp))?;
        self.push("entropy", Tensor::scalar(v), Op::Entropy { logp })
    }

    pub fn spatial_rows(&mut self, x: Var) -> Result<Var> {
        let out = ops::spatial_rows(self.value(x))?;
        self.push("spatial_rows", out, Op::SpatialRows { x })
    }

    pub fn segment_sum(&mut self, x: Var, groups: usize) -> Result<Var> {
        let out = ops::segment_sum(self.value(x), groups)?;
        self.push("segment_sum", out, Op::SegmentSum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_map("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x })
    }

    /// Records an operation whose value and adjoint are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, adjoint: CustomAdjoint<T>) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                adjoint,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints for every node.
    pub fn gradients(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.adjoint(node, &g);
            grads[idx] = Some(g);
            for (target, delta) in contributions {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(Grads { grads })
    }

    /// Runs [`Tape::gradients`] and accumulates into every reachable parameter.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads.grads.iter()) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(grads)
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = ops::linear_backward(val(*x), val(*w), g);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = ops::conv2d_backward(val(*x), val(*w), g, *stride, *pad);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::AvgPool2d { x, kh, kw, stride } => {
                vec![(*x, ops::avgpool2d_backward(val(*x).shape(), g, *kh, *kw, *stride))]
            }
            Op::MaxPool2d { x, argmax } => {
                vec![(*x, ops::maxpool2d_backward(val(*x).shape(), g, argmax))]
            }
            Op::Relu { x } => vec![(*x, ops::relu_backward(val(*x), g))],
            Op::LogSoftmax { x } => vec![(*x, ops::log_softmax_backward(&node.value, g))],
            Op::Nll { logp, targets } => {
                vec![(*logp, ops::nll_backward(val(*logp).shape(), targets, g.data()[0]))]
            }
            Op::Entropy { logp } => vec![(*logp, ops::entropy_backward(val(*logp), g.data()[0]))],
            Op::SpatialRows { x } => vec![(*x, ops::spatial_rows_backward(val(*x).shape(), g))],
            Op::SegmentSum { x } => vec![(*x, ops::segment_sum_backward(val(*x).shape(), g))],
            Op::Reshape { x } => vec![(*x, g.reshape(val(*x).shape()).expect("same numel"))],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul { a, b } => {
                let da = ops::zip_map("mul", g, val(*b), |x, y| x * y).expect("shape");
                let db = ops::zip_map("mul", g, val(*a), |x, y| x * y).expect("shape");
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * *factor))],
            Op::Sum { x } => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
            Op::Custom { inputs, adjoint } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let outs = adjoint(&ins, &node.value, g);
                inputs.iter().copied().zip(outs).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .register("theta", Tensor::from_f64(&[3], &[0.3, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let th = tape.param(&store, id);
        let loss = tape.sum(th).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_squared_norm_gradient_is_theta() {
        let mut store = ParamStore::<f64>::new();
        let theta = Tensor::from_f64(&[4], &[0.5, -1.5, 2.0, 0.0]).unwrap();
        let id = store.register("theta", theta.clone()).unwrap();
        let mut tape = Tape::new();
        let th = tape.param(&store, id);
        let sq = tape.mul(th, th).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad, theta);
    }

    #[test]
    fn unreachable_params_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.register("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.register("b", Tensor::full(&[2], 1.0)).unwrap();
        store.get_mut(b).grad.fill(7.0);
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let _bv = tape.param(&store, b);
        let loss = tape.sum(av).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).grad.data(), &[7.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grads_accumulate_across_fan_out() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[2], 3.0));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.gradients(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_output_surfaces_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[2], f64::MAX));
        assert!(matches!(tape.add(x, x), Err(Error::NonFinite { op: "add" })));
    }
}
