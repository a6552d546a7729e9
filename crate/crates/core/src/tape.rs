//! Reverse-mode differentiation over an explicit record of executed ops.
//!
//! Every value lives in a node; leaves hold inputs and parameters, other
//! nodes remember the op that produced them. `backward` walks the record
//! once in reverse creation order.

use std::sync::Arc;

use crate::basis::ScaleBasis;
use crate::error::{shape_err, Error, Result};
use crate::ops::conv::{conv2d, conv2d_backward};
use crate::ops::elementwise::{
    add, batchnorm_eval, batchnorm_eval_backward, batchnorm_train, batchnorm_train_backward, max_over_axis,
    max_over_axis_backward, relu, relu_backward, BatchNormSaved,
};
use crate::ops::pad::PaddingSpec;
use crate::ops::resize::ResizePlan;
use crate::scalar::Scalar;
use crate::scale_ops::{fast_scale_conv_1x1, fast_scale_conv_1x1_backward, scale_conv, scale_conv_backward};
use crate::tensor::Tensor;
use crate::xcorr::XcorrPlan;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, k: Var, stride: usize, padding: PaddingSpec },
    ScaleConv { x: Var, w: Var, basis: Arc<ScaleBasis<T>>, stride: usize, padding: PaddingSpec },
    Fast1x1 { x: Var, w: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Tensor<T>, var: Tensor<T>, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Xcorr { f1: Var, f2: Var, plan: XcorrPlan },
    Resize { x: Var, plan: ResizePlan },
    Affine { x: Var, gain: Var, bias: Var },
    Bce { x: Var, labels: Tensor<T>, weights: Tensor<T> },
    WeightedSum { x: Var, w: Tensor<T> },
    Reshape { x: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    /// Node indices of the ops visited, in visiting order.
    pub visited: Vec<usize>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Results of a batch-norm forward in training mode, for running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (non-leaf) ops.
    pub fn num_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: PaddingSpec) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(y, Op::Conv2d { x, k, stride, padding }))
    }

    pub fn scale_conv(&mut self, x: Var, w: Var, basis: Arc<ScaleBasis<T>>, stride: usize, padding: PaddingSpec) -> Result<Var> {
        let y = scale_conv(self.value(x), self.value(w), &basis, stride, padding)?;
        Ok(self.push(y, Op::ScaleConv { x, w, basis, stride, padding }))
    }

    pub fn fast_1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = fast_scale_conv_1x1(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::Fast1x1 { x, w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<(Var, BatchStats<T>)> {
        let (y, saved) = batchnorm_train(self.value(x), self.value(gamma), self.value(beta), axis)?;
        let stats = BatchStats { mean: saved.batch_mean.clone(), var_unbiased: saved.batch_var_unbiased.clone() };
        Ok((self.push(y, Op::BatchNormTrain { x, gamma, beta, saved }), stats))
    }

    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>, axis: usize) -> Result<Var> {
        let y = batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, axis)?;
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, mean: mean.clone(), var: var.clone(), axis }))
    }

    /// Max over `axis` (scale-pooling when `axis` is the scale axis).
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (y, argmax) = max_over_axis(self.value(x), axis)?;
        Ok(self.push(y, Op::MaxAxis { x, axis, argmax }))
    }

    pub fn xcorr(&mut self, f1: Var, f2: Var, scales: &[f64]) -> Result<Var> {
        let plan = XcorrPlan::new(self.value(f1).shape(), self.value(f2).shape(), scales)?;
        let y = plan.forward(self.value(f1), self.value(f2))?;
        Ok(self.push(y, Op::Xcorr { f1, f2, plan }))
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let r = s.len();
        if r < 2 {
            return shape_err("resize needs rank >= 2");
        }
        let plan = ResizePlan::new(s[r - 2], s[r - 1], oh, ow)?;
        let y = plan.forward(self.value(x))?;
        Ok(self.push(y, Op::Resize { x, plan }))
    }

    /// `gain · x + bias` with single-element `gain` and `bias`.
    pub fn affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        if self.value(gain).len() != 1 || self.value(bias).len() != 1 {
            return shape_err("affine gain and bias must be single values");
        }
        let (g, b) = (self.value(gain).data()[0], self.value(bias).data()[0]);
        let y = self.value(x).map(|v| g * v + b);
        Ok(self.push(y, Op::Affine { x, gain, bias }))
    }

    /// Weighted logistic loss `Σ wᵢ log(1 + exp(−yᵢ vᵢ)) / Σ wᵢ`.
    pub fn bce(&mut self, x: Var, labels: &Tensor<T>, weights: &Tensor<T>) -> Result<Var> {
        let v = self.value(x);
        if labels.shape() != v.shape() || weights.shape() != v.shape() {
            return shape_err(format!("labels {:?} / weights {:?} for logits {:?}", labels.shape(), weights.shape(), v.shape()));
        }
        v.check_finite("logits")?;
        let wsum = weights.sum();
        if !(wsum > T::zero()) {
            return Err(Error::Invalid("loss weights must have a positive sum".into()));
        }
        let mut acc = T::zero();
        for ((&vi, &yi), &wi) in v.data().iter().zip(labels.data()).zip(weights.data()) {
            acc += wi * softplus(-yi * vi);
        }
        let y = Tensor::scalar(acc / wsum);
        Ok(self.push(y, Op::Bce { x, labels: labels.clone(), weights: weights.clone() }))
    }

    /// `<x, w>` for a fixed `w`; a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        if w.shape() != self.value(x).shape() {
            return shape_err("weighted_sum: shape mismatch");
        }
        let y = Tensor::scalar(self.value(x).dot(w));
        Ok(self.push(y, Op::WeightedSum { x, w: w.clone() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Gradients of a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let node = self.nodes.get(out.0).ok_or(Error::NotRecorded)?;
        if node.value.len() != 1 {
            return shape_err(format!("backward seed needed for non-scalar output {:?}", node.value.shape()));
        }
        self.backward_with(out, Tensor::full(node.value.shape(), T::one()))
    }

    /// Gradients of `<seed, out>`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let node = self.nodes.get(out.0).ok_or(Error::NotRecorded)?;
        if matches!(node.op, Op::Leaf) {
            return Err(Error::NotRecorded);
        }
        if seed.shape() != node.value.shape() {
            return shape_err(format!("seed {:?} for output {:?}", seed.shape(), node.value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        let mut visited = Vec::new();
        for i in (0..=out.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            visited.push(i);
            for (v, gv) in self.op_backward(&self.nodes[i], &g)? {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot => *slot = Some(gv),
                }
            }
            // keep the output gradient of this op available to callers
            grads[i] = Some(g);
        }
        Ok(Grads { grads, visited })
    }

    fn op_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, k, stride, padding } => {
                let (gx, gk) = conv2d_backward(val(x), val(k), *stride, *padding, g)?;
                vec![(*x, gx), (*k, gk)]
            }
            Op::ScaleConv { x, w, basis, stride, padding } => {
                let (gx, gw) = scale_conv_backward(val(x), val(w), basis, *stride, *padding, g)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Fast1x1 { x, w } => {
                let (gx, gw) = fast_scale_conv_1x1_backward(val(x), val(w), g)?;
                vec![(*x, gx), (*w, gw)]
            }
            Op::Relu { x } => vec![(*x, relu_backward(val(x), g)?)],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::BatchNormTrain { x, gamma, beta, saved } => {
                let (gx, gg, gb) = batchnorm_train_backward(g, saved, val(gamma))?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::BatchNormEval { x, gamma, beta, mean, var, axis } => {
                let (gx, gg, gb) = batchnorm_eval_backward(val(x), g, val(gamma), mean, var, *axis)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::MaxAxis { x, axis, argmax } => {
                vec![(*x, max_over_axis_backward(val(x).shape(), *axis, argmax, g)?)]
            }
            Op::Xcorr { f1, f2, plan } => {
                let (g1, g2) = plan.backward(val(f1), val(f2), g)?;
                vec![(*f1, g1), (*f2, g2)]
            }
            Op::Resize { x, plan } => vec![(*x, plan.backward(g)?)],
            Op::Affine { x, gain, bias } => {
                let a = val(gain).data()[0];
                let ga = g.dot(val(x));
                let gb = g.sum();
                vec![
                    (*x, g.scale(a)),
                    (*gain, Tensor::new(val(gain).shape().to_vec(), vec![ga])?),
                    (*bias, Tensor::new(val(bias).shape().to_vec(), vec![gb])?),
                ]
            }
            Op::Bce { x, labels, weights } => {
                let s = g.data()[0] / weights.sum();
                let v = val(x);
                let data = v
                    .data()
                    .iter()
                    .zip(labels.data())
                    .zip(weights.data())
                    .map(|((&vi, &yi), &wi)| -s * wi * yi * sigmoid(-yi * vi))
                    .collect();
                vec![(*x, Tensor::new(v.shape().to_vec(), data)?)]
            }
            Op::WeightedSum { x, w } => vec![(*x, w.scale(g.data()[0]))],
            Op::Reshape { x } => vec![(*x, g.reshaped(val(x).shape())?)],
        })
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_visits_each_op_once_in_reverse() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i[2] as f64 - i[3] as f64));
        let k = t.leaf(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, k, 1, PaddingSpec::NONE).unwrap();
        let r = t.relu(y);
        let s = t.add(r, y).unwrap();
        let l = t.weighted_sum(s, &Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.visited, vec![l.0, s.0, r.0, y.0]);
        assert_eq!(t.num_ops(), 4);
        // d/dx sum(relu(2x) + 2x) = 2·[x > 0] + 2
        let gx = g.get(x).unwrap();
        for (v, gv) in t.value(x).data().iter().zip(gx.data()) {
            let want = if *v > 0.0 { 4.0 } else { 2.0 };
            assert_eq!(*gv, want);
        }
    }

    #[test]
    fn backward_from_leaf_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(1.0));
        assert_eq!(t.backward(x).unwrap_err(), Error::NotRecorded);
        assert_eq!(t.backward(Var(7)).unwrap_err(), Error::NotRecorded);
    }

    #[test]
    fn bce_limits() {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(Tensor::zeros(&[2, 3]));
        let y = Tensor::from_fn(&[2, 3], |i| if i[1] == 1 { 1.0 } else { -1.0 });
        let w = Tensor::full(&[2, 3], 0.5);
        let l = t.bce(v, &y, &w).unwrap();
        assert!((t.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let big = t.leaf(y.scale(800.0));
        let l2 = t.bce(big, &y, &w).unwrap();
        assert!(t.value(l2).data()[0] < 1e-300);
        let bad = t.leaf(Tensor::full(&[2, 3], f64::NAN));
        assert!(t.bce(bad, &y, &w).is_err());
    }
}
