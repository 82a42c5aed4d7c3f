//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool {
        x: Var,
        rate: usize,
    },
    GlobalAvgPool(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        s: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    Index {
        x: Var,
        index: usize,
    },
    Reshape(Var),
    WeightedBce {
        s: Var,
        mask: Tensor,
        beta: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
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

    /// Fingerprint of the sign pattern of every ReLU input on the tape.
    ///
    /// Two passes with equal fingerprints used the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for chunk in self.nodes[x.0].value.data().chunks(64) {
                    let bits = chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                    h.write_u64(bits);
                }
            }
        }
        h.finish()
    }

    /// A differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, masks, fixed weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Training-mode batch norm; returns the batch statistics for the running-stat update.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (out, xhat, inv_std, stats) =
            ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.rg(&[x, gamma, beta]);
        let var = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let out = ops::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
        )?;
        let inv_std = running_var
            .iter()
            .map(|v| 1.0 / (v + ops::BN_EPS).sqrt())
            .collect();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, rate: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), rate)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool { x, rate }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(x), self.value(weight), self.value(bias))?;
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(out, Op::Linear { x, weight, bias }, rg))
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if !sv.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "scale_by_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::Scale { x, s }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Selects one element of a flat view of `x` as a scalar node.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        let value = *v.data().get(index).ok_or_else(|| {
            Error::InvalidTensor(format!("index {index} out of range for {:?}", v.shape()))
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::Index { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Class-weighted binary cross entropy of probabilities `s` against a binary mask.
    pub fn weighted_bce(&mut self, s: Var, mask: &Tensor, beta: f64) -> Result<Var> {
        let loss = ops::weighted_bce(self.value(s), mask, beta)?;
        let rg = self.rg(&[s]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                s,
                mask: mask.clone(),
                beta,
            },
            rg,
        ))
    }

    /// Propagates `d root / d node` to every node reachable from `root`.
    ///
    /// Intermediate gradients are released as soon as they have been
    /// consumed; only leaf gradients survive in the result.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        debug_assert_eq!(g.shape(), self.shape(var));
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need_input = self.nodes[x.0].requires_grad;
                let cg = ops::conv2d_backward(
                    self.value(x),
                    self.value(weight),
                    stride,
                    padding,
                    g,
                    need_input,
                )?;
                if let Some(dx) = cg.input {
                    self.accumulate(grads, x, dx)?;
                }
                self.accumulate(grads, weight, cg.weight)?;
                if let Some(b) = bias {
                    self.accumulate(grads, b, cg.bias)?;
                }
            }
            &Op::Relu(x) => {
                self.accumulate(grads, x, ops::relu_backward(self.value(x), g))?;
            }
            &Op::Sigmoid(x) => {
                self.accumulate(grads, x, ops::sigmoid_backward(&node.value, g))?;
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let bg = ops::batch_norm_train_backward(xhat, inv_std, self.value(*gamma), g)?;
                self.accumulate(grads, *x, bg.input)?;
                self.accumulate(grads, *gamma, bg.gamma)?;
                self.accumulate(grads, *beta, bg.beta)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (c, h, w) = xv.dims3()?;
                let n = h * w;
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let range = ch * n..(ch + 1) * n;
                    for ((d, &gi), &xi) in dx[range.clone()]
                        .iter_mut()
                        .zip(&g.data()[range.clone()])
                        .zip(&xv.data()[range])
                    {
                        *d = gi * gm[ch] * inv_std[ch];
                        dgamma[ch] += gi * (xi - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gi;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                self.accumulate(grads, *gamma, Tensor::from_vec(dgamma))?;
                self.accumulate(grads, *beta, Tensor::from_vec(dbeta))?;
            }
            &Op::AvgPool { x, rate } => {
                let dx = ops::avg_pool2d_backward(self.shape(x), rate, g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::GlobalAvgPool(x) => {
                let dx = ops::global_avg_pool_backward(self.shape(x), g)?;
                self.accumulate(grads, x, dx)?;
            }
            &Op::Upsample(x) => {
                let dx = ops::bilinear_upsample_backward(self.shape(x), g)?;
                self.accumulate(grads, x, dx)?;
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.nodes[x.0].requires_grad {
                        let part = Tensor::new(
                            self.shape(x).to_vec(),
                            g.data()[offset..offset + len].to_vec(),
                        )?;
                        self.accumulate(grads, x, part)?;
                    }
                    offset += len;
                }
            }
            &Op::Linear { x, weight, bias } => {
                let lg = ops::fully_connected_backward(self.value(x), self.value(weight), g);
                self.accumulate(grads, x, lg.input)?;
                self.accumulate(grads, weight, lg.weight)?;
                self.accumulate(grads, bias, lg.bias)?;
            }
            &Op::Scale { x, s } => {
                let k = self.value(s).data()[0];
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, x, g.map(|v| v * k))?;
                }
                let ds: f64 = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum();
                let shape = self.shape(s).to_vec();
                self.accumulate(grads, s, Tensor::new(shape, vec![ds])?)?;
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Mul(a, b) => {
                let da = g.zip_map(self.value(b), |x, y| x * y)?;
                let db = g.zip_map(self.value(a), |x, y| x * y)?;
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv))?;
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                let gv = g.data()[0] / n;
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv))?;
            }
            &Op::Index { x, index } => {
                let mut dx = Tensor::zeros(self.shape(x));
                dx.data_mut()[index] = g.data()[0];
                self.accumulate(grads, x, dx)?;
            }
            &Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(x))?;
                self.accumulate(grads, x, dx)?;
            }
            Op::WeightedBce { s, mask, beta } => {
                let ds = ops::weighted_bce_backward(self.value(*s), mask, *beta, g.data()[0]);
                self.accumulate(grads, *s, ds)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // l = sum(p * c) + sum(relu(p)) with p reused; manual sum of both paths.
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![0.5, -1.5, 2.0]));
        let c = t.constant(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
        let a = t.mul(p, c).unwrap();
        let a = t.sum(a);
        let r = t.relu(p);
        let b = t.sum(r);
        let l = t.add(a, b).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0 + 1.0, 4.0 + 0.0, 5.0 + 1.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(p), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::ones(&[2]));
        let q = t.leaf(Tensor::ones(&[2]));
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert!(g.get(q).is_none());
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![-1.0, -0.5, -3.0]));
        let r = t.relu(p);
        assert!(t.value(r).data().iter().all(|&v| v == 0.0));
        let l = t.sum(r);
        let g = t.backward(l).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_by_zero_annihilates_input_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = t.leaf(Tensor::scalar(0.0));
        let y = t.scale_by_scalar(x, s).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
        let w = t.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let yw = t.mul(y, w).unwrap();
        let l = t.sum(yw);
        let g = t.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
        // dL/ds = Σ x·w
        assert_eq!(g.get(s).unwrap().data(), &[0.5 - 2.0 + 6.0]);
    }

    #[test]
    fn add_passes_gradient_through() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::from_vec(vec![3.0, -4.0]));
        let s = t.add(a, b).unwrap();
        let w = t.constant(Tensor::from_vec(vec![2.0, 5.0]));
        let sw = t.mul(s, w).unwrap();
        let l = t.sum(sw);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 5.0]);
        assert!(t.add(a, l).is_err());
    }

    #[test]
    fn concat_backward_splits_by_offsets() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::ones(&[1, 2, 2]));
        let b = t.leaf(Tensor::ones(&[2, 2, 2]));
        let cat = t.concat_channels(&[a, b]).unwrap();
        let w = t.constant(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let m = t.mul(cat, w).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.get(b).unwrap().data()[0], 4.0);
    }
}
