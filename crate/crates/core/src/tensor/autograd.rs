use std::sync::Arc;

use super::kernels::{self, ConvSpec};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    /// `x[.., c] + bias[c]`
    AddBias(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Resize(Var),
    Concat(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: Arc<[u8]>,
        ignore: u8,
        count: usize,
    },
    /// A value computed outside the tape from `inputs`; it has no adjoint.
    Opaque {
        name: String,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Resize(x)
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Opaque { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse. Every recorded value is checked for NaN/Inf.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// A fixed input; gradients stop here.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Records a value produced outside the tape. Backpropagating into it
    /// fails with [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: impl Into<String>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        self.push(
            Op::Opaque {
                name: name.into(),
                inputs: inputs.to_vec(),
            },
            value,
            "opaque",
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |p, q| p + q);
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |p, q| p * q);
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_map(a, b, |p, q| p / q);
        self.push(Op::Div(a, b), v, "div")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let v = self.value(x).map(|p| p + c);
        self.push(Op::AddScalar(x), v, "add_scalar")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64_lossy(c);
        let v = self.value(x).map(|p| p * ct);
        self.push(Op::Scale(x, c), v, "scale")
    }

    /// Adds `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.value(bias).numel() != c {
            return Err(Error::dim(format!(
                "bias {:?} for last axis {c}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(p, &q)| *p += q);
        }
        self.push(Op::AddBias(x, bias), v, "add_bias")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(x), axes)?;
        self.push(Op::Permute(x, axes.to_vec()), v, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::dim("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), v, "reshape")
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_lastdim(self.value(x));
        self.push(Op::Softmax(x), v, "softmax")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = kernels::gelu(self.value(x));
        self.push(Op::Gelu(x), v, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|p| p.max(T::zero()));
        self.push(Op::Relu(x), v, "relu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(Op::LayerNorm { x, gamma, beta, eps }, v, "layer_norm")
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let v = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups, eps)?;
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            v,
            "group_norm",
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        self.push(Op::Conv2d { x, w, b, spec }, v, "conv2d")
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(Op::Resize(x), v, "bilinear_resize")
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat0(&values)?;
        self.push(Op::Concat(parts.to_vec()), v, "concat")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    /// Mean cross-entropy of `K×H×W` logits against an `H×W` class grid.
    /// Also returns how many pixels were scored.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8], ignore: u8) -> Result<(Var, usize)> {
        let (loss, count) = kernels::cross_entropy(self.value(logits), target, ignore)?;
        let var = self.push(
            Op::CrossEntropy {
                logits,
                target: Arc::from(target),
                ignore,
                count,
            },
            Tensor::scalar(loss),
            "cross_entropy",
        )?;
        Ok((var, count))
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let acc = |v: Var, delta: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing
                        .data_mut()
                        .iter_mut()
                        .zip(delta.data())
                        .for_each(|(e, &d)| *e += d),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = self.elementwise(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = self.elementwise(&g, self.value(*a), |gv, av| gv * av);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = self.elementwise(&g, bv, |gv, q| gv / q);
                    let gb = Tensor::new(
                        bv.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(node.value.data())
                            .zip(bv.data())
                            .map(|((&gv, &out), &q)| -gv * out / q)
                            .collect(),
                    )?;
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::AddScalar(x) => acc(*x, g, &mut grads),
                Op::Scale(x, c) => {
                    let c = T::from_f64_lossy(*c);
                    acc(*x, g.map(|v| v * c), &mut grads);
                }
                Op::AddBias(x, bias) => {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    let gb = Tensor::new(self.shape(*bias).to_vec(), gb)?;
                    acc(*bias, gb, &mut grads);
                    acc(*x, g, &mut grads);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Permute(x, axes) => {
                    let gx = kernels::permute(&g, &kernels::inverse_permutation(axes))?;
                    acc(*x, gx, &mut grads);
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x).to_vec())?;
                    acc(*x, gx, &mut grads);
                }
                Op::Softmax(x) => {
                    acc(*x, kernels::softmax_backward(&node.value, &g), &mut grads);
                }
                Op::Gelu(x) => {
                    acc(*x, kernels::gelu_backward(self.value(*x), &g), &mut grads);
                }
                Op::Relu(x) => {
                    let gx = self.elementwise(&g, self.value(*x), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, gx, &mut grads);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, gg, gb) =
                        kernels::layer_norm_backward(self.value(*x), self.value(*gamma), &g, *eps);
                    acc(*x, gx, &mut grads);
                    acc(*gamma, gg, &mut grads);
                    acc(*beta, gb, &mut grads);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (gx, gg, gb) = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        &g,
                        *groups,
                        *eps,
                    );
                    acc(*x, gx, &mut grads);
                    acc(*gamma, gg, &mut grads);
                    acc(*beta, gb, &mut grads);
                }
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), *spec, &g);
                    acc(*x, gx, &mut grads);
                    acc(*w, gw, &mut grads);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::Resize(x) => {
                    let gx = kernels::bilinear_resize_backward(self.shape(*x), &g);
                    acc(*x, gx, &mut grads);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        let piece = Tensor::new(
                            self.shape(*p).to_vec(),
                            g.data()[offset..offset + n].to_vec(),
                        )?;
                        offset += n;
                        acc(*p, piece, &mut grads);
                    }
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.shape(*x).to_vec(), g.item());
                    acc(*x, gx, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    ignore,
                    count,
                } => {
                    let gl = kernels::cross_entropy_backward(
                        self.value(*logits),
                        target,
                        *ignore,
                        *count,
                        g.item(),
                    );
                    acc(*logits, gl, &mut grads);
                }
                Op::Opaque { name, .. } => return Err(Error::UnsupportedOp(name.clone())),
            }
        }
        Ok(Gradients { grads })
    }

    fn elementwise(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(other.shape().to_vec(), data).expect("same shape")
    }
}

/// Gradients of a scalar with respect to every trainable leaf it depends on.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn opaque_blocks_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let y = tape
            .opaque("argmax", &[x], Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap())
            .unwrap();
        let loss = tape.sum(y).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::UnsupportedOp(name)) if name == "argmax"));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let x = tape.param(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap()).unwrap();
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn nan_is_a_hard_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(vec![1], &[0.0]).unwrap()).unwrap();
        assert!(matches!(tape.div(a, a), Err(Error::NonFinite { op: "div" })));
    }
}
