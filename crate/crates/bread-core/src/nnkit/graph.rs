//! Tape-based reverse-mode autodiff over the fixed primitive set used by the
//! sub-networks and their losses.
//!
//! Values are appended in topological order, so the backward sweep is a single
//! reverse pass. Gradients are retained for leaves only (parameters and
//! inputs); intermediate gradients are dropped as soon as they have been
//! propagated, which bounds memory to roughly one extra activation set.

use super::kernels as k;
use super::real::Real;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

enum Op {
    Leaf,
    Conv3x3 { x: ValueId, w: ValueId, b: ValueId, out_c: usize },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    MaxPool2 { x: ValueId, idx: Vec<u32> },
    Upsample2 { x: ValueId },
    ConcatC { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Div { a: ValueId, b: ValueId },
    AddScalar { x: ValueId },
    MulScalar { x: ValueId, s: f64 },
    Abs { x: ValueId },
    Exp { x: ValueId },
    Dx { x: ValueId },
    Dy { x: ValueId },
    BlurValid { x: ValueId, taps_n: usize, sigma: f64 },
    Mean { x: ValueId },
    Sum { x: ValueId },
}

struct Node<T> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert!(a.same_shape(b), "elementwise shape mismatch");
    let (c, h, w) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(c, h, w, data)
}

fn acc<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// The value of a `(1,1,1)` node.
    pub fn scalar(&self, id: ValueId) -> T {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1, 1), "node is not a scalar");
        v.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant (`needs_grad = false`) or parameter (`true`) value.
    pub fn leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> ValueId {
        self.push(t, needs_grad, Op::Leaf)
    }

    /// 3x3 convolution; `w` is a `(1, out_c, in_c*9)` leaf, `b` a
    /// `(1, 1, out_c)` leaf.
    pub fn conv3x3(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let (in_c, _, _) = self.value(x).shape();
        let (wc, out_c, wk) = self.value(w).shape();
        assert_eq!(wc, 1, "conv weight carrier must be (1, out_c, in_c*9)");
        assert_eq!(wk, in_c * 9, "conv weight row length mismatch");
        assert_eq!(self.value(b).shape(), (1, 1, out_c), "conv bias shape");
        let out = k::conv3x3(
            self.value(x),
            self.value(w).data(),
            self.value(b).data(),
            out_c,
        );
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, ng, Op::Conv3x3 { x, w, b, out_c })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = k::relu(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = k::sigmoid(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::Sigmoid { x })
    }

    pub fn maxpool2(&mut self, x: ValueId) -> ValueId {
        let (out, idx) = k::maxpool2x2(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::MaxPool2 { x, idx })
    }

    pub fn upsample2(&mut self, x: ValueId) -> ValueId {
        let out = k::upsample2x(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::Upsample2 { x })
    }

    pub fn concat_c(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = k::concat_c(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::ConcatC { a, b })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let out = zip(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, ng, Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, x: ValueId, s: f64) -> ValueId {
        let sv = T::from_f64(s);
        let out = self.value(x).map(|v| v + sv);
        let ng = self.needs(x);
        self.push(out, ng, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: ValueId, s: f64) -> ValueId {
        let sv = T::from_f64(s);
        let out = self.value(x).map(|v| v * sv);
        let ng = self.needs(x);
        self.push(out, ng, Op::MulScalar { x, s })
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.abs());
        let ng = self.needs(x);
        self.push(out, ng, Op::Abs { x })
    }

    pub fn exp(&mut self, x: ValueId) -> ValueId {
        let out = self.value(x).map(|v| v.exp());
        let ng = self.needs(x);
        self.push(out, ng, Op::Exp { x })
    }

    pub fn dx(&mut self, x: ValueId) -> ValueId {
        let out = k::dx(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::Dx { x })
    }

    pub fn dy(&mut self, x: ValueId) -> ValueId {
        let out = k::dy(self.value(x));
        let ng = self.needs(x);
        self.push(out, ng, Op::Dy { x })
    }

    pub fn blur_valid(&mut self, x: ValueId, taps_n: usize, sigma: f64) -> ValueId {
        let taps = k::gaussian_taps::<T>(taps_n, sigma);
        let out = k::blur_valid(self.value(x), &taps);
        let ng = self.needs(x);
        self.push(out, ng, Op::BlurValid { x, taps_n, sigma })
    }

    /// Mean over all elements, `f64`-accumulated; result is a scalar node.
    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let m = T::from_f64(self.value(x).mean_f64());
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), ng, Op::Mean { x })
    }

    /// Sum over all elements, `f64`-accumulated; result is a scalar node.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let s = T::from_f64(self.value(x).sum_f64());
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), ng, Op::Sum { x })
    }

    /// Mean squared error between two same-shaped nodes, as a scalar node.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from a finite scalar `loss` node. Returns gradients for
    /// every leaf with `needs_grad` on the path to the loss.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1, 1) {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss node, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv3x3 { x, w, b, out_c } => {
                    let need_gx = self.needs(*x);
                    let cg = k::conv3x3_backward(
                        self.value(*x),
                        self.value(*w).data(),
                        *out_c,
                        &g,
                        need_gx,
                    );
                    if self.needs(*w) {
                        let (_, oc, wk) = self.value(*w).shape();
                        acc(&mut grads[w.0], Tensor::from_vec(1, oc, wk, cg.gw));
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], Tensor::from_vec(1, 1, *out_c, cg.gb));
                    }
                    if let Some(gx) = cg.gx {
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Relu { x } => {
                    acc(&mut grads[x.0], k::relu_backward(self.value(*x), &g));
                }
                Op::Sigmoid { x } => {
                    acc(&mut grads[x.0], k::sigmoid_backward(&node.value, &g));
                }
                Op::MaxPool2 { x, idx } => {
                    let shape = self.value(*x).shape();
                    acc(&mut grads[x.0], k::maxpool2x2_backward(&g, idx, shape));
                }
                Op::Upsample2 { x } => {
                    acc(&mut grads[x.0], k::upsample2x_backward(&g));
                }
                Op::ConcatC { a, b } => {
                    let (ga, gb) = k::concat_c_backward(&g, self.value(*a).c());
                    if self.needs(*a) {
                        acc(&mut grads[a.0], ga);
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        acc(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        acc(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], g.map(|v| -v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        acc(&mut grads[a.0], zip(&g, self.value(*b), |gv, bv| gv * bv));
                    }
                    if self.needs(*b) {
                        acc(&mut grads[b.0], zip(&g, self.value(*a), |gv, av| gv * av));
                    }
                }
                Op::Div { a, b } => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        acc(&mut grads[a.0], zip(&g, bv, |gv, b_| gv / b_));
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        let mut gb = zip(av, bv, |a_, b_| -a_ / (b_ * b_));
                        gb = zip(&gb, &g, |d, gv| d * gv);
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::AddScalar { x } => {
                    acc(&mut grads[x.0], g.clone());
                }
                Op::MulScalar { x, s } => {
                    let sv = T::from_f64(*s);
                    acc(&mut grads[x.0], g.map(|v| v * sv));
                }
                Op::Abs { x } => {
                    // subgradient at zero taken as zero
                    let gx = zip(&g, self.value(*x), |gv, xv| {
                        if xv > T::ZERO {
                            gv
                        } else if xv < T::ZERO {
                            -gv
                        } else {
                            T::ZERO
                        }
                    });
                    acc(&mut grads[x.0], gx);
                }
                Op::Exp { x } => {
                    acc(&mut grads[x.0], zip(&g, &node.value, |gv, ov| gv * ov));
                }
                Op::Dx { x } => {
                    acc(&mut grads[x.0], k::dx_adjoint(&g));
                }
                Op::Dy { x } => {
                    acc(&mut grads[x.0], k::dy_adjoint(&g));
                }
                Op::BlurValid { x, taps_n, sigma } => {
                    let taps = k::gaussian_taps::<T>(*taps_n, *sigma);
                    let (_, hi, wi) = self.value(*x).shape();
                    acc(&mut grads[x.0], k::blur_valid_adjoint(&g, &taps, hi, wi));
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.shape();
                    let scale = g.data()[0] * T::from_f64(1.0 / xv.len() as f64);
                    acc(&mut grads[x.0], Tensor::filled(c, h, w, scale));
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.shape();
                    acc(&mut grads[x.0], Tensor::filled(c, h, w, g.data()[0]));
                }
            }
            // intermediate gradients are no longer needed once propagated
        }
        Ok(Gradients { grads })
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaf_has_gradient_of_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]), true);
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(1, 1, 2, vec![0.5, 0.9]), true);
        let b = tape.leaf(Tensor::from_vec(1, 1, 2, vec![0.1, 1.0]), false);
        let l = tape.mse(a, b);
        assert!((tape.scalar(l) - ((0.4f64 * 0.4 + 0.1 * 0.1) / 2.0)).abs() < 1e-15);
        let grads = tape.backward(l).unwrap();
        let ga = grads.get(a).unwrap();
        // d/da mean((a-b)^2) = 2(a-b)/n
        assert!((ga.data()[0] - 2.0 * 0.4 / 2.0).abs() < 1e-15);
        assert!((ga.data()[1] - 2.0 * (-0.1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // loss = mean(x * x) + sum(x): dL/dx = 2x/n + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(1, 1, 2, vec![3.0, -2.0]), true);
        let sq = tape.mul(x, x);
        let m = tape.mean(sq);
        let s = tape.sum(x);
        let l = tape.add(m, s);
        let grads = tape.backward(l).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g.data()[0] - (2.0 * 3.0 / 2.0 + 1.0)).abs() < 1e-15);
        assert!((g.data()[1] - (2.0 * -2.0 / 2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_leaves_do_not_collect_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let c = tape.leaf(Tensor::scalar(5.0), false);
        let p = tape.mul(x, c);
        let l = tape.sum(p);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::scalar(1.0), true);
        let z = tape.leaf(Tensor::scalar(0.0), false);
        let d = tape.div(a, z);
        let l = tape.sum(d);
        assert!(matches!(tape.backward(l), Err(Error::Numeric(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(1, 2, 2), true);
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }
}
