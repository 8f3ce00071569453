//! Define-by-run reverse-mode autodiff over dynamic-shape `ndarray` tensors.
//!
//! Every operation appends a node to the tape; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for the leaves that requested
//! them. Intermediate gradients are dropped as soon as their node has been
//! processed, so peak memory stays proportional to the activations plus the
//! widest gradient frontier.

use crate::kernels;
use crate::Scalar;
use ndarray::{ArrayD, ArrayView1, ArrayView3, ArrayView4, Axis, Ix1, Ix3, Ix4, IxDyn, Slice};

/// Handle to a tape node. Cheap to copy; only valid for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, F),
    Offset(usize, F),
    Square(usize),
    Abs(usize),
    SumAll(usize),
    MeanAll(usize),
    Relu(usize),
    LeakyRelu(usize, F),
    Tanh(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Slice3 {
        x: usize,
        c: (usize, usize),
        i: (usize, usize),
        j: (usize, usize),
    },
    ConcatC(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<F>,
        inv_std: Vec<F>,
    },
    MaxPool2 {
        x: usize,
        idx: Vec<u32>,
    },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Gradient buffers produced by [`Tape::backward`]. Only leaves created with
/// `needs_grad` retain entries.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if it was retained.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Move the gradient for `v` out of the buffer.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording of one forward computation.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn log_sigmoid_stable<F: Scalar>(x: F) -> F {
    x.min(F::zero()) - (-x.abs()).exp().ln_1p()
}

fn accumulate<F: Scalar>(slot: &mut Option<ArrayD<F>>, delta: ArrayD<F>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Register an input tensor. Gradients are retained only when
    /// `needs_grad` is set.
    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> Var {
        self.push(value, needs_grad, Op::Leaf)
    }

    /// Register a constant tensor (no gradient).
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a node viewed as a (C, H, W) tensor.
    pub fn value3(&self, v: Var) -> ArrayView3<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("node is not rank 3")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> F {
        let value = &self.nodes[v.0].value;
        assert_eq!(value.len(), 1, "node is not a scalar");
        *value.iter().next().unwrap()
    }

    fn view3(&self, v: Var) -> ArrayView3<'_, F> {
        self.value3(v)
    }

    fn view4(&self, v: Var) -> ArrayView4<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("node is not rank 4")
    }

    fn view1(&self, v: Var) -> ArrayView1<'_, F> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("node is not rank 1")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Sub(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| -v);
        let ng = self.needs(a);
        self.push(value, ng, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        let ng = self.needs(a);
        self.push(value, ng, Op::Scale(a.0, k))
    }

    pub fn offset(&mut self, a: Var, k: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v + k);
        let ng = self.needs(a);
        self.push(value, ng, Op::Offset(a.0, k))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * v);
        let ng = self.needs(a);
        self.push(value, ng, Op::Square(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.abs());
        let ng = self.needs(a);
        self.push(value, ng, Op::Abs(a.0))
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), ng, Op::SumAll(a.0))
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.nodes[a.0].value.len();
        assert!(len > 0, "mean of empty tensor");
        let s = self.nodes[a.0].value.sum() / F::from_usize(len).unwrap();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), ng, Op::MeanAll(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(F::zero()));
        let ng = self.needs(a);
        self.push(value, ng, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|v| if v > F::zero() { v } else { v * slope });
        let ng = self.needs(a);
        self.push(value, ng, Op::LeakyRelu(a.0, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.tanh());
        let ng = self.needs(a);
        self.push(value, ng, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_stable);
        let ng = self.needs(a);
        self.push(value, ng, Op::Sigmoid(a.0))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(log_sigmoid_stable);
        let ng = self.needs(a);
        self.push(value, ng, Op::LogSigmoid(a.0))
    }

    /// Crop a (C, H, W) node to `c0..c1` x `i0..i1` x `j0..j1`.
    #[allow(clippy::too_many_arguments)]
    pub fn slice3(
        &mut self,
        a: Var,
        c0: usize,
        c1: usize,
        i0: usize,
        i1: usize,
        j0: usize,
        j1: usize,
    ) -> Var {
        let v = self.view3(a);
        let (c, h, w) = v.dim();
        assert!(c0 < c1 && c1 <= c, "channel slice out of range");
        assert!(i0 < i1 && i1 <= h, "row slice out of range");
        assert!(j0 < j1 && j1 <= w, "column slice out of range");
        let value = v
            .slice_axis(Axis(0), Slice::from(c0..c1))
            .slice_axis(Axis(1), Slice::from(i0..i1))
            .slice_axis(Axis(2), Slice::from(j0..j1))
            .to_owned()
            .into_dyn();
        let ng = self.needs(a);
        self.push(
            value,
            ng,
            Op::Slice3 {
                x: a.0,
                c: (c0, c1),
                i: (i0, i1),
                j: (j0, j1),
            },
        )
    }

    /// Concatenate two (C, H, W) nodes along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let va = self.view3(a);
        let vb = self.view3(b);
        assert_eq!(va.dim().1, vb.dim().1, "concat heights");
        assert_eq!(va.dim().2, vb.dim().2, "concat widths");
        let value = ndarray::concatenate(Axis(0), &[va, vb])
            .expect("concat")
            .into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::ConcatC(a.0, b.0))
    }

    /// 2-D convolution of a (C, H, W) node with an (OC, IC, k, k) kernel and
    /// an (OC) bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d_forward(
            &self.view3(x),
            &self.view4(w),
            &self.view1(b),
            stride,
            pad,
        )
        .into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            value,
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    /// Transposed 2-D convolution with an (IC, OC, k, k) kernel.
    pub fn conv_t2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = kernels::conv_t2d_forward(
            &self.view3(x),
            &self.view4(w),
            &self.view1(b),
            stride,
            pad,
        )
        .into_dyn();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            value,
            ng,
            Op::ConvT2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
        )
    }

    /// Per-channel instance normalization with affine parameters.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (value, mean, inv_std) = kernels::instance_norm_forward(
            &self.view3(x),
            &self.view1(gamma),
            &self.view1(beta),
            eps,
        );
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value.into_dyn(),
            ng,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                inv_std,
            },
        )
    }

    /// 2x2 stride-2 max pooling of a (C, H, W) node with even H and W.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let v = self.view3(x);
        let (_, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even extents");
        let (value, idx) = kernels::max_pool2_forward(&v);
        let ng = self.needs(x);
        self.push(value.into_dyn(), ng, Op::MaxPool2 { x: x.0, idx })
    }

    /// Run reverse-mode accumulation from a scalar `root`. Gradients for
    /// `needs_grad` leaves are retained; everything else is dropped on the
    /// fly.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root not scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves are filtered by backward"),
            Op::Add(a, b) => {
                if self.nodes[*b].needs_grad {
                    accumulate(&mut grads[*b], g.clone());
                }
                if self.nodes[*a].needs_grad {
                    accumulate(&mut grads[*a], g);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*b].needs_grad {
                    accumulate(&mut grads[*b], g.mapv(|v| -v));
                }
                if self.nodes[*a].needs_grad {
                    accumulate(&mut grads[*a], g);
                }
            }
            Op::Neg(a) => accumulate(&mut grads[*a], g.mapv(|v| -v)),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(&mut grads[*a], g.mapv(|v| v * k));
            }
            Op::Offset(a, _) => accumulate(&mut grads[*a], g),
            Op::Square(a) => {
                let two = F::lit(2.0);
                let mut d = g;
                d.zip_mut_with(&self.nodes[*a].value, |gv, &xv| *gv = *gv * two * xv);
                accumulate(&mut grads[*a], d);
            }
            Op::Abs(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[*a].value, |gv, &xv| *gv *= xv.signum());
                accumulate(&mut grads[*a], d);
            }
            Op::SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                let d = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gv);
                accumulate(&mut grads[*a], d);
            }
            Op::MeanAll(a) => {
                let len = self.nodes[*a].value.len();
                let gv = *g.iter().next().unwrap() / F::from_usize(len).unwrap();
                let d = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gv);
                accumulate(&mut grads[*a], d);
            }
            Op::Relu(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[*a].value, |gv, &xv| {
                    if xv <= F::zero() {
                        *gv = F::zero();
                    }
                });
                accumulate(&mut grads[*a], d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mut d = g;
                d.zip_mut_with(&self.nodes[*a].value, |gv, &xv| {
                    if xv <= F::zero() {
                        *gv *= slope;
                    }
                });
                accumulate(&mut grads[*a], d);
            }
            Op::Tanh(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[i].value, |gv, &yv| {
                    *gv *= F::one() - yv * yv
                });
                accumulate(&mut grads[*a], d);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[i].value, |gv, &yv| {
                    *gv = *gv * yv * (F::one() - yv)
                });
                accumulate(&mut grads[*a], d);
            }
            Op::LogSigmoid(a) => {
                let mut d = g;
                d.zip_mut_with(&self.nodes[*a].value, |gv, &xv| {
                    *gv *= sigmoid_stable(-xv)
                });
                accumulate(&mut grads[*a], d);
            }
            Op::Slice3 { x, c, i: ri, j } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let mut d = ArrayD::<F>::zeros(IxDyn(&shape));
                {
                    let mut d3 = d
                        .view_mut()
                        .into_dimensionality::<Ix3>()
                        .expect("slice grad buffer");
                    let g3 = g.view().into_dimensionality::<Ix3>().expect("slice grad");
                    let mut window =
                        d3.slice_mut(ndarray::s![c.0..c.1, ri.0..ri.1, j.0..j.1]);
                    window.zip_mut_with(&g3, |w, &gv| *w += gv);
                }
                accumulate(&mut grads[*x], d);
            }
            Op::ConcatC(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let cb = self.nodes[*b].value.shape()[0];
                if self.nodes[*a].needs_grad {
                    let da = g.slice_axis(Axis(0), Slice::from(0..ca)).to_owned();
                    accumulate(&mut grads[*a], da);
                }
                if self.nodes[*b].needs_grad {
                    let db = g.slice_axis(Axis(0), Slice::from(ca..ca + cb)).to_owned();
                    accumulate(&mut grads[*b], db);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("conv grad");
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &self.view3(Var(*x)),
                    &self.view4(Var(*w)),
                    &g3,
                    *stride,
                    *pad,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[*x], gx.into_dyn());
                }
                if let Some(gw) = gw {
                    let shape = self.nodes[*w].value.raw_dim();
                    accumulate(&mut grads[*w], gw.into_shape(shape).expect("gw reshape"));
                }
                if self.nodes[*b].needs_grad {
                    accumulate(&mut grads[*b], gb.into_dyn());
                }
            }
            Op::ConvT2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("conv_t grad");
                let (gx, gw, gb) = kernels::conv_t2d_backward(
                    &self.view3(Var(*x)),
                    &self.view4(Var(*w)),
                    &g3,
                    *stride,
                    *pad,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                );
                if let Some(gx) = gx {
                    accumulate(&mut grads[*x], gx.into_dyn());
                }
                if let Some(gw) = gw {
                    let shape = self.nodes[*w].value.raw_dim();
                    accumulate(&mut grads[*w], gw.into_shape(shape).expect("gw reshape"));
                }
                if self.nodes[*b].needs_grad {
                    accumulate(&mut grads[*b], gb.into_dyn());
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("norm grad");
                let (gx, gg, gb) = kernels::instance_norm_backward(
                    &self.view3(Var(*x)),
                    &self.view1(Var(*gamma)),
                    &g3,
                    mean,
                    inv_std,
                );
                if self.nodes[*x].needs_grad {
                    accumulate(&mut grads[*x], gx.into_dyn());
                }
                if self.nodes[*gamma].needs_grad {
                    accumulate(&mut grads[*gamma], gg.into_dyn());
                }
                if self.nodes[*beta].needs_grad {
                    accumulate(&mut grads[*beta], gb.into_dyn());
                }
            }
            Op::MaxPool2 { x, idx } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("pool grad");
                let shape = self.nodes[*x].value.shape().to_vec();
                let mut d = ArrayD::<F>::zeros(IxDyn(&shape));
                {
                    let mut d3 = d
                        .view_mut()
                        .into_dimensionality::<Ix3>()
                        .expect("pool grad buffer");
                    kernels::max_pool2_backward(&g3, idx, &mut d3);
                }
                accumulate(&mut grads[*x], d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn scalar_chain_matches_hand_derivative() {
        // f(x) = mean((2x + 1)^2) at x = [1, 2]; df/dx = 2(2x + 1).
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn(), true);
        let s = tape.scale(x, 2.0);
        let o = tape.offset(s, 1.0);
        let q = tape.square(o);
        let loss = tape.mean_all(q);
        assert_eq!(tape.scalar(loss), (9.0 + 25.0) / 2.0);
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[0]], 2.0 * 3.0 * 2.0 / 2.0);
        assert_eq!(gx[[1]], 2.0 * 5.0 * 2.0 / 2.0);
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[-200.0, 0.0, 200.0]).into_dyn(), true);
        let y = tape.log_sigmoid(x);
        let v = tape.value(y);
        assert!((v[[0]] - (-200.0)).abs() < 1e-9);
        assert!((v[[1]] - (-(2.0f64).ln())).abs() < 1e-12);
        assert!(v[[2]].abs() < 1e-12);
        assert!(v.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn constant_branches_are_not_differentiated() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(arr1(&[1.0]).into_dyn(), true);
        let c = tape.constant(arr1(&[5.0]).into_dyn());
        let y = tape.add(x, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[[0]], 1.0);
    }
}
