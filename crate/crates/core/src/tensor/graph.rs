//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use rand::Rng;

use super::kernels::{self, ConvGeometry, Padding, SpatialAxis};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    DepthwiseAxis {
        input: Var,
        filter: Var,
        bias: Var,
        axis: SpatialAxis,
    },
    Softmax {
        input: Var,
        axes: Vec<usize>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SpatialScale(Var, Var),
    ChannelScale(Var, Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    DiceLoss {
        probs: Var,
        targets: Tensor<T>,
        smooth: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// Graph that fails any op whose output contains NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Graph {
            check_finite: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// requires gradients and is reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::from_usize(x.numel()).unwrap());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding, stride: usize) -> Result<Var> {
        let (out, geometry) = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias), padding, stride)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &[input, kernel, bias],
        )
    }

    pub fn depthwise_axis_conv(&mut self, input: Var, axis: SpatialAxis, filter: Var, bias: Var) -> Result<Var> {
        let out = kernels::depthwise_axis_conv(self.value(input), axis, self.value(filter), self.value(bias))?;
        self.push(
            "depthwise_axis_conv",
            out,
            Op::DepthwiseAxis {
                input,
                filter,
                bias,
                axis,
            },
            &[input, filter, bias],
        )
    }

    pub fn softmax(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let out = kernels::softmax(self.value(input), axes)?;
        self.push(
            "softmax",
            out,
            Op::Softmax {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(input))?;
        self.push("maxpool2", out, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2(self.value(input))?;
        self.push("upsample2", out, Op::Upsample2(input), &[input])
    }

    /// Inverted dropout. Identity (no node recorded) outside training or at
    /// rate 0; otherwise the mask is drawn from a stream seeded by `seed`.
    pub fn dropout(&mut self, input: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mut rng = rng::rng_for(seed, &[]);
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(input).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push("dropout", out, Op::Dropout { input, mask }, &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `u[n,h,w,c] * s[n,h,w,0]` for `u: [N,H,W,C]`, `s: [N,H,W,1]`.
    pub fn spatial_scale(&mut self, u: Var, s: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(u).dims4("spatial_scale")?;
        if self.shape(s) != [n, h, w, 1] {
            return Err(Error::shape(
                "spatial_scale",
                format!("scale map must be [{n},{h},{w},1], got {:?}", self.shape(s)),
            ));
        }
        let mut out = self.value(u).clone();
        for (row, &k) in out.data_mut().chunks_mut(c).zip(self.value(s).data()) {
            for v in row {
                *v *= k;
            }
        }
        self.push("spatial_scale", out, Op::SpatialScale(u, s), &[u, s])
    }

    /// `u[n,h,w,c] * w[n,0,0,c]` for `u: [N,H,W,C]`, `w: [N,1,1,C]`.
    pub fn channel_scale(&mut self, u: Var, w: Var) -> Result<Var> {
        let [n, h, wd, c] = self.value(u).dims4("channel_scale")?;
        if self.shape(w) != [n, 1, 1, c] {
            return Err(Error::shape(
                "channel_scale",
                format!("channel weights must be [{n},1,1,{c}], got {:?}", self.shape(w)),
            ));
        }
        let mut out = self.value(u).clone();
        let weights = self.value(w).data();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let wn = &weights[(i / (h * wd)) * c..][..c];
            for (v, &k) in row.iter_mut().zip(wn) {
                *v *= k;
            }
        }
        self.push("channel_scale", out, Op::ChannelScale(u, w), &[u, w])
    }

    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = kernels::sum_axis(self.value(input), axis)?;
        self.push("sum_axis", out, Op::SumAxis { input, axis }, &[input])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(weight), self.value(bias))?;
        self.push("linear", out, Op::Linear { x, weight, bias }, &[x, weight, bias])
    }

    /// `1 - mean_c (2 I_c + s) / (P_c + T_c + s)` over the foreground classes
    /// (every class except index 0), with sums taken over all pixels of the
    /// batch. `targets` is a one-hot tensor with the same shape as `probs`.
    pub fn dice_loss(&mut self, probs: Var, targets: Tensor<T>, smooth: T) -> Result<Var> {
        if self.shape(probs) != targets.shape() {
            return Err(Error::shape(
                "dice_loss",
                format!("probabilities {:?} vs targets {:?}", self.shape(probs), targets.shape()),
            ));
        }
        let k = *targets.shape().last().unwrap_or(&0);
        if k < 2 {
            return Err(Error::shape("dice_loss", "need at least one foreground class"));
        }
        let stats = dice_stats(self.value(probs), &targets);
        let fg = T::from_usize(k - 1).unwrap();
        let two = T::from_f64_lossy(2.0);
        let mean: T = stats
            .iter()
            .skip(1)
            .map(|&(i, p, t)| (two * i + smooth) / (p + t + smooth))
            .sum::<T>()
            / fg;
        let out = Tensor::scalar(T::one() - mean);
        self.push(
            "dice_loss",
            out,
            Op::DiceLoss {
                probs,
                targets,
                smooth,
            },
            &[probs],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out and are available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            for (input, g) in self.local_grads(id, &dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn local_grads(&self, id: usize, dy: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_fn(va.shape(), |i| dy.data()[i] * vb.data()[i]);
                let gb = Tensor::from_fn(vb.shape(), |i| dy.data()[i] * va.data()[i]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, k) => vec![(*a, dy.map(|v| v * *k))],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), dy.data()[0]))],
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                vec![(*a, Tensor::full(self.shape(*a), dy.data()[0] / n))]
            }
            Op::Reshape(a) => vec![(*a, dy.clone().reshape(self.shape(*a)).unwrap())],
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = Tensor::from_fn(x.shape(), |i| {
                    if x.data()[i] > T::zero() {
                        dy.data()[i]
                    } else {
                        T::zero()
                    }
                });
                vec![(*a, g)]
            }
            Op::Sigmoid(a) => {
                let g = Tensor::from_fn(y.shape(), |i| {
                    let s = y.data()[i];
                    dy.data()[i] * s * (T::one() - s)
                });
                vec![(*a, g)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    geometry,
                    dy,
                    [self.needs(*input), self.needs(*kernel), self.needs(*bias)],
                );
                let mut out = Vec::with_capacity(3);
                out.extend(grads.input.map(|g| (*input, g)));
                out.extend(grads.kernel.map(|g| (*kernel, g)));
                out.extend(grads.bias.map(|g| (*bias, g)));
                out
            }
            Op::DepthwiseAxis {
                input,
                filter,
                bias,
                axis,
            } => {
                let (gi, gf, gb) =
                    kernels::depthwise_axis_conv_backward(self.value(*input), *axis, self.value(*filter), dy);
                vec![(*input, gi), (*filter, gf), (*bias, gb)]
            }
            Op::Softmax { input, axes } => vec![(*input, kernels::softmax_backward(y, dy, axes))],
            Op::MaxPool2 { input, argmax } => {
                let mut g = Tensor::zeros(self.shape(*input));
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    g.data_mut()[src] += d;
                }
                vec![(*input, g)]
            }
            Op::Upsample2(input) => vec![(*input, kernels::upsample2_backward(self.shape(*input), dy))],
            Op::Dropout { input, mask } => {
                let g = Tensor::from_fn(y.shape(), |i| dy.data()[i] * mask[i]);
                vec![(*input, g)]
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut start = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let chunk = self.shape(v)[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let off = o * total + start;
                            data.extend_from_slice(&dy.data()[off..off + chunk]);
                        }
                        start += chunk;
                        (v, Tensor::new(self.shape(v), data).unwrap())
                    })
                    .collect()
            }
            Op::SpatialScale(u, s) => {
                let c = self.shape(*u)[3];
                let (vu, vs) = (self.value(*u), self.value(*s));
                let gu = Tensor::from_fn(vu.shape(), |i| dy.data()[i] * vs.data()[i / c]);
                let gs = Tensor::from_fn(vs.shape(), |p| {
                    (0..c).map(|ci| dy.data()[p * c + ci] * vu.data()[p * c + ci]).sum()
                });
                vec![(*u, gu), (*s, gs)]
            }
            Op::ChannelScale(u, w) => {
                let s = self.shape(*u);
                let (hw, c) = (s[1] * s[2], s[3]);
                let (vu, vw) = (self.value(*u), self.value(*w));
                let gu = Tensor::from_fn(vu.shape(), |i| {
                    let n = i / (hw * c);
                    dy.data()[i] * vw.data()[n * c + i % c]
                });
                let mut gw = Tensor::zeros(vw.shape());
                for (i, (&d, &x)) in dy.data().iter().zip(vu.data()).enumerate() {
                    let n = i / (hw * c);
                    gw.data_mut()[n * c + i % c] += d * x;
                }
                vec![(*u, gu), (*w, gw)]
            }
            Op::SumAxis { input, axis } => {
                vec![(*input, kernels::sum_axis_backward(self.shape(*input), *axis, dy))]
            }
            Op::Linear { x, weight, bias } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let (n, cin, cout) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                let mut gx = vec![T::zero(); n * cin];
                T::gemm(n, cout, cin, dy.data(), cout, 1, vw.data(), 1, cout, T::zero(), &mut gx, cin, 1);
                let mut gw = vec![T::zero(); cin * cout];
                T::gemm(cin, n, cout, vx.data(), 1, cin, dy.data(), cout, 1, T::zero(), &mut gw, cout, 1);
                let gb = kernels::sum_axis(dy, 0).unwrap().reshape(&[cout]).unwrap();
                vec![
                    (*x, Tensor::new(vx.shape(), gx).unwrap()),
                    (*weight, Tensor::new(vw.shape(), gw).unwrap()),
                    (*bias, gb),
                ]
            }
            Op::DiceLoss {
                probs,
                targets,
                smooth,
            } => {
                let p = self.value(*probs);
                let k = *p.shape().last().unwrap();
                let stats = dice_stats(p, targets);
                let two = T::from_f64_lossy(2.0);
                let scale = -dy.data()[0] / T::from_usize(k - 1).unwrap();
                // d/dp of (2I + s) / D with D = P + T + s is (2t D - (2I + s)) / D^2.
                let coeffs: Vec<(T, T)> = stats
                    .iter()
                    .map(|&(i, ps, ts)| {
                        let d = ps + ts + *smooth;
                        (two / d, (two * i + *smooth) / (d * d))
                    })
                    .collect();
                let g = Tensor::from_fn(p.shape(), |idx| {
                    let c = idx % k;
                    if c == 0 {
                        return T::zero();
                    }
                    let (a, b) = coeffs[c];
                    scale * (a * targets.data()[idx] - b)
                });
                vec![(*probs, g)]
            }
        }
    }
}

/// Per-class `(intersection, prob mass, target mass)` over all pixels.
fn dice_stats<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Vec<(T, T, T)> {
    let k = *probs.shape().last().unwrap();
    let mut stats = vec![(T::zero(), T::zero(), T::zero()); k];
    for (prow, trow) in probs.data().chunks(k).zip(targets.data().chunks(k)) {
        for c in 0..k {
            let s = &mut stats[c];
            s.0 += prow[c] * trow[c];
            s.1 += prow[c];
            s.2 += trow[c];
        }
    }
    stats
}
