//! Forward and backward kernels on raw tensors. The graph in `graph.rs`
//! records which of these to call; nothing here knows about autodiff.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Spatial axis of an NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialAxis {
    H,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        let &[n, h, w, cin] = input else {
            return Err(Error::shape(OP, format!("input must be [N,H,W,Cin], got {input:?}")));
        };
        let &[kh, kw, kcin, cout] = kernel else {
            return Err(Error::shape(OP, format!("kernel must be [kh,kw,Cin,Cout], got {kernel:?}")));
        };
        if stride == 0 {
            return Err(Error::shape(OP, "stride must be at least 1"));
        }
        if kcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channel axis (3) has {cin} but kernel Cin axis (2) has {kcin}"),
            ));
        }
        if bias != [cout] {
            return Err(Error::shape(
                OP,
                format!("bias must be [{cout}] to match kernel Cout axis (3), got {bias:?}"),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape(OP, "kernel spatial extents must be positive"));
        }
        let (out_h, pad_top) = out_extent(h, kh, stride, padding)
            .ok_or_else(|| Error::shape(OP, format!("height axis (1) {h} smaller than kernel height {kh}")))?;
        let (out_w, pad_left) = out_extent(w, kw, stride, padding)
            .ok_or_else(|| Error::shape(OP, format!("width axis (2) {w} smaller than kernel width {kw}")))?;
        Ok(ConvGeometry {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Output extent and leading pad; "same" splits odd padding with the extra
/// element at the trailing edge.
fn out_extent(len: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (len >= k).then(|| ((len - k) / stride + 1, 0)),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Some((out, total / 2))
        }
    }
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = (oy * g.out_w + ox) * k;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = base + (ky * g.kw + kx) * g.cin;
                    let dst = &mut cols[dst..dst + g.cin];
                    if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&input[src..src + g.cin]);
                    } else {
                        dst.fill(T::zero());
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, grad_in: &mut [T]) {
    let k = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let base = (oy * g.out_w + ox) * k;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let src = base + (ky * g.kw + kx) * g.cin;
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, &s) in grad_in[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, NHWC input, `[kh, kw, Cin, Cout]` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
    stride: usize,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), bias.shape(), padding, stride)?;
    let (p, k) = (g.positions(), g.patch_len());
    let in_stride = g.h * g.w * g.cin;
    let out_stride = p * g.cout;
    let mut out = vec![T::zero(); g.n * out_stride];
    for chunk in out.chunks_mut(g.cout) {
        chunk.copy_from_slice(bias.data());
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); p * k] };
    for n in 0..g.n {
        let x = &input.data()[n * in_stride..(n + 1) * in_stride];
        let a: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        let c = &mut out[n * out_stride..(n + 1) * out_stride];
        T::gemm(p, k, g.cout, a, k, 1, kernel.data(), g.cout, 1, T::one(), c, g.cout, 1);
    }
    Ok((Tensor::new(&[g.n, g.out_h, g.out_w, g.cout], out)?, g))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &ConvGeometry,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let (p, k) = (g.positions(), g.patch_len());
    let in_stride = g.h * g.w * g.cin;
    let out_stride = p * g.cout;
    let mut d_in = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut d_k = need[1].then(|| vec![T::zero(); kernel.numel()]);
    let d_b = need[2].then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for row in grad_out.data().chunks(g.cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        acc
    });

    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { p * k }];
    let mut d_cols = vec![T::zero(); if d_in.is_some() { p * k } else { 0 }];
    for n in 0..g.n {
        let dy = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
        if let Some(dk) = d_k.as_mut() {
            let x = &input.data()[n * in_stride..(n + 1) * in_stride];
            let a: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut cols);
                &cols
            };
            // dK[k, co] += sum_p cols[p, k] * dy[p, co]
            T::gemm(k, p, g.cout, a, 1, k, dy, g.cout, 1, T::one(), dk, g.cout, 1);
        }
        if let Some(di) = d_in.as_mut() {
            let di = &mut di[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                T::gemm(p, g.cout, k, dy, g.cout, 1, kernel.data(), 1, g.cout, T::one(), di, k, 1);
            } else {
                T::gemm(p, g.cout, k, dy, g.cout, 1, kernel.data(), 1, g.cout, T::zero(), &mut d_cols, k, 1);
                col2im_add(&d_cols, g, di);
            }
        }
    }
    ConvGrads {
        input: d_in.map(|d| Tensor::new(input.shape(), d).unwrap()),
        kernel: d_k.map(|d| Tensor::new(kernel.shape(), d).unwrap()),
        bias: d_b.map(|d| Tensor::new(&[g.cout], d).unwrap()),
    }
}

/// Per-channel 1-D filter applied along one spatial axis, collapsing it to 1.
pub fn depthwise_axis_conv<T: Scalar>(
    input: &Tensor<T>,
    axis: SpatialAxis,
    filter: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "depthwise_axis_conv";
    let [n, h, w, c] = input.dims4(OP)?;
    let len = match axis {
        SpatialAxis::H => h,
        SpatialAxis::W => w,
    };
    if filter.shape() != [len, c] {
        return Err(Error::shape(
            OP,
            format!(
                "filter must be [{len}, {c}] for axis {axis:?} of input {:?}, got {:?}",
                input.shape(),
                filter.shape()
            ),
        ));
    }
    if bias.shape() != [c] {
        return Err(Error::shape(OP, format!("bias must be [{c}], got {:?}", bias.shape())));
    }
    let (x, f, b) = (input.data(), filter.data(), bias.data());
    match axis {
        SpatialAxis::H => {
            let mut out = vec![T::zero(); n * w * c];
            for ni in 0..n {
                for wi in 0..w {
                    let o = &mut out[(ni * w + wi) * c..(ni * w + wi + 1) * c];
                    o.copy_from_slice(b);
                    for hi in 0..h {
                        let src = ((ni * h + hi) * w + wi) * c;
                        for ci in 0..c {
                            o[ci] += f[hi * c + ci] * x[src + ci];
                        }
                    }
                }
            }
            Tensor::new(&[n, 1, w, c], out)
        }
        SpatialAxis::W => {
            let mut out = vec![T::zero(); n * h * c];
            for ni in 0..n {
                for hi in 0..h {
                    let o = &mut out[(ni * h + hi) * c..(ni * h + hi + 1) * c];
                    o.copy_from_slice(b);
                    for wi in 0..w {
                        let src = ((ni * h + hi) * w + wi) * c;
                        for ci in 0..c {
                            o[ci] += f[wi * c + ci] * x[src + ci];
                        }
                    }
                }
            }
            Tensor::new(&[n, h, 1, c], out)
        }
    }
}

pub fn depthwise_axis_conv_backward<T: Scalar>(
    input: &Tensor<T>,
    axis: SpatialAxis,
    filter: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (x, f, dy) = (input.data(), filter.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut df = vec![T::zero(); f.len()];
    let mut db = vec![T::zero(); c];
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let (g_idx, f_row) = match axis {
                    SpatialAxis::H => ((ni * w + wi) * c, hi),
                    SpatialAxis::W => ((ni * h + hi) * c, wi),
                };
                let src = ((ni * h + hi) * w + wi) * c;
                for ci in 0..c {
                    let g = dy[g_idx + ci];
                    dx[src + ci] = f[f_row * c + ci] * g;
                    df[f_row * c + ci] += x[src + ci] * g;
                }
            }
        }
    }
    for row in dy.chunks(c) {
        for (a, &v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    (
        Tensor::new(s, dx).unwrap(),
        Tensor::new(filter.shape(), df).unwrap(),
        Tensor::new(&[c], db).unwrap(),
    )
}

/// Flat-index layout of a reduction over a set of axes: one `base` per kept
/// coordinate, one `offset` per reduced coordinate.
pub struct ReductionPlan {
    pub bases: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl ReductionPlan {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::shape("reduction", "axis set must not be empty"));
        }
        if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape(
                "reduction",
                format!("axis {a} out of range for shape {shape:?}"),
            ));
        }
        let mut strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let expand = |dims: Vec<usize>| {
            let mut out = vec![0usize];
            for d in dims {
                let stride = strides[d];
                out = out
                    .iter()
                    .flat_map(|&o| (0..shape[d]).map(move |i| o + i * stride))
                    .collect();
            }
            out
        };
        let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let reduced: Vec<usize> = (0..shape.len()).filter(|d| axes.contains(d)).collect();
        Ok(ReductionPlan {
            bases: expand(kept),
            offsets: expand(reduced),
        })
    }
}

/// Max-subtracted softmax over `axes`.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let plan = ReductionPlan::new(input.shape(), axes)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for &b in &plan.bases {
        let max = plan
            .offsets
            .iter()
            .map(|&o| x[b + o])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &o in &plan.offsets {
            let e = (x[b + o] - max).exp();
            out[b + o] = e;
            total += e;
        }
        for &o in &plan.offsets {
            out[b + o] /= total;
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let plan = ReductionPlan::new(output.shape(), axes).expect("validated in forward");
    let (y, dy) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for &b in &plan.bases {
        let dot: T = plan.offsets.iter().map(|&o| y[b + o] * dy[b + o]).sum();
        for &o in &plan.offsets {
            dx[b + o] = y[b + o] * (dy[b + o] - dot);
        }
    }
    Tensor::new(output.shape(), dx).unwrap()
}

/// 2×2 stride-2 max pooling. Returns the output and the flat input index of
/// each window's maximum (first maximum in scan order on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, h, w, c] = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!(
                "spatial extents must be even, got H={h} W={w}; pad the input to a multiple of \
                 2^(depth-1) before building the network"
            ),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best = input.idx4(ni, 2 * oy, 2 * ox, ci);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = input.idx4(ni, 2 * oy + dy, 2 * ox + dx, ci);
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, oh, ow, c], out)?, arg))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("upsample2")?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * 4 * h * w * c);
    for ni in 0..n {
        for y in 0..2 * h {
            for xw in 0..2 * w {
                let src = input.idx4(ni, y / 2, xw / 2, 0);
                out.extend_from_slice(&x[src..src + c]);
            }
        }
    }
    Tensor::new(&[n, 2 * h, 2 * w, c], out)
}

pub fn upsample2_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let dy = grad_out.data();
    for ni in 0..n {
        for y in 0..2 * h {
            for xw in 0..2 * w {
                let src = ((ni * 2 * h + y) * 2 * w + xw) * c;
                let dst = dx.idx4(ni, y / 2, xw / 2, 0);
                for ci in 0..c {
                    dx.data_mut()[dst + ci] += dy[src + ci];
                }
            }
        }
    }
    dx
}

/// Sum over one axis, keeping it with extent 1.
pub fn sum_axis<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let x = input.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = (o * len + l) * inner;
            for i in 0..inner {
                out[o * inner + i] += x[src + i];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 1;
    Tensor::new(&out_shape, out)
}

pub fn sum_axis_backward<T: Scalar>(input_shape: &[usize], axis: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let outer: usize = input_shape[..axis].iter().product();
    let len = input_shape[axis];
    let inner: usize = input_shape[axis + 1..].iter().product();
    let dy = grad_out.data();
    let mut dx = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            dx.extend_from_slice(&dy[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(input_shape, dx).unwrap()
}

/// `x [N, Cin] · weight [Cin, Cout] + bias [Cout]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, cin], &[wcin, cout]) = (x.shape(), weight.shape()) else {
        return Err(Error::shape(
            "linear",
            format!("expected x [N,Cin] and weight [Cin,Cout], got {:?} and {:?}", x.shape(), weight.shape()),
        ));
    };
    if wcin != cin {
        return Err(Error::shape(
            "linear",
            format!("x feature axis (1) has {cin} but weight input axis (0) has {wcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("linear", format!("bias must be [{cout}], got {:?}", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, cin, cout, x.data(), cin, 1, weight.data(), cout, 1, T::one(), &mut out, cout, 1);
    Tensor::new(&[n, cout], out)
}
