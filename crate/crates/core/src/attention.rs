//! Attention blocks for the U-Net backbone.
//!
//! The MSE block adds two softmax-gated branches:
//!
//! * **sSE**: a 1×1 convolution collapses channels to a single map, which is
//!   softmax-normalised over all `H×W` positions and used to rescale every
//!   pixel of the input.
//! * **cSE**: two per-channel 1-D depth-wise filters squeeze the `H` axis and
//!   then the `W` axis, giving one logit per channel; a softmax over channels
//!   rescales the input channel-wise.
//!
//! No fully-connected layers are involved, so the block costs
//! `(C+1) + C·H + C·W + 2C` parameters and is bound to one `(H, W, C)`.
//!
//! The sigmoid-gated concurrent scSE and plain SE blocks are kept as
//! baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{Padding, SpatialAxis};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Optional compensation for the magnitude loss of literal softmax gating.
/// `Count` multiplies sSE weights by `H·W` and cSE weights by `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScale {
    #[default]
    None,
    Count,
}

/// Hidden width of the fully-connected excitation in the SE baselines.
pub const FC_REDUCTION: usize = 2;

pub fn reduced_width(channels: usize) -> usize {
    (channels / FC_REDUCTION).max(1)
}

/// Parameters of one MSE block, bound to a fixed `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseBlockParams<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[1, 1, C, 1]`
    pub sse_kernel: Tensor<T>,
    /// `[1]`
    pub sse_bias: Tensor<T>,
    /// `[H, C]`
    pub cse_filter_h: Tensor<T>,
    /// `[W, C]`
    pub cse_filter_w: Tensor<T>,
    pub cse_bias_h: Tensor<T>,
    pub cse_bias_w: Tensor<T>,
}

/// Softmax-normalised channel weights produced by a cSE squeeze.
#[derive(Debug, Clone)]
pub struct SqueezeVector<T> {
    /// Unnormalised logits, `[N, C]`.
    pub z: Tensor<T>,
    /// `softmax(z)` over channels, `[N, C]`.
    pub w: Tensor<T>,
}

impl<T: Scalar> MseBlockParams<T> {
    pub const NAMES: [&'static str; 6] = [
        "sse_kernel",
        "sse_bias",
        "cse_filter_h",
        "cse_filter_w",
        "cse_bias_h",
        "cse_bias_w",
    ];

    /// He-uniform pixel-wise kernel; squeeze filters start as plain means
    /// (`1/H`, `1/W`); zero biases.
    pub fn init(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Self {
        MseBlockParams {
            height,
            width,
            channels,
            sse_kernel: Tensor::he_uniform(&[1, 1, channels, 1], channels, rng),
            sse_bias: Tensor::zeros(&[1]),
            cse_filter_h: Tensor::full(&[height, channels], T::from_f64_lossy(1.0 / height as f64)),
            cse_filter_w: Tensor::full(&[width, channels], T::from_f64_lossy(1.0 / width as f64)),
            cse_bias_h: Tensor::zeros(&[channels]),
            cse_bias_w: Tensor::zeros(&[channels]),
        }
    }

    pub fn closed_form_count(height: usize, width: usize, channels: usize) -> usize {
        (channels + 1) + channels * height + channels * width + 2 * channels
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            (Self::NAMES[0], &self.sse_kernel),
            (Self::NAMES[1], &self.sse_bias),
            (Self::NAMES[2], &self.cse_filter_h),
            (Self::NAMES[3], &self.cse_filter_w),
            (Self::NAMES[4], &self.cse_bias_h),
            (Self::NAMES[5], &self.cse_bias_w),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> MseVars {
        MseVars {
            height: self.height,
            width: self.width,
            channels: self.channels,
            sse_kernel: g.param(self.sse_kernel.clone()),
            sse_bias: g.param(self.sse_bias.clone()),
            cse_filter_h: g.param(self.cse_filter_h.clone()),
            cse_filter_w: g.param(self.cse_filter_w.clone()),
            cse_bias_h: g.param(self.cse_bias_h.clone()),
            cse_bias_w: g.param(self.cse_bias_w.clone()),
        }
    }

    fn eval(&self, u: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, &MseVars, Var) -> Result<Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(u.clone());
        let out = f(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn sse_map(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(u, |g, v, x| v.sse_map(g, x))
    }

    pub fn sse_branch(&self, u: &Tensor<T>, scale: AttentionScale) -> Result<Tensor<T>> {
        self.eval(u, |g, v, x| v.sse_branch(g, x, scale))
    }

    pub fn cse_branch(&self, u: &Tensor<T>, scale: AttentionScale) -> Result<Tensor<T>> {
        self.eval(u, |g, v, x| v.cse_branch(g, x, scale))
    }

    pub fn forward(&self, u: &Tensor<T>, scale: AttentionScale) -> Result<Tensor<T>> {
        self.eval(u, |g, v, x| v.forward(g, x, scale))
    }

    pub fn cse_squeeze(&self, u: &Tensor<T>) -> Result<SqueezeVector<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(u.clone());
        let (z, w) = vars.cse_squeeze(&mut g, x)?;
        let n = g.shape(z)[0];
        let c = self.channels;
        Ok(SqueezeVector {
            z: g.value(z).clone().reshape(&[n, c])?,
            w: g.value(w).clone().reshape(&[n, c])?,
        })
    }
}

/// Graph handles for one MSE block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MseVars {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub sse_kernel: Var,
    pub sse_bias: Var,
    pub cse_filter_h: Var,
    pub cse_filter_w: Var,
    pub cse_bias_h: Var,
    pub cse_bias_w: Var,
}

fn check_bound<T: Scalar>(g: &Graph<T>, u: Var, block: &str, h: usize, w: usize, c: usize) -> Result<()> {
    let s = g.shape(u);
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
        return Err(Error::shape(
            "attention",
            format!("{block} block is bound to H×W×C = {h}×{w}×{c}, got input {s:?}"),
        ));
    }
    Ok(())
}

impl MseVars {
    fn check<T: Scalar>(&self, g: &Graph<T>, u: Var) -> Result<()> {
        check_bound(g, u, "MSE", self.height, self.width, self.channels)
    }

    /// Softmax over all spatial positions of the pixel-wise convolution,
    /// applied as a per-pixel rescale.
    pub fn sse_branch<T: Scalar>(&self, g: &mut Graph<T>, u: Var, scale: AttentionScale) -> Result<Var> {
        let mut s = self.sse_map(g, u)?;
        if scale == AttentionScale::Count {
            s = g.scale(s, T::from_usize(self.height * self.width).unwrap())?;
        }
        g.spatial_scale(u, s)
    }

    /// Spatial weights `[N, H, W, 1]`, summing to one per sample.
    pub fn sse_map<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        self.check(g, u)?;
        let q = g.conv2d(u, self.sse_kernel, self.sse_bias, Padding::Same, 1)?;
        g.softmax(q, &[1, 2])
    }

    /// `H`-axis then `W`-axis depth-wise squeeze; returns `(z, softmax(z))`,
    /// both `[N, 1, 1, C]`.
    pub fn cse_squeeze<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<(Var, Var)> {
        self.check(g, u)?;
        let rows = g.depthwise_axis_conv(u, SpatialAxis::H, self.cse_filter_h, self.cse_bias_h)?;
        let z = g.depthwise_axis_conv(rows, SpatialAxis::W, self.cse_filter_w, self.cse_bias_w)?;
        let w = g.softmax(z, &[3])?;
        Ok((z, w))
    }

    pub fn cse_branch<T: Scalar>(&self, g: &mut Graph<T>, u: Var, scale: AttentionScale) -> Result<Var> {
        let (_, mut w) = self.cse_squeeze(g, u)?;
        if scale == AttentionScale::Count {
            w = g.scale(w, T::from_usize(self.channels).unwrap())?;
        }
        g.channel_scale(u, w)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var, scale: AttentionScale) -> Result<Var> {
        let s = self.sse_branch(g, u, scale)?;
        let c = self.cse_branch(g, u, scale)?;
        g.add(s, c)
    }
}

/// Plain squeeze-and-excitation: global average pool, two fully-connected
/// layers with a ReLU between, sigmoid channel gates.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlockParams<T> {
    pub channels: usize,
    /// `[C, R]`
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    /// `[R, C]`
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> SeBlockParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let r = reduced_width(channels);
        SeBlockParams {
            channels,
            fc1_w: Tensor::he_uniform(&[channels, r], channels, rng),
            fc1_b: Tensor::zeros(&[r]),
            fc2_w: Tensor::he_uniform(&[r, channels], r, rng),
            fc2_b: Tensor::zeros(&[channels]),
        }
    }

    pub fn closed_form_count(channels: usize) -> usize {
        let r = reduced_width(channels);
        channels * r + r + r * channels + channels
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SeVars {
        SeVars {
            channels: self.channels,
            fc1_w: g.param(self.fc1_w.clone()),
            fc1_b: g.param(self.fc1_b.clone()),
            fc2_w: g.param(self.fc2_w.clone()),
            fc2_b: g.param(self.fc2_b.clone()),
        }
    }

    pub fn forward(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(u.clone());
        let out = vars.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub channels: usize,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl SeVars {
    /// Sigmoid channel gates, `[N, 1, 1, C]`.
    pub fn gates<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let [n, h, w, c] = g.value(u).dims4("se_block")?;
        if c != self.channels {
            return Err(Error::shape(
                "se_block",
                format!("block built for {} channels, got input {:?}", self.channels, g.shape(u)),
            ));
        }
        let rows = g.sum_axis(u, 1)?;
        let pooled = g.sum_axis(rows, 2)?;
        let pooled = g.scale(pooled, T::one() / T::from_usize(h * w).unwrap())?;
        let flat = g.reshape(pooled, &[n, c])?;
        let hidden = g.linear(flat, self.fc1_w, self.fc1_b)?;
        let hidden = g.relu(hidden)?;
        let logits = g.linear(hidden, self.fc2_w, self.fc2_b)?;
        let gates = g.sigmoid(logits)?;
        g.reshape(gates, &[n, 1, 1, c])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let gates = self.gates(g, u)?;
        g.channel_scale(u, gates)
    }
}

/// Concurrent scSE baseline: sigmoid SE channel gating plus a sigmoid
/// pixel-wise spatial gate, combined by addition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScseBlockParams<T> {
    pub se: SeBlockParams<T>,
    pub sse_kernel: Tensor<T>,
    pub sse_bias: Tensor<T>,
}

impl<T: Scalar> ScseBlockParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        ScseBlockParams {
            se: SeBlockParams::init(channels, rng),
            sse_kernel: Tensor::he_uniform(&[1, 1, channels, 1], channels, rng),
            sse_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn closed_form_count(channels: usize) -> usize {
        SeBlockParams::<T>::closed_form_count(channels) + channels + 1
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        let [a, b, c, d] = self.se.tensors();
        [a, b, c, d, ("sse_kernel", &self.sse_kernel), ("sse_bias", &self.sse_bias)]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ScseVars {
        ScseVars {
            se: self.se.bind(g),
            sse_kernel: g.param(self.sse_kernel.clone()),
            sse_bias: g.param(self.sse_bias.clone()),
        }
    }

    pub fn forward(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(u.clone());
        let out = vars.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScseVars {
    pub se: SeVars,
    pub sse_kernel: Var,
    pub sse_bias: Var,
}

impl ScseVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var) -> Result<Var> {
        let channel = self.se.forward(g, u)?;
        let q = g.conv2d(u, self.sse_kernel, self.sse_bias, Padding::Same, 1)?;
        let gate = g.sigmoid(q)?;
        let spatial = g.spatial_scale(u, gate)?;
        g.add(channel, spatial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut rng_for(seed, &[]))
    }

    fn block(h: usize, w: usize, c: usize, seed: u64) -> MseBlockParams<f64> {
        let mut rng = rng_for(seed, &[1]);
        let mut p = MseBlockParams::init(h, w, c, &mut rng);
        p.cse_filter_h = random(&[h, c], seed + 1);
        p.cse_filter_w = random(&[w, c], seed + 2);
        p.cse_bias_h = random(&[c], seed + 3);
        p.cse_bias_w = random(&[c], seed + 4);
        p.sse_bias = random(&[1], seed + 5);
        p
    }

    #[test]
    fn mse_count_matches_formula() {
        for (h, w, c) in [(1, 1, 1), (4, 4, 3), (256, 192, 32), (16, 12, 512)] {
            let p = MseBlockParams::<f64>::init(h, w, c, &mut rng_for(0, &[]));
            assert_eq!(p.param_count(), MseBlockParams::<f64>::closed_form_count(h, w, c));
        }
    }

    #[test]
    fn constant_input_gives_uniform_spatial_weights() {
        let p = block(3, 5, 2, 9);
        let u = Tensor::<f64>::full(&[1, 3, 5, 2], 0.7);
        let out = p.sse_branch(&u, AttentionScale::None).unwrap();
        for &v in out.data() {
            assert!((v - 0.7 / 15.0).abs() < 1e-15);
        }
        let out = p.sse_branch(&u, AttentionScale::Count).unwrap();
        for &v in out.data() {
            assert!((v - 0.7).abs() < 1e-13);
        }
    }

    #[test]
    fn single_pixel_sse_is_identity() {
        let p = block(1, 1, 3, 4);
        let u = random(&[2, 1, 1, 3], 11);
        assert_eq!(p.sse_branch(&u, AttentionScale::None).unwrap(), u);
    }

    #[test]
    fn mean_filters_give_channel_means() {
        let (h, w) = (3, 4);
        let mut p = MseBlockParams::<f64>::init(h, w, 2, &mut rng_for(0, &[]));
        p.cse_bias_w = Tensor::new(&[2], vec![0.25, -0.5]).unwrap();
        let u = Tensor::from_fn(&[1, h, w, 2], |i| if i % 2 == 0 { 2.0 } else { -1.0 });
        let sq = p.cse_squeeze(&u).unwrap();
        assert!((sq.z.data()[0] - 2.25).abs() < 1e-14);
        assert!((sq.z.data()[1] + 1.5).abs() < 1e-14);
    }

    #[test]
    fn single_channel_weight_is_one() {
        let p = block(3, 4, 1, 2);
        let u = random(&[1, 3, 4, 1], 3);
        let sq = p.cse_squeeze(&u).unwrap();
        assert_eq!(sq.w.data(), &[1.0]);
        assert_eq!(p.cse_branch(&u, AttentionScale::None).unwrap(), u);
    }

    #[test]
    fn channel_constant_input_gives_uniform_channel_weights() {
        let mut p = MseBlockParams::<f64>::init(2, 3, 4, &mut rng_for(0, &[]));
        p.cse_filter_h = Tensor::from_fn(&[2, 4], |i| [0.3, 0.7][i / 4]);
        p.cse_filter_w = Tensor::from_fn(&[3, 4], |i| [0.1, 0.5, 0.4][i / 4]);
        let u = Tensor::from_fn(&[1, 2, 3, 4], |i| (i / 4) as f64 * 0.1);
        let out = p.cse_branch(&u, AttentionScale::None).unwrap();
        for (o, x) in out.data().iter().zip(u.data()) {
            assert!((o - x / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_block_doubles_input() {
        let p = block(1, 1, 1, 6);
        let u = random(&[3, 1, 1, 1], 7);
        let out = p.forward(&u, AttentionScale::None).unwrap();
        for (o, x) in out.data().iter().zip(u.data()) {
            assert_eq!(*o, 2.0 * x);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = block(4, 4, 3, 1);
        let out = p.forward(&Tensor::zeros(&[1, 4, 4, 3]), AttentionScale::None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let scse = ScseBlockParams::<f64>::init(3, &mut rng_for(1, &[]));
        let out = scse.forward(&Tensor::zeros(&[1, 4, 4, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bound_shape_is_enforced() {
        let p = block(4, 4, 3, 1);
        let err = p.forward(&Tensor::zeros(&[1, 4, 5, 3]), AttentionScale::None).unwrap_err();
        assert!(err.to_string().contains("4×4×3"), "{err}");
        assert!(p.forward(&Tensor::zeros(&[1, 4, 4, 2]), AttentionScale::None).is_err());
    }

    #[test]
    fn se_baselines_are_well_formed_at_one_channel() {
        assert_eq!(reduced_width(1), 1);
        let mut rng = rng_for(3, &[]);
        let scse = ScseBlockParams::<f64>::init(1, &mut rng);
        assert_eq!(scse.param_count(), ScseBlockParams::<f64>::closed_form_count(1));
        let u = random(&[2, 3, 3, 1], 1);
        let out = scse.forward(&u).unwrap();
        assert_eq!(out.shape(), u.shape());
        assert!(out.is_finite());
        let se = SeBlockParams::<f64>::init(6, &mut rng);
        assert_eq!(se.param_count(), SeBlockParams::<f64>::closed_form_count(6));
        assert_eq!(se.forward(&random(&[1, 2, 2, 6], 2)).unwrap().shape(), &[1, 2, 2, 6]);
    }
}
