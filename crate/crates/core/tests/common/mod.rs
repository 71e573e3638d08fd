//! Brute-force reference implementations and gradient-check cases shared by
//! the integration test targets. Every oracle here is written as explicit
//! nested loops over the mathematical definition, independent of the
//! library's im2col/GEMM and graph code paths.

#![allow(dead_code)]

use mdanet_core::attention::{AttentionScale, MseBlockParams, ScseBlockParams, SeBlockParams};
use mdanet_core::compression::{BoundaryPolicy, CompressionConfig, CompressionParams, DiffOrdering};
use mdanet_core::rng::rng_for;
use mdanet_core::segnet::{Batch, ModelConfig, SegNet, Variant};
use mdanet_core::tensor::kernels::{Padding, SpatialAxis};
use mdanet_core::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
use mdanet_core::Result;
use rand::Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng_for(seed, &[0x7465_7374]))
}

pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_rel_diff(b, 1e-300)
}

// ---------------------------------------------------------------- oracles

fn same_pad(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (out, total / 2)
}

pub fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, padding: Padding, stride: usize) -> Tensor<f64> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let ((oh, pt), (ow, pl)) = match padding {
        Padding::Same => (same_pad(h, kh, stride), same_pad(w, kw, stride)),
        Padding::Valid => (((h - kh) / stride + 1, 0), ((w - kw) / stride + 1, 0)),
    };
    let xv = |ni: usize, hi: isize, wi: isize, c: usize| -> f64 {
        if hi < 0 || wi < 0 || hi >= h as isize || wi >= w as isize {
            0.0
        } else {
            x.data()[((ni * h + hi as usize) * w + wi as usize) * cin + c]
        }
    };
    let mut out = vec![0.0; n * oh * ow * cout];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for ci in 0..cin {
                                let hy = (oy * stride + dy) as isize - pt as isize;
                                let wx = (ox * stride + dx) as isize - pl as isize;
                                acc += xv(ni, hy, wx, ci) * k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((ni * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, cout], out).unwrap()
}

pub fn depthwise_oracle(x: &Tensor<f64>, axis: SpatialAxis, f: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let at = |ni: usize, hi: usize, wi: usize, ci: usize| x.data()[((ni * h + hi) * w + wi) * c + ci];
    match axis {
        SpatialAxis::H => Tensor::from_fn(&[n, 1, w, c], |i| {
            let (ni, wi, ci) = (i / (w * c), (i / c) % w, i % c);
            (0..h).map(|hi| at(ni, hi, wi, ci) * f.data()[hi * c + ci]).sum::<f64>() + b.data()[ci]
        }),
        SpatialAxis::W => Tensor::from_fn(&[n, h, 1, c], |i| {
            let (ni, hi, ci) = (i / (h * c), (i / c) % h, i % c);
            (0..w).map(|wi| at(ni, hi, wi, ci) * f.data()[wi * c + ci]).sum::<f64>() + b.data()[ci]
        }),
    }
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Spatial attention map `[N, H*W]` of the MSE sSE branch.
pub fn sse_map_oracle(u: &Tensor<f64>, p: &MseBlockParams<f64>) -> Vec<Vec<f64>> {
    let (n, h, w, c) = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
    (0..n)
        .map(|ni| {
            let q: Vec<f64> = (0..h * w)
                .map(|px| {
                    (0..c).map(|ci| u.data()[(ni * h * w + px) * c + ci] * p.sse_kernel.data()[ci]).sum::<f64>()
                        + p.sse_bias.data()[0]
                })
                .collect();
            softmax_vec(&q)
        })
        .collect()
}

pub fn sse_oracle(u: &Tensor<f64>, p: &MseBlockParams<f64>, scale: AttentionScale) -> Tensor<f64> {
    let (h, w, c) = (u.shape()[1], u.shape()[2], u.shape()[3]);
    let maps = sse_map_oracle(u, p);
    let k = if scale == AttentionScale::Count { (h * w) as f64 } else { 1.0 };
    Tensor::from_fn(u.shape(), |i| {
        let (ni, px) = (i / (h * w * c), (i / c) % (h * w));
        u.data()[i] * maps[ni][px] * k
    })
}

/// Channel squeeze `z` and weights `softmax(z)`, both `[N][C]`.
pub fn cse_squeeze_oracle(u: &Tensor<f64>, p: &MseBlockParams<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, h, w, c) = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
    let mut zs = Vec::new();
    for ni in 0..n {
        let mut z = vec![0.0; c];
        for ci in 0..c {
            let mut acc = p.cse_bias_w.data()[ci];
            for wi in 0..w {
                let mut row = p.cse_bias_h.data()[ci];
                for hi in 0..h {
                    row += u.data()[((ni * h + hi) * w + wi) * c + ci] * p.cse_filter_h.data()[hi * c + ci];
                }
                acc += row * p.cse_filter_w.data()[wi * c + ci];
            }
            z[ci] = acc;
        }
        zs.push(z);
    }
    let ws = zs.iter().map(|z| softmax_vec(z)).collect();
    (zs, ws)
}

pub fn cse_oracle(u: &Tensor<f64>, p: &MseBlockParams<f64>, scale: AttentionScale) -> Tensor<f64> {
    let (h, w, c) = (u.shape()[1], u.shape()[2], u.shape()[3]);
    let (_, ws) = cse_squeeze_oracle(u, p);
    let k = if scale == AttentionScale::Count { c as f64 } else { 1.0 };
    Tensor::from_fn(u.shape(), |i| u.data()[i] * ws[i / (h * w * c)][i % c] * k)
}

/// Neighbour slice index for offset `j`, or `None` for a zero image.
pub fn neighbour_oracle(i: usize, j: isize, p: usize, policy: BoundaryPolicy) -> Option<usize> {
    let t = i as isize + j;
    if t >= 0 && t < p as isize {
        return Some(t as usize);
    }
    match policy {
        BoundaryPolicy::Mirror => Some(if t < 0 { (-t) as usize } else { 2 * (p - 1) - t as usize }),
        BoundaryPolicy::Clamp => Some(if t < 0 { 0 } else { p - 1 }),
        BoundaryPolicy::Zero => None,
    }
}

/// Ordered difference images `[k][m*n]` and their offsets.
pub fn ordered_diffs_oracle(view: &Tensor<f64>, i: usize, cfg: &CompressionConfig) -> (Vec<Vec<f64>>, Vec<isize>) {
    let (m, n, p) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    let r = cfg.radius as isize;
    let offsets: Vec<isize> = (-r..=r).filter(|&j| j != 0).collect();
    let at = |a: usize, b: usize, s: usize| view.data()[(a * n + b) * p + s];
    let mut stack: Vec<(f64, isize, Vec<f64>)> = offsets
        .iter()
        .map(|&j| {
            let nb = neighbour_oracle(i, j, p, cfg.boundary);
            let d: Vec<f64> = (0..m * n)
                .map(|px| nb.map_or(0.0, |t| at(px / n, px % n, t)) - at(px / n, px % n, i))
                .collect();
            (d.iter().map(|v| v.abs()).sum(), j, d)
        })
        .collect();
    stack.sort_by(|a, b| {
        let o = a.0.partial_cmp(&b.0).unwrap();
        let o = if cfg.ordering == DiffOrdering::Descending { o.reverse() } else { o };
        o.then(a.1.cmp(&b.1))
    });
    let offs = stack.iter().map(|s| s.1).collect();
    (stack.into_iter().map(|s| s.2).collect(), offs)
}

/// Compression weights `[k]` for ordered diffs `[k][m*n]`.
pub fn compression_weights_oracle(diffs: &[Vec<f64>], m: usize, n: usize, p: &CompressionParams<f64>) -> Vec<f64> {
    let k = diffs.len();
    let z: Vec<f64> = (0..k)
        .map(|c| {
            let mut acc = p.bias_w.data()[c];
            for b in 0..n {
                let mut col = p.bias_h.data()[c];
                for a in 0..m {
                    col += diffs[c][a * n + b] * p.filter_h.data()[a * k + c];
                }
                acc += col * p.filter_w.data()[b * k + c];
            }
            acc
        })
        .collect();
    softmax_vec(&z)
}

pub fn compress_oracle(view: &Tensor<f64>, i: usize, p: &CompressionParams<f64>, cfg: &CompressionConfig) -> Tensor<f64> {
    let (m, n) = (view.shape()[0], view.shape()[1]);
    let (diffs, _) = ordered_diffs_oracle(view, i, cfg);
    let w = compression_weights_oracle(&diffs, m, n, p);
    Tensor::from_fn(&[m, n], |px| diffs.iter().zip(&w).map(|(d, wk)| wk * d[px]).sum())
}

// ------------------------------------------------------ gradient cases

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(g.shape(y), seed ^ 0x5eed);
    let c = g.constant(r);
    let p = g.mul(y, c)?;
    g.sum(p)
}

pub fn check(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> GradCheckReport {
    grad_check(f, inputs, GRAD_CHECK_EPS, GRAD_CHECK_TOL).expect("grad check evaluates")
}

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> GradCheckReport,
}

fn dims(seed: u64) -> (usize, usize, usize, usize) {
    let mut rng = rng_for(seed, &[0x6469_6d73]);
    (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5), rng.gen_range(1..=3))
}

fn one_hot_targets(shape: &[usize], seed: u64) -> Tensor<f64> {
    let k = *shape.last().unwrap();
    let mut rng = rng_for(seed, &[0x6f6e_6568_6f74]);
    let mut t = Tensor::zeros(shape);
    for px in 0..t.numel() / k {
        let c = rng.gen_range(0..k);
        t.data_mut()[px * k + c] = 1.0;
    }
    t
}

/// One case per registered tensor op.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let sh = [n, h, w, c];
                check(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, s) }, &[rand_tensor(&sh, s), rand_tensor(&sh, s + 1)])
            },
        },
        GradCase {
            name: "mul",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let sh = [n, h, w, c];
                check(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, s) }, &[rand_tensor(&sh, s), rand_tensor(&sh, s + 1)])
            },
        },
        GradCase {
            name: "scale",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.scale(v[0], -1.7)?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "sum",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.mul(v[0], v[0])?; g.sum(y) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "mean",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.mul(v[0], v[0])?; g.mean(y) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "reshape",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.reshape(v[0], &[n * h, w * c])?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "relu",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.relu(v[0])?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "sigmoid",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.sigmoid(v[0])?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "conv2d",
            run: |s| {
                let (n, h, w, cin) = dims(s);
                let mut rng = rng_for(s, &[1]);
                let (kh, kw, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3));
                let stride = rng.gen_range(1..=2);
                let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
                let (h, w) = (h.max(kh), w.max(kw));
                check(
                    |g, v| { let y = g.conv2d(v[0], v[1], v[2], padding, stride)?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, h, w, cin], s), rand_tensor(&[kh, kw, cin, cout], s + 1), rand_tensor(&[cout], s + 2)],
                )
            },
        },
        GradCase {
            name: "depthwise_axis_conv",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let (axis, len) = if s % 2 == 0 { (SpatialAxis::H, h) } else { (SpatialAxis::W, w) };
                check(
                    |g, v| { let y = g.depthwise_axis_conv(v[0], axis, v[1], v[2])?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, h, w, c], s), rand_tensor(&[len, c], s + 1), rand_tensor(&[c], s + 2)],
                )
            },
        },
        GradCase {
            name: "softmax",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let axes: &[usize] = match s % 3 { 0 => &[3], 1 => &[1, 2], _ => &[1, 2, 3] };
                check(|g, v| { let y = g.softmax(v[0], axes)?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "maxpool2",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.maxpool2(v[0])?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, 2 * h, 2 * w, c], s)])
            },
        },
        GradCase {
            name: "upsample2",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.upsample2(v[0])?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "dropout",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(|g, v| { let y = g.dropout(v[0], 0.4, true, s)?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "concat",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(
                    |g, v| { let y = g.concat(&[v[0], v[1]], 3)?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, h, w, c], s), rand_tensor(&[n, h, w, c + 1], s + 1)],
                )
            },
        },
        GradCase {
            name: "spatial_scale",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(
                    |g, v| { let y = g.spatial_scale(v[0], v[1])?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, h, w, c], s), rand_tensor(&[n, h, w, 1], s + 1)],
                )
            },
        },
        GradCase {
            name: "channel_scale",
            run: |s| {
                let (n, h, w, c) = dims(s);
                check(
                    |g, v| { let y = g.channel_scale(v[0], v[1])?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, h, w, c], s), rand_tensor(&[n, 1, 1, c], s + 1)],
                )
            },
        },
        GradCase {
            name: "sum_axis",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let axis = (s % 4) as usize;
                check(|g, v| { let y = g.sum_axis(v[0], axis)?; weighted_sum(g, y, s) }, &[rand_tensor(&[n, h, w, c], s)])
            },
        },
        GradCase {
            name: "linear",
            run: |s| {
                let (n, _, w, c) = dims(s);
                check(
                    |g, v| { let y = g.linear(v[0], v[1], v[2])?; weighted_sum(g, y, s) },
                    &[rand_tensor(&[n, c], s), rand_tensor(&[c, w], s + 1), rand_tensor(&[w], s + 2)],
                )
            },
        },
        GradCase {
            name: "dice_loss",
            run: |s| {
                let (n, h, w, _) = dims(s);
                let k = 2 + (s % 3) as usize;
                let targets = one_hot_targets(&[n, h, w, k], s);
                check(
                    |g, v| { let p = g.softmax(v[0], &[3])?; g.dice_loss(p, targets.clone(), 1e-6) },
                    &[rand_tensor(&[n, h, w, k], s)],
                )
            },
        },
    ]
}

fn mse_params(h: usize, w: usize, c: usize, seed: u64) -> MseBlockParams<f64> {
    MseBlockParams {
        height: h,
        width: w,
        channels: c,
        sse_kernel: rand_tensor(&[1, 1, c, 1], seed),
        sse_bias: rand_tensor(&[1], seed + 1),
        cse_filter_h: rand_tensor(&[h, c], seed + 2),
        cse_filter_w: rand_tensor(&[w, c], seed + 3),
        cse_bias_h: rand_tensor(&[c], seed + 4),
        cse_bias_w: rand_tensor(&[c], seed + 5),
    }
}

fn mse_case(s: u64, scale: AttentionScale) -> GradCheckReport {
    let (n, h, w, c) = dims(s);
    let p = mse_params(h, w, c, s);
    let mut inputs = vec![rand_tensor(&[n, h, w, c], s + 9)];
    inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
    check(
        |g, v| {
            let vars = mdanet_core::attention::MseVars {
                height: h,
                width: w,
                channels: c,
                sse_kernel: v[1],
                sse_bias: v[2],
                cse_filter_h: v[3],
                cse_filter_w: v[4],
                cse_bias_h: v[5],
                cse_bias_w: v[6],
            };
            let y = vars.forward(g, v[0], scale)?;
            weighted_sum(g, y, s)
        },
        &inputs,
    )
}

/// Each attention block and the compression pipeline.
pub fn block_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "mse", run: |s| mse_case(s, AttentionScale::None) },
        GradCase { name: "mse_count", run: |s| mse_case(s, AttentionScale::Count) },
        GradCase {
            name: "se",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let p = SeBlockParams::<f64>::init(c + 1, &mut rng_for(s, &[2]));
                let mut inputs = vec![rand_tensor(&[n, h, w, c + 1], s)];
                inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
                check(
                    |g, v| {
                        let vars = mdanet_core::attention::SeVars { channels: c + 1, fc1_w: v[1], fc1_b: v[2], fc2_w: v[3], fc2_b: v[4] };
                        let y = vars.forward(g, v[0])?;
                        weighted_sum(g, y, s)
                    },
                    &inputs,
                )
            },
        },
        GradCase {
            name: "scse",
            run: |s| {
                let (n, h, w, c) = dims(s);
                let p = ScseBlockParams::<f64>::init(c + 1, &mut rng_for(s, &[3]));
                let mut inputs = vec![rand_tensor(&[n, h, w, c + 1], s)];
                inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
                check(
                    |g, v| {
                        let vars = mdanet_core::attention::ScseVars {
                            se: mdanet_core::attention::SeVars { channels: c + 1, fc1_w: v[1], fc1_b: v[2], fc2_w: v[3], fc2_b: v[4] },
                            sse_kernel: v[5],
                            sse_bias: v[6],
                        };
                        let y = vars.forward(g, v[0])?;
                        weighted_sum(g, y, s)
                    },
                    &inputs,
                )
            },
        },
        GradCase {
            name: "compression",
            run: |s| {
                let (n, m, w, _) = dims(s);
                let k = 2 * (1 + (s % 2) as usize);
                let p = CompressionParams::<f64>::random(m, w, k, &mut rng_for(s, &[4]));
                let mut inputs = vec![rand_tensor(&[n, m, w, k], s)];
                inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
                check(
                    |g, v| {
                        let vars = mdanet_core::compression::CompressionVars {
                            rows: m,
                            cols: w,
                            depth: k,
                            filter_h: v[1],
                            filter_w: v[2],
                            bias_h: v[3],
                            bias_w: v[4],
                        };
                        let y = vars.compress(g, v[0])?;
                        weighted_sum(g, y, s)
                    },
                    &inputs,
                )
            },
        },
    ]
}

/// Gradient check of a whole network's parameters under the Dice loss.
pub fn network_check(variant: Variant, size: usize, seed: u64, train: bool) -> GradCheckReport {
    let mut cfg = ModelConfig {
        depth: 2,
        base_channels: 2,
        num_classes: 3,
        ..ModelConfig::new(variant, size, size)
    };
    if let Some(c) = cfg.compression.as_mut() {
        c.radius = 1;
    }
    let mut net = SegNet::<f64>::build(cfg.clone(), seed).unwrap();
    // Zero-initialised biases put every pixel with an all-dead receptive field
    // exactly on a ReLU kink, where central differences are meaningless.
    for (i, t) in net.params_mut().tensors_mut().enumerate() {
        if t.shape().len() == 1 {
            *t = rand_tensor(t.shape(), seed ^ (0x6269_6173 + i as u64)).map(|v| 0.1 * v);
        }
    }
    let batch = Batch {
        images: rand_tensor(&[1, size, size, 1], seed + 1),
        diffs: cfg.compression.map(|c| rand_tensor(&[1, size, size, c.depth()], seed + 2)),
    };
    let targets = one_hot_targets(&[1, size, size, 3], seed);
    let inputs: Vec<Tensor<f64>> = net.params().entries().iter().map(|e| e.tensor.clone()).collect();
    check(
        |g, v| {
            let probs = net.forward_graph(g, v, &batch, train, seed)?;
            g.dice_loss(probs, targets.clone(), 1e-6)
        },
        &inputs,
    )
}
