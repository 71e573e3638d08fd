//! Parameter audit and gradient self-checks.

use std::path::Path;

use anyhow::{bail, Result};
use mdanet_core::attention::{AttentionScale, MseBlockParams, MseVars, ScseBlockParams, ScseVars, SeVars};
use mdanet_core::compression::{CompressionParams, CompressionVars};
use mdanet_core::rng::{derive_seed, rng_for};
use mdanet_core::tensor::{grad_check, GradCheckReport, GRAD_CHECK_EPS, GRAD_CHECK_TOL};
use mdanet_core::train::{dice_loss, model_config_for, one_hot};
use mdanet_core::{Batch, Graph, ModelConfig, SegNet, Tensor, Var, Variant};
use rand::Rng;

use crate::config::RunConfig;
use crate::dataset::DatasetManifest;
use crate::exit::Numerical;

fn configs(config: Option<&Path>, variants: &[Variant]) -> Result<Vec<ModelConfig>> {
    let Some(path) = config else {
        return Ok(variants.iter().map(|&v| ModelConfig::full_scale(v)).collect());
    };
    let run = RunConfig::load(path)?;
    let manifest = DatasetManifest::read(&run.data)?;
    let headers = manifest.headers(&run.data)?;
    let dims = headers
        .first()
        .ok_or_else(|| mdanet_core::Error::Data(format!("{} lists no subjects", run.data.display())))?
        .dims;
    Ok(variants
        .iter()
        .map(|&v| model_config_for(&run.model.template(v), v, dims, run.view))
        .collect())
}

pub fn paramcount(variant: Option<Variant>, config: Option<&Path>) -> Result<()> {
    let variants: Vec<Variant> = variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    let mut totals = Vec::new();
    for cfg in configs(config, &variants)? {
        let count = SegNet::<f32>::build(cfg.clone(), 0)?.param_count();
        println!("variant {} ({}x{}, depth {}, base {})", cfg.variant, cfg.height, cfg.width, cfg.depth, cfg.base_channels);
        print!("{count}");
        totals.push((cfg, count));
    }
    if variant.is_some() {
        return Ok(());
    }
    let total = |v: Variant| totals.iter().find(|(c, _)| c.variant == v).map(|(_, n)| n.total).unwrap();
    let (plain, cscse, mse, mda) = (total(Variant::Plain), total(Variant::Cscse), total(Variant::Mse), total(Variant::Mda));
    let (mda_cfg, mda_count) = totals.iter().find(|(c, _)| c.variant == Variant::Mda).unwrap();
    let r = mda_cfg.compression.map_or(0, |c| c.radius);
    let closed = 2 * r * (mda_cfg.height + mda_cfg.width) + 4 * r;
    println!(
        "mda - mse = {} (compression block {}, closed form 2r(m+n)+4r = {closed}, extra input channel of the first conv = {})",
        mda - mse,
        mda_count.compression,
        9 * mda_cfg.base_channels
    );
    let ordered = cscse > mse && mse > plain;
    println!("ordering cscse > mse > plain: {}", if ordered { "holds" } else { "VIOLATED" });
    if !ordered {
        bail!(Numerical(format!("parameter ordering violated: cscse {cscse}, mse {mse}, plain {plain}")));
    }
    Ok(())
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng_for(seed, &[]))
}

/// Contracts `y` with a fixed random tensor so every output element carries
/// a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> mdanet_core::Result<Var> {
    let w = g.constant(random(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn block_check(name: &str, seed: u64) -> mdanet_core::Result<GradCheckReport> {
    let mut rng = rng_for(seed, &[]);
    let (n, h, w, c) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(2..=5), rng.gen_range(1..=3));
    let u = random(&[n, h, w, c], seed ^ 1);
    let jitter = |t: &Tensor<f64>, s: u64| {
        let r = random(t.shape(), s);
        Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.1 * r.data()[i])
    };
    match name {
        "mse" | "mse-count" => {
            let scale = if name == "mse" { AttentionScale::None } else { AttentionScale::Count };
            let p = MseBlockParams::<f64>::init(h, w, c, &mut rng);
            let inputs: Vec<Tensor<f64>> = std::iter::once(u)
                .chain(p.tensors().iter().enumerate().map(|(i, (_, t))| jitter(t, seed + 10 + i as u64)))
                .collect();
            grad_check(
                |g, v| {
                    let vars = MseVars {
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
                    weighted_sum(g, y, seed ^ 2)
                },
                &inputs,
                GRAD_CHECK_EPS,
                GRAD_CHECK_TOL,
            )
        }
        "se" | "scse" => {
            let spatial = name == "scse";
            let p = ScseBlockParams::<f64>::init(c, &mut rng);
            let mut inputs = vec![u];
            inputs.extend(p.se.tensors().iter().enumerate().map(|(i, (_, t))| jitter(t, seed + 20 + i as u64)));
            if spatial {
                inputs.push(jitter(&p.sse_kernel, seed + 30));
                inputs.push(jitter(&p.sse_bias, seed + 31));
            }
            grad_check(
                |g, v| {
                    let se = SeVars {
                        channels: c,
                        fc1_w: v[1],
                        fc1_b: v[2],
                        fc2_w: v[3],
                        fc2_b: v[4],
                    };
                    let y = if spatial {
                        ScseVars {
                            se,
                            sse_kernel: v[5],
                            sse_bias: v[6],
                        }
                        .forward(g, v[0])?
                    } else {
                        se.forward(g, v[0])?
                    };
                    weighted_sum(g, y, seed ^ 2)
                },
                &inputs,
                GRAD_CHECK_EPS,
                GRAD_CHECK_TOL,
            )
        }
        "compression" => {
            let k = 2 * rng.gen_range(1..=2);
            let p = CompressionParams::<f64>::random(h, w, k, &mut rng);
            let diffs = random(&[n, h, w, k], seed ^ 3);
            let inputs: Vec<Tensor<f64>> = std::iter::once(diffs)
                .chain(p.tensors().iter().map(|(_, t)| (*t).clone()))
                .collect();
            grad_check(
                |g, v| {
                    let vars = CompressionVars {
                        rows: h,
                        cols: w,
                        depth: k,
                        filter_h: v[1],
                        filter_w: v[2],
                        bias_h: v[3],
                        bias_w: v[4],
                    };
                    let y = vars.compress(g, v[0])?;
                    weighted_sum(g, y, seed ^ 2)
                },
                &inputs,
                GRAD_CHECK_EPS,
                GRAD_CHECK_TOL,
            )
        }
        other => unreachable!("unknown block {other}"),
    }
}

fn network_check(variant: Variant, size: usize, seed: u64) -> mdanet_core::Result<GradCheckReport> {
    let mut cfg = ModelConfig {
        depth: 2,
        base_channels: 2,
        num_classes: 3,
        ..ModelConfig::new(variant, size, size)
    };
    if let Some(c) = cfg.compression.as_mut() {
        c.radius = 1;
    }
    let mut net = SegNet::<f64>::build(cfg.clone(), seed)?;
    // Nonzero biases keep pixels with all-dead receptive fields off the ReLU kink.
    for (i, t) in net.params_mut().tensors_mut().enumerate() {
        if t.shape().len() == 1 {
            *t = random(t.shape(), derive_seed(seed, &[7, i as u64])).map(|v| 0.1 * v);
        }
    }
    let batch = Batch {
        images: random(&[1, size, size, 1], seed ^ 1),
        diffs: cfg.compression.map(|c| random(&[1, size, size, c.depth()], seed ^ 2)),
    };
    let mut rng = rng_for(seed, &[3]);
    let labels: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..3)).collect();
    let targets = one_hot::<f64>(&labels, &[1, size, size], 3)?;
    let inputs: Vec<Tensor<f64>> = net.params().entries().iter().map(|e| e.tensor.clone()).collect();
    grad_check(
        |g, v| {
            let probs = net.forward_graph(g, v, &batch, true, seed)?;
            dice_loss(g, probs, targets.clone())
        },
        &inputs,
        GRAD_CHECK_EPS,
        GRAD_CHECK_TOL,
    )
}

pub fn gradcheck(network: bool, seed: u64, instances: u64, size: usize) -> Result<()> {
    let mut failed = Vec::new();
    let mut line = |name: &str, i: u64, r: GradCheckReport| {
        let ok = r.passed();
        println!(
            "{name:<12} instance {i}: max rel error {:.3e} over {} entries (tol {:.0e}) {}",
            r.max_rel_error,
            r.checked,
            r.tol,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(format!("{name}#{i}"));
        }
    };
    if network {
        if size == 0 || !size.is_multiple_of(2) {
            bail!(crate::exit::Usage(format!("network size must be a positive even number, got {size}")));
        }
        for (vi, v) in Variant::ALL.into_iter().enumerate() {
            for i in 0..instances {
                line(v.as_str(), i, network_check(v, size, derive_seed(seed, &[1, vi as u64, i]))?);
            }
        }
    } else {
        for (bi, name) in ["mse", "mse-count", "se", "scse", "compression"].into_iter().enumerate() {
            for i in 0..instances {
                line(name, i, block_check(name, derive_seed(seed, &[0, bi as u64, i]))?);
            }
        }
    }
    if !failed.is_empty() {
        bail!(Numerical(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
