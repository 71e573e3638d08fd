//! Fixtures shared by the benchmarks.

use mdanet_core::rng::rng_for;
use mdanet_core::volume::synth_phantom;
use mdanet_core::{Batch, ModelConfig, SegNet, Tensor, Variant, View, Volume};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng_for(seed, &[]))
}

/// A phantom small enough to keep one iteration in the millisecond range.
pub fn phantom() -> Volume {
    synth_phantom(7, [48, 64, 56], 4).expect("phantom")
}

pub fn network(variant: Variant) -> SegNet<f32> {
    let cfg = ModelConfig {
        depth: 3,
        base_channels: 8,
        ..ModelConfig::new(variant, 64, 56)
    };
    SegNet::build(cfg, 1).expect("network")
}

pub fn batch(net: &SegNet<f32>, n: usize) -> Batch<f32> {
    let cfg = net.config();
    Batch {
        images: random(&[n, cfg.height, cfg.width, 1], 2),
        diffs: cfg.compression.map(|c| random(&[n, cfg.height, cfg.width, c.depth()], 3)),
    }
}

pub const VIEW: View = View::Sagittal;
