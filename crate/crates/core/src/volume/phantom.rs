//! Synthetic brain-like phantoms with exact labels.
//!
//! Classes are nested shells of one deformed ellipsoid: the outermost shell
//! is class 1 (CSF), the innermost is class `K-1` (WM), everything outside is
//! background. Shell surfaces share a smooth angular deformation plus a small
//! per-shell one, so they stay nested. Intensities sit in disjoint bands per
//! class, modulated by a smooth multiplicative bias field whose excursion is
//! less than half the band gap; with zero noise a midpoint threshold recovers
//! the labels exactly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Peak relative excursion of the bias field.
    pub bias_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 64, 56],
            spacing: [1.0; 3],
            num_classes: 4,
            noise_sigma: 0.03,
            bias_amplitude: 0.05,
        }
    }
}

/// Nominal intensity of a class: evenly spaced in `[0.1, 0.9]`.
pub fn class_intensity(class: usize, num_classes: usize) -> f64 {
    0.1 + 0.8 * class as f64 / (num_classes - 1) as f64
}

struct Harmonic {
    amp: f64,
    k_theta: f64,
    k_phi: f64,
    phase_theta: f64,
    phase_phi: f64,
}

impl Harmonic {
    fn random(rng: &mut impl Rng, amp: f64) -> Self {
        Harmonic {
            amp: rng.gen_range(0.0..amp),
            k_theta: rng.gen_range(1..=3) as f64,
            k_phi: rng.gen_range(1..=3) as f64,
            phase_theta: rng.gen_range(0.0..2.0 * PI),
            phase_phi: rng.gen_range(0.0..2.0 * PI),
        }
    }

    fn eval(&self, theta: f64, phi: f64) -> f64 {
        self.amp * (self.k_theta * theta + self.phase_theta).sin() * (self.k_phi * phi + self.phase_phi).sin()
    }
}

/// Phantom with default noise and bias settings.
pub fn synth_phantom(seed: u64, dims: [usize; 3], num_classes: usize) -> Result<Volume> {
    synth_phantom_with(
        seed,
        &PhantomConfig {
            dims,
            num_classes,
            ..PhantomConfig::default()
        },
    )
}

pub fn synth_phantom_with(seed: u64, cfg: &PhantomConfig) -> Result<Volume> {
    let k = cfg.num_classes;
    if !(2..=255).contains(&k) {
        return Err(Error::Config(format!("phantoms need 2..=255 classes, got {k}")));
    }
    if cfg.dims.iter().any(|&d| d < 2) {
        return Err(Error::Config(format!("phantom dims must be at least 2, got {:?}", cfg.dims)));
    }
    if !(0.0..0.5).contains(&cfg.bias_amplitude) || cfg.noise_sigma < 0.0 {
        return Err(Error::Config("bias amplitude must be in [0, 0.5) and noise sigma non-negative".into()));
    }
    let mut rng = rng_for(seed, &[0x0070_6861_6e74_6f6d]);
    let half: Vec<f64> = cfg.dims.iter().map(|&d| d as f64 / 2.0).collect();
    let centre: Vec<f64> = half.iter().map(|&h| h + rng.gen_range(-0.04..0.04) * h).collect();
    let semi: Vec<f64> = half.iter().map(|&h| h * rng.gen_range(0.9..1.0)).collect();

    // Shell radii in normalized units, evenly spaced from 0.9 down to 0.5.
    let shells = k - 1;
    let gap = 0.4 / shells.saturating_sub(1).max(1) as f64;
    let radii: Vec<f64> = (0..shells).map(|s| 0.9 - gap * s as f64).collect();
    let shared: Vec<Harmonic> = (0..3).map(|_| Harmonic::random(&mut rng, 0.04)).collect();
    let own: Vec<Harmonic> = (0..shells)
        .map(|_| Harmonic::random(&mut rng, (0.2 * gap).min(0.02)))
        .collect();

    let mut coeff: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let norm: f64 = coeff.iter().map(|c: &f64| c.abs()).sum::<f64>().max(1e-12);
    coeff.iter_mut().for_each(|c| *c *= cfg.bias_amplitude / norm);

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let [d0, d1, d2] = cfg.dims;
    let numel = d0 * d1 * d2;
    let mut image = Vec::with_capacity(numel);
    let mut labels = Vec::with_capacity(numel);
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let p = [i0 as f64 + 0.5, i1 as f64 + 0.5, i2 as f64 + 0.5];
                let q: Vec<f64> = (0..3).map(|a| (p[a] - centre[a]) / semi[a]).collect();
                let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let theta = q[1].atan2(q[0]);
                let phi = if rho > 0.0 { (q[2] / rho).clamp(-1.0, 1.0).acos() } else { 0.0 };
                let base: f64 = shared.iter().map(|h| h.eval(theta, phi)).sum();
                let class = radii
                    .iter()
                    .zip(&own)
                    .take_while(|(r, h)| rho < *r * (1.0 + base + h.eval(theta, phi)))
                    .count();
                let u: Vec<f64> = (0..3).map(|a| 2.0 * p[a] / cfg.dims[a] as f64 - 1.0).collect();
                let bias = 1.0 + coeff[0] * u[0] + coeff[1] * u[1] + coeff[2] * u[2] + coeff[3] * u[0] * u[1];
                let value = class_intensity(class, k) * bias + noise.sample(&mut rng);
                image.push(value as f32);
                labels.push(class as u8);
            }
        }
    }
    Volume::new(cfg.dims, cfg.spacing, image)?.with_labels(labels)
}
