//! The target-style degradation: blur, motion blur, desaturation, contrast
//! compression and sensor noise, applied in that order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{dims3, filter_separable, gaussian_blur, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: [f64; 2],
    /// Blend factor toward luma.
    pub desaturation: [f64; 2],
    /// Blend factor toward the image mean.
    pub contrast: [f64; 2],
    /// Noise standard deviation as a fraction of the dynamic range.
    pub noise_sigma: [f64; 2],
    /// Horizontal motion-blur kernel lengths, drawn uniformly.
    pub motion_lengths: Vec<usize>,
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma: [1.0, 2.5],
            desaturation: [0.3, 0.7],
            contrast: [0.2, 0.5],
            noise_sigma: [0.01, 0.03],
            motion_lengths: vec![3, 5, 7],
            seed: 0,
        }
    }
}

/// One concrete draw from a [`DegradeConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    pub blur_sigma: f64,
    pub motion_length: usize,
    pub desaturation: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl DegradeParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            motion_length: 1,
            desaturation: 0.0,
            contrast: 0.0,
            noise_sigma: 0.0,
        }
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl DegradeConfig {
    /// Identity degradation, useful as a control.
    pub fn identity() -> Self {
        Self {
            blur_sigma: [0.0; 2],
            desaturation: [0.0; 2],
            contrast: [0.0; 2],
            noise_sigma: [0.0; 2],
            motion_lengths: vec![1],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("blur_sigma", self.blur_sigma, f64::INFINITY),
            ("desaturation", self.desaturation, 1.0),
            ("contrast", self.contrast, 1.0),
            ("noise_sigma", self.noise_sigma, f64::INFINITY),
        ];
        for (name, [lo, hi], max) in ranges {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= max) {
                return Err(Error::Config(format!(
                    "degrade.{name} must satisfy 0 <= lo <= hi <= {max}, got [{lo}, {hi}]"
                )));
            }
        }
        if self.motion_lengths.is_empty() || self.motion_lengths.iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "degrade.motion_lengths must be a non-empty list of odd lengths, got {:?}",
                self.motion_lengths
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DegradeParams {
        DegradeParams {
            blur_sigma: draw(rng, self.blur_sigma),
            motion_length: self.motion_lengths[rng.random_range(0..self.motion_lengths.len())],
            desaturation: draw(rng, self.desaturation),
            contrast: draw(rng, self.contrast),
            noise_sigma: draw(rng, self.noise_sigma),
        }
    }
}

pub fn degrade(img: &Image, cfg: &DegradeConfig, rng: &mut impl Rng) -> Result<Image> {
    let p = cfg.sample(rng);
    degrade_with(img, &p, rng)
}

/// Applies a fixed draw; `rng` only feeds the noise.
pub fn degrade_with(img: &Image, p: &DegradeParams, rng: &mut impl Rng) -> Result<Image> {
    let (c, h, w) = dims3(img)?;
    let mut out = gaussian_blur(img, p.blur_sigma, None)?;
    if p.motion_length > 1 {
        let k = vec![1.0 / p.motion_length as f32; p.motion_length];
        out = filter_separable(&out, Some(&k), None)?;
    }
    let n = h * w;
    let d = out.data_mut();
    if p.desaturation > 0.0 && c == 3 {
        let f = p.desaturation as f32;
        for i in 0..n {
            let y = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
            for ch in 0..3 {
                let v = &mut d[ch * n + i];
                *v += f * (y - *v);
            }
        }
    }
    if p.contrast > 0.0 {
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let (f, m) = (p.contrast as f32, mean as f32);
        d.iter_mut().for_each(|v| *v += f * (m - *v));
    }
    if p.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, 2.0 * p.noise_sigma).expect("finite sigma");
        d.iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
    }
    d.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(out)
}
