//! Histogram appearance model fitted online from augmented first-frame samples.
//!
//! Each class keeps a color histogram (RGB quantized per channel) and a
//! coarse normalized-position histogram. The per-pixel posterior treats the
//! two features as independent and weighs classes by their pixel share. A
//! spatial prior decaying with distance from the guidance mask then tempers
//! the posterior: `score = posterior · (λ + (1 − λ) · prior)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BinaryMask, Image, ScoreMap};
use crate::morphology::distance_transform;
use crate::synth::TrainingSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColorModelConfig {
    /// Bins per RGB channel.
    pub color_bins: usize,
    /// Cells per axis of the normalized-position grid; 0 disables the feature.
    pub position_grid: usize,
    /// Weight of the appearance-only term; 1 ignores the spatial prior.
    pub lambda: f64,
    /// Prior length scale as a fraction of `max(width, height)`.
    pub prior_sigma_fraction: f64,
}

impl Default for ColorModelConfig {
    fn default() -> Self {
        ColorModelConfig {
            color_bins: 16,
            position_grid: 4,
            lambda: 0.5,
            prior_sigma_fraction: 0.1,
        }
    }
}

impl ColorModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=256).contains(&self.color_bins) {
            return Err(Error::InvalidParameter(format!(
                "color_bins must be in 1..=256, got {}",
                self.color_bins
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.prior_sigma_fraction.is_nan() || self.prior_sigma_fraction <= 0.0 {
            return Err(Error::InvalidParameter("prior_sigma_fraction must be > 0".into()));
        }
        Ok(())
    }

    fn color_bin(&self, rgb: [u8; 3]) -> usize {
        let b = self.color_bins;
        let q = |v: u8| v as usize * b / 256;
        (q(rgb[0]) * b + q(rgb[1])) * b + q(rgb[2])
    }

    fn position_bin(&self, x: u32, y: u32, width: u32, height: u32) -> usize {
        let g = self.position_grid;
        let qx = (x as usize * g / width as usize).min(g - 1);
        let qy = (y as usize * g / height as usize).min(g - 1);
        qy * g + qx
    }
}

#[derive(Debug, Clone, Default)]
struct ClassCounts {
    color: Vec<u64>,
    position: Vec<u64>,
    total: u64,
}

/// Normalized class histograms and class priors.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorModelState {
    config: ColorModelConfig,
    /// `[background, foreground]`.
    color: [Vec<f64>; 2],
    position: [Vec<f64>; 2],
    prior: [f64; 2],
}

/// Accumulate every sample, then normalize with a pseudocount of one per bin.
pub fn fit_online(config: &ColorModelConfig, samples: &[TrainingSample]) -> Result<ColorModelState> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Refiner("cannot fit a color model on zero samples".into()));
    }
    let n_color = config.color_bins.pow(3);
    let n_pos = config.position_grid * config.position_grid;
    let mut counts: [ClassCounts; 2] = std::array::from_fn(|_| ClassCounts {
        color: vec![0; n_color],
        position: vec![0; n_pos],
        total: 0,
    });
    for s in samples {
        if s.target_mask.dims() != s.image.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("training sample {}", s.id),
                expected: s.image.dims(),
                actual: s.target_mask.dims(),
            });
        }
        let (w, h) = s.image.dims();
        for y in 0..h {
            for x in 0..w {
                let c = &mut counts[s.target_mask.get(x, y) as usize];
                c.color[config.color_bin(s.image.rgb(x, y))] += 1;
                if n_pos > 0 {
                    c.position[config.position_bin(x, y, w, h)] += 1;
                }
                c.total += 1;
            }
        }
    }
    if counts[1].total == 0 {
        return Err(Error::Refiner("every training target is empty".into()));
    }
    let normalize = |bins: &[u64]| -> Vec<f64> {
        let denom = bins.iter().sum::<u64>() as f64 + bins.len() as f64;
        bins.iter().map(|&c| (c as f64 + 1.0) / denom).collect()
    };
    let total = (counts[0].total + counts[1].total) as f64;
    Ok(ColorModelState {
        config: config.clone(),
        color: [normalize(&counts[0].color), normalize(&counts[1].color)],
        position: [normalize(&counts[0].position), normalize(&counts[1].position)],
        prior: [counts[0].total as f64 / total, counts[1].total as f64 / total],
    })
}

impl ColorModelState {
    pub fn config(&self) -> &ColorModelConfig {
        &self.config
    }

    /// Appearance-only foreground posterior per pixel.
    pub fn posterior(&self, image: &Image) -> Vec<f64> {
        let (w, h) = image.dims();
        let use_pos = self.config.position_grid > 0;
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for y in 0..h {
            for x in 0..w {
                let cb = self.config.color_bin(image.rgb(x, y));
                let pb = if use_pos { self.config.position_bin(x, y, w, h) } else { 0 };
                let lik = |k: usize| {
                    let p = if use_pos { self.position[k][pb] } else { 1.0 };
                    self.prior[k] * self.color[k][cb] * p
                };
                let (bg, fg) = (lik(0), lik(1));
                out.push(if fg + bg > 0.0 { fg / (fg + bg) } else { 0.5 });
            }
        }
        out
    }

    /// Posterior tempered by the guidance prior. Without guidance the
    /// appearance term stands alone.
    pub fn score(&self, image: &Image, guidance: Option<&BinaryMask>) -> Result<ScoreMap> {
        let (w, h) = image.dims();
        let post = self.posterior(image);
        let data: Vec<f32> = match guidance {
            None => post.iter().map(|&p| p as f32).collect(),
            Some(g) => {
                if g.dims() != image.dims() {
                    return Err(Error::DimensionMismatch {
                        context: "guidance mask".into(),
                        expected: image.dims(),
                        actual: g.dims(),
                    });
                }
                let sigma = self.config.prior_sigma_fraction * w.max(h) as f64;
                let lambda = self.config.lambda;
                distance_transform(g)
                    .into_iter()
                    .zip(&post)
                    .map(|(d, &p)| {
                        let prior = (-d / sigma).exp();
                        (p * (lambda + (1.0 - lambda) * prior)).clamp(0.0, 1.0) as f32
                    })
                    .collect()
            }
        };
        ScoreMap::new(w, h, data)
    }
}
