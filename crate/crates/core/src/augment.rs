//! Weak and strong augmentation policies.
//!
//! Vectors: weak adds isotropic Gaussian noise, strong adds more noise and
//! zero-masks random coordinates. Images (single-channel): weak is a random
//! resized crop plus horizontal flip, strong adds brightness/contrast jitter
//! and random intensity inversion.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// How a flat sample is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputKind {
    Vector { dim: usize },
    Image { height: usize, width: usize },
}

impl InputKind {
    pub fn dim(self) -> usize {
        match self {
            InputKind::Vector { dim } => dim,
            InputKind::Image { height, width } => height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Weak,
    Strong,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weak" => Ok(PolicyKind::Weak),
            "strong" => Ok(PolicyKind::Strong),
            other => Err(Error::Config(format!("unknown augmentation policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    /// Std-dev of additive Gaussian noise (vectors).
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate (vectors, strong only).
    pub mask_rate: f64,
    /// Lower bound of the crop area fraction (images); 1 disables cropping.
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    /// Probability of applying brightness/contrast jitter (images, strong only).
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Probability of inverting intensities (images, strong only).
    pub invert_prob: f64,
}

impl AugmentationPolicy {
    pub fn identity(kind: PolicyKind) -> Self {
        Self {
            kind,
            noise_sigma: 0.0,
            mask_rate: 0.0,
            crop_scale_min: 1.0,
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            invert_prob: 0.0,
        }
    }

    pub fn weak(noise_sigma: f64) -> Self {
        Self {
            noise_sigma,
            crop_scale_min: 0.2,
            flip_prob: 0.5,
            ..Self::identity(PolicyKind::Weak)
        }
    }

    pub fn strong(noise_sigma: f64, mask_rate: f64) -> Self {
        Self {
            kind: PolicyKind::Strong,
            noise_sigma,
            mask_rate,
            crop_scale_min: 0.2,
            flip_prob: 0.5,
            jitter_prob: 0.1,
            brightness: 0.4,
            contrast: 0.4,
            invert_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("mask_rate", self.mask_rate),
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("invert_prob", self.invert_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.brightness >= 0.0) || !(self.contrast >= 0.0) {
            return Err(Error::Config("noise and jitter strengths must be non-negative".into()));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale_min = {} must lie in (0, 1]",
                self.crop_scale_min
            )));
        }
        if self.kind == PolicyKind::Weak
            && (self.mask_rate > 0.0 || self.jitter_prob > 0.0 || self.invert_prob > 0.0)
        {
            return Err(Error::Config(
                "weak augmentation may only use noise, crop and flip".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64], kind: InputKind, rng: &mut impl rand::Rng) -> Result<Vec<f64>> {
        if x.len() != kind.dim() {
            return Err(Error::Shape(format!(
                "sample has {} values, input kind expects {}",
                x.len(),
                kind.dim()
            )));
        }
        Ok(match kind {
            InputKind::Vector { .. } => self.apply_vector(x, rng),
            InputKind::Image { height, width } => self.apply_image(x, height, width, rng),
        })
    }

    pub fn apply_batch(
        &self,
        batch: &Matrix,
        kind: InputKind,
        rng: &mut impl rand::Rng,
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(batch.rows(), batch.cols());
        for i in 0..batch.rows() {
            let v = self.apply(batch.row(i), kind, rng)?;
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }

    fn apply_vector(&self, x: &[f64], rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            out.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        if self.kind == PolicyKind::Strong && self.mask_rate > 0.0 {
            for v in &mut out {
                if rng.random::<f64>() < self.mask_rate {
                    *v = 0.0;
                }
            }
        }
        out
    }

    fn apply_image(&self, x: &[f64], h: usize, w: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut img = if self.crop_scale_min < 1.0 {
            random_resized_crop(x, h, w, self.crop_scale_min, rng)
        } else {
            x.to_vec()
        };
        if self.flip_prob > 0.0 && rng.random::<f64>() < self.flip_prob {
            for row in img.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if self.kind == PolicyKind::Strong {
            if self.jitter_prob > 0.0 && rng.random::<f64>() < self.jitter_prob {
                let b = 1.0 + rng.random_range(-self.brightness..=self.brightness);
                let c = 1.0 + rng.random_range(-self.contrast..=self.contrast);
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                img.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean) * b);
            }
            if self.invert_prob > 0.0 && rng.random::<f64>() < self.invert_prob {
                let (lo, hi) = img
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
                img.iter_mut().for_each(|v| *v = lo + hi - *v);
            }
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
            img.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        img
    }
}

/// Crops a random region covering a `[scale_min, 1]` fraction of the area
/// with aspect ratio in `[3/4, 4/3]`, resized back to `h×w` bilinearly.
fn random_resized_crop(
    x: &[f64],
    h: usize,
    w: usize,
    scale_min: f64,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let area = (h * w) as f64;
    let (mut ch, mut cw) = (h as f64, w as f64);
    for _ in 0..10 {
        let target = area * rng.random_range(scale_min..=1.0);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw_try = (target * ratio).sqrt();
        let ch_try = (target / ratio).sqrt();
        if cw_try <= w as f64 && ch_try <= h as f64 {
            ch = ch_try;
            cw = cw_try;
            break;
        }
    }
    let top = rng.random_range(0.0..=(h as f64 - ch));
    let left = rng.random_range(0.0..=(w as f64 - cw));
    let sample = |r: f64, c: f64| -> f64 {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let at = |rr: usize, cc: usize| x[rr * w + cc];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1))
            + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    };
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            // pixel centers of the output grid mapped into the crop window
            let r = top + (i as f64 + 0.5) * ch / h as f64 - 0.5;
            let c = left + (j as f64 + 0.5) * cw / w as f64 - 0.5;
            out.push(sample(r, c));
        }
    }
    out
}
