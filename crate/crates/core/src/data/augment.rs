use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::image::image_dims;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training-time augmentations. Each view of a case is augmented with its
/// own draws.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub hflip: bool,
    pub vflip: bool,
    pub elastic: bool,
    pub gaussian_noise: bool,
    /// Square side images are resized to; `None` keeps the model's size.
    pub size: Option<usize>,
    /// Pixel distance between elastic control points.
    pub elastic_spacing: usize,
    /// Standard deviation of control-point displacements, in pixels.
    pub elastic_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            hflip: true,
            vflip: true,
            elastic: true,
            gaussian_noise: false,
            size: None,
            elastic_spacing: 4,
            elastic_sigma: 1.0,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            hflip: false,
            vflip: false,
            elastic: false,
            gaussian_noise: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.hflip || self.vflip || self.elastic || self.gaussian_noise)
    }

    /// Comma-separated flags (`hflip,vflip,elastic,noise`), or `none`.
    pub fn parse_flags(&mut self, spec: &str) -> Result<()> {
        let (mut h, mut v, mut e, mut g) = (false, false, false, false);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "hflip" => h = true,
                "vflip" => v = true,
                "flip" | "flips" => (h, v) = (true, true),
                "elastic" => e = true,
                "noise" | "gaussian" => g = true,
                other => return Err(Error::Config(format!("unknown augmentation {other:?}"))),
            }
        }
        (self.hflip, self.vflip, self.elastic, self.gaussian_noise) = (h, v, e, g);
        Ok(())
    }

    pub fn flags(&self) -> String {
        let names: Vec<&str> = [
            (self.hflip, "hflip"),
            (self.vflip, "vflip"),
            (self.elastic, "elastic"),
            (self.gaussian_noise, "noise"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join(",")
        }
    }
}

pub fn hflip(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape(), data).expect("same shape")
}

pub fn vflip(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    let data: Vec<f64> = image.data().chunks(w).rev().flatten().copied().collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps the image by a smooth random displacement field: control points
/// every `spacing` pixels get normal offsets, which are bilinearly
/// interpolated to every pixel. Samples outside the image clamp to the border.
pub fn elastic<R: Rng + ?Sized>(image: &Tensor, spacing: usize, sigma: f64, rng: &mut R) -> Result<Tensor> {
    let [_, h, w] = image_dims(image)?;
    if spacing == 0 || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("elastic spacing {spacing} / sigma {sigma} invalid")));
    }
    let gh = (h - 1) / spacing + 2;
    let gw = (w - 1) / spacing + 2;
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let dy: Vec<f64> = (0..gh * gw).map(|_| normal.sample(rng)).collect();
    let dx: Vec<f64> = (0..gh * gw).map(|_| normal.sample(rng)).collect();
    let src = image.data();
    let s = spacing as f64;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (gy, gx) = (i as f64 / s, j as f64 / s);
            let oy = bilinear(&dy, gh, gw, gy, gx);
            let ox = bilinear(&dx, gh, gw, gy, gx);
            out.push(bilinear(src, h, w, i as f64 + oy, j as f64 + ox));
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn gaussian_noise<R: Rng + ?Sized>(image: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = image
        .data()
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Applies the enabled augmentations in order: flips (each with probability
/// 0.5), elastic warp, additive noise.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor> {
    image_dims(image)?;
    let mut out = image.clone();
    if policy.hflip && rng.random_bool(0.5) {
        out = hflip(&out);
    }
    if policy.vflip && rng.random_bool(0.5) {
        out = vflip(&out);
    }
    if policy.elastic {
        out = elastic(&out, policy.elastic_spacing, policy.elastic_sigma, rng)?;
    }
    if policy.gaussian_noise {
        out = gaussian_noise(&out, policy.noise_sigma, rng);
    }
    Ok(out)
}
