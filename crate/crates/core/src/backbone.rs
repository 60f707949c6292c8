//! Multi-resolution convolutional feature extractor.
//!
//! Level 0 downsamples the image by 4 and maps it to `d0` channels; every
//! further level halves the spatial extent and doubles the channels, so level
//! `k` has shape `[d0·2^k, H/(4·2^k), W/(4·2^k)]`. Every convolution kernel is
//! weight-standardized before use and every convolution is followed by group
//! normalization and a ReLU.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Largest divisor of `channels` not exceeding 32.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Spatial divisor an image must satisfy to produce `levels` pyramid levels.
pub fn required_multiple(levels: usize) -> usize {
    4 << levels.saturating_sub(1)
}

/// Shape of pyramid level `k` for an `h × w` image.
pub fn level_shape(d0: usize, k: usize, h: usize, w: usize) -> [usize; 3] {
    let div = 4 << k;
    [d0 << k, h / div, w / div]
}

#[derive(Clone, Debug)]
struct ConvUnit {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Tokenizer {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles for one feature extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    d0: usize,
    token_width: usize,
    /// `units[k]` are the conv units of level `k`.
    units: Vec<Vec<ConvUnit>>,
    tokenizers: Vec<Tokenizer>,
}

/// Output of [`Backbone::extract_pyramid`]; `levels[k]` is `F_k`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// One pyramid level flattened into `N_k = H'·W'` tokens of width `4·d0`.
#[derive(Clone, Copy, Debug)]
pub struct TokenizedFeatures {
    pub tokens: Var,
    pub level: usize,
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl Backbone {
    /// Registers the parameters of a `levels`-level extractor under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d0: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d0 == 0 {
            return Err(Error::Config("d0 must be positive".into()));
        }
        let gain = 2f64.sqrt();
        let mut conv = |store: &mut ParamStore, name: String, cin: usize, cout: usize, stride| {
            let kernel = store.insert(
                format!("{name}.kernel"),
                he_normal(&[cout, cin, 3, 3], cin * 9, gain, rng),
            )?;
            let gamma = store.insert(format!("{name}.gn_gamma"), Tensor::full(&[cout], 1.0))?;
            let beta = store.insert(format!("{name}.gn_beta"), Tensor::zeros(&[cout]))?;
            Ok::<_, Error>(ConvUnit {
                kernel,
                gamma,
                beta,
                stride,
            })
        };
        let mut units = Vec::with_capacity(levels);
        for k in 0..levels {
            let cout = d0 << k;
            let level = if k == 0 {
                vec![conv(store, format!("{prefix}.level0.conv"), 1, cout, 2)?]
            } else {
                let cin = d0 << (k - 1);
                vec![
                    conv(store, format!("{prefix}.level{k}.conv1"), cin, cout, 1)?,
                    conv(store, format!("{prefix}.level{k}.conv2"), cout, cout, 2)?,
                ]
            };
            units.push(level);
        }
        let token_width = 4 * d0;
        let mut tokenizers = Vec::with_capacity(levels);
        for k in 0..levels {
            let cin = d0 << k;
            let weight = store.insert(
                format!("{prefix}.level{k}.tokenizer.weight"),
                he_normal(&[cin, token_width], cin, 1.0, rng),
            )?;
            let bias = store.insert(
                format!("{prefix}.level{k}.tokenizer.bias"),
                Tensor::zeros(&[token_width]),
            )?;
            tokenizers.push(Tokenizer { weight, bias });
        }
        Ok(Backbone {
            d0,
            token_width,
            units,
            tokenizers,
        })
    }

    pub fn levels(&self) -> usize {
        self.units.len()
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    /// Width `d' = 4·d0` of every token.
    pub fn token_width(&self) -> usize {
        self.token_width
    }

    pub fn check_image_size(&self, h: usize, w: usize) -> Result<()> {
        let m = required_multiple(self.levels());
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "image {h}x{w} must have both sides divisible by {m} for {} pyramid levels",
                self.levels()
            )));
        }
        Ok(())
    }

    fn conv_unit(&self, tape: &mut Tape, store: &ParamStore, unit: &ConvUnit, x: Var) -> Result<Var> {
        let raw = tape.param(store, unit.kernel)?;
        let kernel = tape.standardize(raw, STANDARDIZE_EPS)?;
        if cfg!(debug_assertions) {
            debug_check_standardized(tape.value(kernel));
        }
        let y = tape.conv2d(x, kernel, None, unit.stride, 1)?;
        let channels = tape.shape(y)[0];
        let (gamma, beta) = (tape.param(store, unit.gamma)?, tape.param(store, unit.beta)?);
        let y = tape.group_norm(y, group_count(channels), gamma, beta, NORM_EPS)?;
        tape.relu(y)
    }

    /// Runs every level on a `[1, H, W]` image.
    pub fn extract_pyramid(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<FeaturePyramid> {
        let [1, h, w] = tape.shape(image)[..] else {
            return Err(Error::dim(
                "extract_pyramid",
                format!("expected a [1, H, W] image, got {:?}", tape.shape(image)),
            ));
        };
        self.check_image_size(h, w)?;
        let mut levels = Vec::with_capacity(self.levels());
        let mut x = image;
        for (k, units) in self.units.iter().enumerate() {
            for unit in units {
                x = self.conv_unit(tape, store, unit, x)?;
            }
            if k == 0 {
                x = tape.max_pool2d(x, 2, 2)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Projects level `k` to `4·d0` channels with a learned 1×1 map and
    /// flattens spatial positions row-major into tokens.
    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, level: usize, features: Var) -> Result<TokenizedFeatures> {
        let tok = self
            .tokenizers
            .get(level)
            .ok_or_else(|| Error::Usage(format!("no pyramid level {level}")))?;
        let [c, h, w] = tape.shape(features)[..] else {
            return Err(Error::dim("tokenize", format!("expected [C, H, W], got {:?}", tape.shape(features))));
        };
        if c != self.d0 << level {
            return Err(Error::dim("tokenize", format!("level {level} expects {} channels, got {c}", self.d0 << level)));
        }
        let flat = tape.reshape(features, &[c, h * w])?;
        let positions = tape.transpose(flat)?;
        let weight = tape.param(store, tok.weight)?;
        let bias = tape.param(store, tok.bias)?;
        let projected = tape.matmul(positions, weight)?;
        let tokens = tape.add_bias(projected, bias)?;
        Ok(TokenizedFeatures { tokens, level })
    }
}

fn debug_check_standardized(kernel: &Tensor) {
    let per = kernel.numel() / kernel.shape()[0];
    for filter in kernel.data().chunks(per) {
        let mean = filter.iter().sum::<f64>() / per as f64;
        let var = filter.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
        debug_assert!(mean.abs() < 1e-9, "standardized filter mean {mean}");
        debug_assert!(var <= 1.0 + 1e-9, "standardized filter variance {var}");
    }
}
