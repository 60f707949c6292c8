//! Synthetic two-view cases with a tunable amount of label information in
//! the descriptors.
//!
//! Each case draws a label, then one or two lesions whose shape and margin
//! classes follow label-conditional distributions. Every lesion is rendered
//! into both views under different affine projections. With probability
//! `alpha` a lesion's descriptor tokens name its true shape and margin;
//! otherwise they are drawn uniformly, independent of the label.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ConfigMap;
use crate::data::image::write_pgm;
use crate::data::records::{write_metadata_csv, CaseRecord};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const SHAPES: [&str; 3] = ["Round", "Oval", "Irregular"];
pub const MARGINS: [&str; 4] = ["Circumscribed", "Ill-defined", "Spicular", "Obscured"];

const BENIGN_SHAPE: [f64; 3] = [0.425, 0.425, 0.15];
const MALIGNANT_SHAPE: [f64; 3] = [0.075, 0.075, 0.85];
const BENIGN_MARGIN: [f64; 4] = [0.425, 0.075, 0.075, 0.425];
const MALIGNANT_MARGIN: [f64; 4] = [0.075, 0.425, 0.425, 0.075];
const TWO_LESION_PROB: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub alpha: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.n_cases == 0 {
            return Err(Error::Validation("n_cases must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Validation(format!("image size {} is below 16", self.image_size)));
        }
        Ok(())
    }

    pub fn manifest(&self) -> ConfigMap {
        let mut kv = ConfigMap::new();
        kv.set("seed", self.seed);
        kv.set("alpha", format!("{:?}", self.alpha));
        kv.set("n_cases", self.n_cases);
        kv.set("image_size", self.image_size);
        kv
    }
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Geometry of one lesion in its own frame (pixels).
#[derive(Clone)]
struct Lesion {
    shape: usize,
    margin: usize,
    radius: f64,
    orientation: f64,
    /// Boundary harmonics for irregular shapes: (amplitude, frequency, phase).
    harmonics: Vec<(f64, f64, f64)>,
    /// Spicule angles and lengths.
    spicules: Vec<(f64, f64)>,
    /// Occluding texture centres for obscured margins, in lesion frame.
    occluders: Vec<(f64, f64, f64)>,
}

impl Lesion {
    fn draw(rng: &mut ChaCha8Rng, shape: usize, margin: usize, size: f64) -> Lesion {
        let radius = rng.random_range(0.10..0.15) * size;
        let orientation = rng.random_range(0.0..PI);
        let harmonics = if shape == 2 {
            (2..=5)
                .map(|m| (rng.random_range(0.08..0.2), m as f64, rng.random_range(0.0..2.0 * PI)))
                .collect()
        } else {
            Vec::new()
        };
        let spicules = if margin == 2 {
            let n = rng.random_range(8..14);
            (0..n)
                .map(|_| (rng.random_range(0.0..2.0 * PI), rng.random_range(0.6..1.3) * radius))
                .collect()
        } else {
            Vec::new()
        };
        let occluders = if margin == 3 {
            (0..6)
                .map(|_| {
                    let a = rng.random_range(0.0..2.0 * PI);
                    let r = radius * rng.random_range(0.8..1.2);
                    (r * a.cos(), r * a.sin(), radius * rng.random_range(0.3..0.5))
                })
                .collect()
        } else {
            Vec::new()
        };
        Lesion {
            shape,
            margin,
            radius,
            orientation,
            harmonics,
            spicules,
            occluders,
        }
    }

    fn boundary(&self, theta: f64) -> f64 {
        match self.shape {
            0 => self.radius,
            1 => {
                let (a, b) = (self.radius * 1.35, self.radius / 1.35);
                let t = theta - self.orientation;
                a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt()
            }
            _ => {
                let bump: f64 = self.harmonics.iter().map(|(amp, m, ph)| amp * (m * theta + ph).cos()).sum();
                self.radius * (1.0 + bump)
            }
        }
    }

    /// Lesion opacity in `[0, 1]` at lesion-frame offset `(x, y)`.
    fn opacity(&self, x: f64, y: f64) -> f64 {
        let r = x.hypot(y);
        let theta = y.atan2(x);
        let edge = self.boundary(theta);
        let width = if self.margin == 1 { 0.3 * self.radius } else { 0.6 };
        let mut m = 1.0 / (1.0 + ((r - edge) / width).exp());
        if self.margin == 2 {
            for &(a, len) in &self.spicules {
                let d = r - edge;
                if d > -1.0 && d < len {
                    let mut da = (theta - a).rem_euclid(2.0 * PI);
                    if da > PI {
                        da = 2.0 * PI - da;
                    }
                    let half = 0.9 * (1.0 - d.max(0.0) / len);
                    if r * da < half {
                        m = m.max(0.8);
                    }
                }
            }
        }
        if self.margin == 3 {
            for &(cx, cy, cr) in &self.occluders {
                let d = (x - cx).hypot(y - cy);
                if d < cr {
                    m = m.max(0.55 * (1.0 - d / cr));
                }
            }
        }
        m
    }
}

/// Placement of a lesion in one view: image point `p` maps to lesion frame
/// `M·(p − centre)`.
struct Placement {
    centre: (f64, f64),
    inverse: [[f64; 2]; 2],
}

impl Placement {
    fn cc(rng: &mut ChaCha8Rng, size: f64) -> Placement {
        let centre = (rng.random_range(0.3..0.7) * size, rng.random_range(0.3..0.7) * size);
        Placement {
            centre,
            inverse: [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    /// Rotated by 30–60 degrees and compressed along one axis.
    fn mlo(rng: &mut ChaCha8Rng, size: f64) -> Placement {
        let centre = (rng.random_range(0.3..0.7) * size, rng.random_range(0.3..0.7) * size);
        let angle: f64 = rng.random_range(PI / 6.0..PI / 3.0);
        let squash: f64 = rng.random_range(0.7..0.85);
        let (c, s) = (angle.cos(), angle.sin());
        // inverse of R(angle)·diag(1, squash)
        Placement {
            centre,
            inverse: [[c, s], [-s / squash, c / squash]],
        }
    }

    fn to_lesion(&self, row: f64, col: f64) -> (f64, f64) {
        let (dx, dy) = (col - self.centre.1, row - self.centre.0);
        let m = &self.inverse;
        (m[0][0] * dx + m[0][1] * dy, m[1][0] * dx + m[1][1] * dy)
    }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.5..2.0) * 2.0 * PI / size as f64,
                rng.random_range(0.5..2.0) * 2.0 * PI / size as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let smooth: f64 = waves
                .iter()
                .map(|(a, fy, fx, ph)| a * (fy * i as f64 + fx * j as f64 + ph).sin())
                .sum();
            out.push(0.25 + smooth + noise.sample(rng));
        }
    }
    out
}

fn render(rng: &mut ChaCha8Rng, size: usize, lesions: &[(Lesion, Placement)]) -> Tensor {
    let mut pixels = background(rng, size);
    for i in 0..size {
        for j in 0..size {
            let p = &mut pixels[i * size + j];
            for (lesion, place) in lesions {
                let (x, y) = place.to_lesion(i as f64, j as f64);
                let m = lesion.opacity(x, y);
                *p += (0.8 - *p) * m;
            }
            *p = p.clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[1, size, size], pixels).expect("square image")
}

/// One generated case: record plus both views.
pub struct SynthCase {
    pub record: CaseRecord,
    pub cc: Tensor,
    pub mlo: Tensor,
}

/// Generates case `index` (0-based) from its own random stream.
pub fn synth_case(cfg: &SynthConfig, index: usize) -> SynthCase {
    let mut rng = stream(cfg.seed, index as u64 + 1);
    let size = cfg.image_size as f64;
    let label: u8 = rng.random_bool(0.5).into();
    let k = if rng.random_bool(TWO_LESION_PROB) { 2 } else { 1 };
    let (shape_p, margin_p) = if label == 1 {
        (&MALIGNANT_SHAPE, &MALIGNANT_MARGIN)
    } else {
        (&BENIGN_SHAPE, &BENIGN_MARGIN)
    };
    let mut cc_lesions = Vec::with_capacity(k);
    let mut mlo_lesions = Vec::with_capacity(k);
    let mut tokens = Vec::with_capacity(k);
    for _ in 0..k {
        let shape = categorical(&mut rng, shape_p);
        let margin = categorical(&mut rng, margin_p);
        let (ts, tm) = if rng.random_bool(cfg.alpha) {
            (shape, margin)
        } else {
            (rng.random_range(0..SHAPES.len()), rng.random_range(0..MARGINS.len()))
        };
        tokens.push(vec![SHAPES[ts].to_string(), MARGINS[tm].to_string()]);
        let cc = Placement::cc(&mut rng, size);
        let mlo = Placement::mlo(&mut rng, size);
        let lesion = Lesion::draw(&mut rng, shape, margin, size);
        cc_lesions.push((lesion.clone(), cc));
        mlo_lesions.push((lesion, mlo));
    }
    let cc = render(&mut rng, cfg.image_size, &cc_lesions);
    let mlo = render(&mut rng, cfg.image_size, &mlo_lesions);
    let case_id = format!("case{index:05}");
    SynthCase {
        record: CaseRecord {
            cc_image: PathBuf::from(format!("images/{case_id}_CC.pgm")),
            mlo_image: PathBuf::from(format!("images/{case_id}_MLO.pgm")),
            case_id,
            lesions: tokens,
            label,
        },
        cc,
        mlo,
    }
}

/// Writes `images/*.pgm`, `metadata.csv` and `manifest.txt` under `out`.
pub fn synth_generate(out: &Path, cfg: &SynthConfig) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = out.join("manifest.txt");
    crate::fsio::write_atomic(&manifest, cfg.manifest().to_text())?;
    let mut records = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let case = synth_case(cfg, i);
        write_pgm(&out.join(&case.record.cc_image), &case.cc)?;
        write_pgm(&out.join(&case.record.mlo_image), &case.mlo)?;
        records.push(case.record);
    }
    write_metadata_csv(&out.join("metadata.csv"), &records)?;
    Ok(records)
}
