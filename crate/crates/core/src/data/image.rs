//! Grayscale image I/O and resampling. Images are `[1, H, W]` tensors with
//! values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::ImageFormat {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads a binary PGM (P5, 8 or 16 bit) or a grayscale PNG, scaled by the
/// largest representable value.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|d| format_err(path, d))
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(|d| format_err(path, d))
    } else {
        Err(format_err(path, "expected binary PGM (P5) or PNG"))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PGM header")?;
    }
    let [w, h, maxval] = fields;
    if !(1..=65535).contains(&maxval) || w == 0 || h == 0 {
        return Err(format!("unsupported PGM geometry {w}x{h} maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PGM header".into());
    }
    let raster = &bytes[pos + 1..];
    let n = w * h;
    let scale = maxval as f64;
    let data: Vec<f64> = if maxval < 256 {
        if raster.len() < n {
            return Err("truncated PGM raster".into());
        }
        raster[..n].iter().map(|&b| b as f64 / scale).collect()
    } else {
        if raster.len() < 2 * n {
            return Err("truncated PGM raster".into());
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    if data.iter().any(|&v| v > 1.0) {
        return Err("PGM sample exceeds maxval".into());
    }
    Tensor::new(&[1, h, w], data).map_err(|e| e.to_string())
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => return Err(format!("unsupported PNG color type {:?}", other.color())),
    };
    Tensor::new(&[1, h, w], data).map_err(|e| e.to_string())
}

/// 8-bit binary PGM bytes; values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [_, h, w] = image_dims(image)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    crate::fsio::write_atomic(path, encode_pgm(image)?)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [1, h, w] => Ok([1, h, w]),
        ref s => Err(Error::dim("image", format!("expected [1, H, W], got {s:?}"))),
    }
}

/// Bilinear resampling with aligned corners: output pixel `i` samples source
/// coordinate `i·(H−1)/(h−1)`, so corner pixels map to corner pixels.
pub fn resize(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [_, h, w] = image_dims(image)?;
    if height == 0 || width == 0 {
        return Err(Error::Config(format!("resize target {height}x{width} is empty")));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let src = image.data();
    let coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        if out == 1 || inp == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let x0 = (x.floor() as usize).min(inp - 1);
        let x1 = (x0 + 1).min(inp - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|j| coord(j, width, w)).collect();
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let (y0, y1, fy) = coord(i, height, h);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[1, height, width], out)
}

/// [`resize`] to a size the feature extractor accepts: both sides must be
/// multiples of `multiple`.
pub fn resize_for_model(image: &Tensor, height: usize, width: usize, multiple: usize) -> Result<Tensor> {
    if multiple == 0 || !height.is_multiple_of(multiple) || !width.is_multiple_of(multiple) {
        return Err(Error::Config(format!(
            "resize target {height}x{width} is not divisible by {multiple}"
        )));
    }
    resize(image, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_bytes_scale_by_maxval() {
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        let t = decode_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let mut bytes = b"P5 1 2 65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        assert_eq!(decode_pgm(&bytes).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn pgm_round_trip_and_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &Tensor::zeros(&[1, 3, 5])).unwrap();
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
        write_pgm(&p, &Tensor::full(&[1, 3, 5], 1.0)).unwrap();
        let t = load_image(&p).unwrap();
        assert_eq!(t.shape(), &[1, 3, 5]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_gray_loads_and_color_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_raw(2, 1, vec![255, 51]).unwrap().save(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[1.0, 0.2]);
        let p16 = dir.path().join("g16.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![65535u16]).unwrap().save(&p16).unwrap();
        assert_eq!(load_image(&p16).unwrap().data(), &[1.0]);
        let rgb = dir.path().join("c.png");
        image::RgbImage::from_raw(1, 1, vec![1, 2, 3]).unwrap().save(&rgb).unwrap();
        assert!(matches!(load_image(&rgb), Err(Error::ImageFormat { .. })));
        let junk = dir.path().join("j.bmp");
        std::fs::write(&junk, b"BM....").unwrap();
        assert!(load_image(&junk).is_err());
    }

    #[test]
    fn resize_examples() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let same = resize(&img, 2, 2).unwrap();
        assert!(same.max_abs_diff(&img) <= 1e-12);
        let big = resize(&img, 3, 3).unwrap();
        let d = big.data();
        assert_eq!([d[0], d[2], d[6], d[8]], [0.0, 1.0, 0.5, 0.25]);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[3], 0.25);
        assert_eq!(d[4], (0.0 + 1.0 + 0.5 + 0.25) / 4.0);
        let c = resize(&Tensor::full(&[1, 5, 7], 0.3), 16, 12).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(matches!(resize_for_model(&img, 30, 32, 16), Err(Error::Config(_))));
    }
}
