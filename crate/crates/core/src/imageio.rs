//! Reading images into tensors and writing maps as 8-bit graymaps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Luminance in `[0, 1]` as a `(1, 1, h, w)` tensor.
pub fn load_luminance(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let img = open(path.as_ref())?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
    Tensor::new(Shape::new(1, 1, h as usize, w as usize), data)
}

/// RGB in `[0, 1]` as a `(1, 3, h, w)` tensor.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let img = open(path.as_ref())?.into_rgb16();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        f64::from(raw[(y * w + x) * 3 + c]) / 65535.0
    }))
}

/// Writes `plane` (row-major `h x w`) as a binary PGM, mapping its minimum to
/// 0 and maximum to 255. Returns the `(min, max)` used. A constant plane is
/// written as all zeros.
pub fn write_pgm(path: impl AsRef<Path>, plane: &[f64], height: usize, width: usize) -> Result<(f64, f64)> {
    let path = path.as_ref();
    if plane.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            expected: format!("{} values for {height}x{width}", height * width),
            found: plane.len().to_string(),
        });
    }
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| if span > 0.0 { (255.0 * (v - min) / span).round() as u8 } else { 0 })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, width as u32, height as u32, ColorType::L8)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok((min, max))
}

/// Writes a `(1, 3, h, w)` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, image: &Tensor<f64>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_rgb_png",
            expected: "(1, 3, h, w)".into(),
            found: s.to_string(),
        });
    }
    let mut bytes = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                bytes.push((image.get(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(path, &bytes, s.w as u32, s.h as u32, ColorType::Rgb8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
