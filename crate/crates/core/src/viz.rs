//! Latent traversal grids: one row per code dimension, one column per value.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{invalid, Result};
use crate::generator::Generator;
use crate::latent::{LatentCode, NoiseVector};

pub const SEPARATOR_PX: usize = 2;
const SEPARATOR_VALUE: u8 = 255;

/// `steps` evenly spaced values covering `[0, 1]`.
pub fn sweep_values(steps: usize) -> Vec<f64> {
    match steps {
        0 => vec![],
        1 => vec![0.5],
        _ => (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect(),
    }
}

/// Tiles `(C, S, S)` images row-major into one picture with separators.
pub fn tile(images: &[Tensor], rows: usize, cols: usize) -> Result<DynamicImage> {
    if images.is_empty() || images.len() != rows * cols {
        return invalid(format!("{} tiles do not fill a {rows}x{cols} grid", images.len()));
    }
    let (c, s, s2) = images[0].dims3()?;
    if s != s2 || (c != 1 && c != 3) {
        return invalid(format!("tiles must be (1|3, S, S), got {:?}", images[0].dims()));
    }
    let width = cols * s + (cols - 1) * SEPARATOR_PX;
    let height = rows * s + (rows - 1) * SEPARATOR_PX;
    let mut buf = vec![SEPARATOR_VALUE; width * height * c];
    for (k, img) in images.iter().enumerate() {
        if img.dims() != [c, s, s] {
            return invalid("tiles differ in shape");
        }
        let px = img.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let (r, col) = (k / cols, k % cols);
        let (y0, x0) = (r * (s + SEPARATOR_PX), col * (s + SEPARATOR_PX));
        for y in 0..s {
            for x in 0..s {
                for ch in 0..c {
                    let v = px[(ch * s + y) * s + x].clamp(0.0, 1.0);
                    buf[((y0 + y) * width + x0 + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    let (w, h) = (width as u32, height as u32);
    Ok(if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, buf).expect("buffer sized above"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, buf).expect("buffer sized above"))
    })
}

/// Rows sweep each listed dimension of `base` over [`sweep_values`]`(steps)`.
pub fn traversal_grid(
    generator: &Generator,
    base: &LatentCode,
    z: &NoiseVector,
    dims: &[usize],
    steps: usize,
) -> Result<DynamicImage> {
    if dims.is_empty() || steps == 0 {
        return invalid("need at least one dimension and one step");
    }
    let values = sweep_values(steps);
    let mut tiles = Vec::with_capacity(dims.len() * steps);
    for &d in dims {
        tiles.extend(generator.latent_traversal(base, z, d, &values)?);
    }
    tile(&tiles, dims.len(), steps)
}

pub fn save_png(image: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    image.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
