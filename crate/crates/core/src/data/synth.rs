use serde::{Deserialize, Serialize};

use super::FactorDataset;
use crate::error::{invalid, Result};

/// A full factorial grid of squares on black.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub img_size: usize,
    pub positions_x: usize,
    pub positions_y: usize,
    pub sizes: usize,
    pub brightness: usize,
    /// Upper bound on the number of rendered images.
    pub cap: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            img_size: 32,
            positions_x: 8,
            positions_y: 8,
            sizes: 4,
            brightness: 4,
            cap: 1 << 20,
        }
    }
}

impl SynthSpec {
    pub fn factor_sizes(&self) -> Vec<usize> {
        vec![self.positions_x, self.positions_y, self.sizes, self.brightness]
    }

    pub fn factor_names() -> Vec<String> {
        ["pos_x", "pos_y", "size", "brightness"].map(String::from).to_vec()
    }

    /// Side length in pixels for size class `k`.
    pub fn side(&self, k: usize) -> usize {
        (self.img_size / 8 + k * self.img_size / 16).max(1)
    }

    /// 8-bit intensity for brightness class `k`, from 40% to full scale.
    pub fn intensity(&self, k: usize) -> u8 {
        let t = if self.brightness > 1 {
            k as f64 / (self.brightness - 1) as f64
        } else {
            1.0
        };
        (255.0 * (0.4 + 0.6 * t)).round() as u8
    }

    fn offset(&self, class: usize, classes: usize, side: usize) -> usize {
        let room = self.img_size - side;
        (class * room + (classes - 1) / 2) / (classes - 1)
    }
}

/// Renders one image per factor combination, factors ordered
/// `(pos_x, pos_y, size, brightness)` with `pos_x` varying slowest.
pub fn synth_factors(spec: &SynthSpec) -> Result<FactorDataset> {
    let sizes = spec.factor_sizes();
    if sizes.iter().any(|&s| s < 2) {
        return invalid(format!("every factor needs >= 2 classes, got {sizes:?}"));
    }
    if spec.img_size < 8 {
        return invalid("img_size must be >= 8");
    }
    if spec.side(spec.sizes - 1) > spec.img_size {
        return invalid(format!("{} size classes do not fit in {}px", spec.sizes, spec.img_size));
    }
    let n: usize = sizes.iter().product();
    if n > spec.cap {
        return invalid(format!("full factorial has {n} images, cap is {}", spec.cap));
    }
    let s = spec.img_size;
    let mut pixels = vec![0u8; n * s * s];
    let mut classes = Vec::with_capacity(n * 4);
    let mut idx = 0;
    for px in 0..spec.positions_x {
        for py in 0..spec.positions_y {
            for sz in 0..spec.sizes {
                for br in 0..spec.brightness {
                    let side = spec.side(sz);
                    let x0 = spec.offset(px, spec.positions_x, side);
                    let y0 = spec.offset(py, spec.positions_y, side);
                    let value = spec.intensity(br);
                    let img = &mut pixels[idx * s * s..(idx + 1) * s * s];
                    for y in y0..y0 + side {
                        img[y * s + x0..y * s + x0 + side].fill(value);
                    }
                    classes.extend([px as u32, py as u32, sz as u32, br as u32]);
                    idx += 1;
                }
            }
        }
    }
    FactorDataset::new("synth", pixels, 255, (n, 1, s), classes, sizes, SynthSpec::factor_names())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_1024_images() {
        let ds = synth_factors(&SynthSpec::default()).unwrap();
        assert_eq!(ds.len(), 1024);
        assert_eq!(ds.img_size(), 32);
        assert!(ds.is_full_factorial());
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = synth_factors(&SynthSpec::default()).unwrap();
        let b = synth_factors(&SynthSpec::default()).unwrap();
        assert_eq!(a.raw_pixels(), b.raw_pixels());
    }

    #[test]
    fn brightness_changes_intensity_not_support() {
        let ds = synth_factors(&SynthSpec::default()).unwrap();
        // Indices 0 and 3 differ only in brightness class (0 vs 3).
        assert_eq!(&ds.factor_classes(0)[..3], &ds.factor_classes(3)[..3]);
        let a = ds.image(0);
        let b = ds.image(3);
        let support = |v: &[f32]| v.iter().map(|p| *p > 0.0).collect::<Vec<_>>();
        assert_eq!(support(&a), support(&b));
        assert_ne!(a, b);
    }

    #[test]
    fn squares_stay_inside_and_reach_edges() {
        let spec = SynthSpec::default();
        let ds = synth_factors(&spec).unwrap();
        let last = ds.len() - 1;
        let img = ds.image(last);
        let side = spec.side(spec.sizes - 1);
        let on: usize = img.iter().filter(|p| **p > 0.0).count();
        assert_eq!(on, side * side);
        assert!(img[32 * 32 - 1] > 0.0);
        assert!(ds.image(0)[0] > 0.0);
    }

    #[test]
    fn cap_and_class_counts_are_enforced() {
        assert!(synth_factors(&SynthSpec { cap: 1000, ..Default::default() }).is_err());
        assert!(synth_factors(&SynthSpec { sizes: 1, ..Default::default() }).is_err());
    }
}
