use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{mean_std, FeatureExtractor, MetricReport};
use crate::error::{invalid, Result};
use crate::generator::ImageGenerator;
use crate::rng::{normal_vec, uniform_vec, SeededRng};

/// Probe values written into the two swapped dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdivRange {
    /// `c1[i] = lo, c1[j] = hi` and the reverse for `c2`.
    Endpoints { lo: f64, hi: f64 },
    /// `c1[i] = -k, c1[j] = k` and the reverse for `c2`.
    Symmetric { k: f64 },
}

impl Default for PdivRange {
    fn default() -> Self {
        PdivRange::Endpoints { lo: 0.0, hi: 1.0 }
    }
}

impl PdivRange {
    fn values(&self) -> (f64, f64) {
        match *self {
            PdivRange::Endpoints { lo, hi } => (lo, hi),
            PdivRange::Symmetric { k } => (-k, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdivOptions {
    pub repeats: usize,
    pub range: PdivRange,
    /// Pairs rendered per forward pass.
    pub chunk: usize,
}

impl Default for PdivOptions {
    fn default() -> Self {
        Self {
            repeats: 1000,
            range: PdivRange::default(),
            chunk: 64,
        }
    }
}

/// Average feature-space L1 (mean over elements) between two renders whose
/// codes swap extreme values at two random dimensions. `z` is shared within a pair.
pub fn perceptual_diversity(
    generator: &dyn ImageGenerator,
    extractor: &dyn FeatureExtractor,
    options: PdivOptions,
    rng: &mut SeededRng,
) -> Result<MetricReport> {
    let d = generator.code_dim();
    let n_z = generator.noise_dim();
    if d < 2 {
        return invalid(format!("perceptual diversity needs d >= 2, got {d}"));
    }
    if options.repeats == 0 || options.chunk == 0 {
        return invalid("repeats and chunk must be >= 1");
    }
    let (lo, hi) = options.range.values();
    let dev = generator.device();
    let dtype = generator.dtype();
    let mut per_repeat = Vec::with_capacity(options.repeats);
    let mut done = 0;
    while done < options.repeats {
        let m = options.chunk.min(options.repeats - done);
        let mut c1 = Vec::with_capacity(m * d);
        let mut c2 = Vec::with_capacity(m * d);
        let mut z = Vec::with_capacity(m * n_z);
        for _ in 0..m {
            let c = uniform_vec(rng, d);
            let i = rng.random_range(0..d);
            let mut j = rng.random_range(0..d - 1);
            if j >= i {
                j += 1;
            }
            let mut a = c.clone();
            let mut b = c;
            a[i] = lo;
            a[j] = hi;
            b[i] = hi;
            b[j] = lo;
            c1.extend(a);
            c2.extend(b);
            z.extend(normal_vec(rng, n_z));
        }
        let c = Tensor::from_vec([c1, c2].concat(), (2 * m, d), &dev)?.to_dtype(dtype)?;
        let zt = Tensor::from_vec(z, (m, n_z), &dev)?.to_dtype(dtype)?;
        let zt = Tensor::cat(&[&zt, &zt], 0)?;
        let feats = extractor.features(&generator.render(&c, &zt)?)?;
        let diff = (feats.narrow(0, 0, m)? - feats.narrow(0, m, m)?)?
            .abs()?
            .mean(1)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?;
        per_repeat.extend(diff);
        done += m;
    }
    let (score, dispersion) = mean_std(&per_repeat);
    MetricReport::new(
        "pdiv",
        score,
        dispersion,
        options.repeats,
        serde_json::json!({
            "extractor": extractor.name(),
            "range": options.range,
            "repeats": options.repeats,
        }),
    )
}
