//! Factor-labelled image datasets and minibatch sampling.

mod archive;
mod synth;

pub use archive::{export_npz, file_sha256, load_dsprites, load_npz, verify_npz, ArchiveOptions, VerifyReport, DSPRITES_FACTORS};
pub use synth::{synth_factors, SynthSpec};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{substream, SeededRng};

/// Images with one integer class per ground-truth factor.
///
/// Pixels are stored as `u8` in `0..=pixel_max` (NCHW) and served as floats in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FactorDataset {
    name: String,
    pixels: Vec<u8>,
    pixel_max: u8,
    len: usize,
    stored_channels: usize,
    channels: usize,
    size: usize,
    classes: Vec<u32>,
    factor_sizes: Vec<usize>,
    factor_names: Vec<String>,
    strata: Vec<Vec<Vec<usize>>>,
}

impl FactorDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        pixels: Vec<u8>,
        pixel_max: u8,
        shape: (usize, usize, usize),
        classes: Vec<u32>,
        factor_sizes: Vec<usize>,
        factor_names: Vec<String>,
    ) -> Result<Self> {
        let (len, channels, size) = shape;
        let f = factor_sizes.len();
        if len == 0 {
            return invalid("dataset is empty");
        }
        if pixel_max == 0 {
            return invalid("pixel_max must be positive");
        }
        if pixels.len() != len * channels * size * size {
            return Err(Error::Format(format!(
                "pixel buffer holds {} values, shape ({len}, {channels}, {size}, {size}) needs {}",
                pixels.len(),
                len * channels * size * size
            )));
        }
        if let Some(p) = pixels.iter().position(|&v| v > pixel_max) {
            return Err(Error::Format(format!(
                "pixel {} at flat offset {p} exceeds pixel_max {pixel_max}",
                pixels[p]
            )));
        }
        if classes.len() != len * f || factor_names.len() != f {
            return Err(Error::Format(format!(
                "factor table holds {} entries and {} names for {len} images x {f} factors",
                classes.len(),
                factor_names.len()
            )));
        }
        let mut strata: Vec<Vec<Vec<usize>>> = factor_sizes.iter().map(|&s| vec![Vec::new(); s]).collect();
        for n in 0..len {
            for j in 0..f {
                let c = classes[n * f + j] as usize;
                if c >= factor_sizes[j] {
                    return Err(Error::Format(format!(
                        "image {n}: factor '{}' class {c} outside [0, {})",
                        factor_names[j], factor_sizes[j]
                    )));
                }
                strata[j][c].push(n);
            }
        }
        Ok(Self {
            name: name.into(),
            pixels,
            pixel_max,
            len,
            stored_channels: channels,
            channels,
            size,
            classes,
            factor_sizes,
            factor_names,
            strata,
        })
    }

    /// Serves single-channel images replicated to `channels`.
    pub fn with_channels(mut self, channels: usize) -> Result<Self> {
        if channels != self.stored_channels && self.stored_channels != 1 {
            return invalid(format!(
                "can only replicate single-channel data, this dataset has {}",
                self.stored_channels
            ));
        }
        self.channels = channels;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn img_size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stored_channels(&self) -> usize {
        self.stored_channels
    }

    pub fn pixel_max(&self) -> u8 {
        self.pixel_max
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn num_factors(&self) -> usize {
        self.factor_sizes.len()
    }

    pub fn factor_sizes(&self) -> &[usize] {
        &self.factor_sizes
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    pub fn factor_classes(&self, index: usize) -> &[u32] {
        let f = self.num_factors();
        &self.classes[index * f..(index + 1) * f]
    }

    pub fn all_classes(&self) -> &[u32] {
        &self.classes
    }

    /// Indices of images whose factor `f` has class `class`.
    pub fn stratum(&self, factor: usize, class: usize) -> &[usize] {
        &self.strata[factor][class]
    }

    pub fn is_full_factorial(&self) -> bool {
        self.factor_sizes.iter().product::<usize>() == self.len
    }

    /// One image as `C*H*W` floats in `[0, 1]`, after channel replication.
    pub fn image(&self, index: usize) -> Vec<f32> {
        let plane = self.stored_channels * self.size * self.size;
        let scale = 1.0 / self.pixel_max as f32;
        let raw = &self.pixels[index * plane..(index + 1) * plane];
        let base: Vec<f32> = raw.iter().map(|&p| p as f32 * scale).collect();
        if self.channels == self.stored_channels {
            base
        } else {
            base.repeat(self.channels)
        }
    }

    /// `(L, C, H, W)` batch of the given images.
    pub fn batch_tensor(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.size * self.size);
        for &i in indices {
            if i >= self.len {
                return invalid(format!("image index {i} out of range for {} images", self.len));
            }
            data.extend(self.image(i));
        }
        let t = Tensor::from_vec(data, (indices.len(), self.channels, self.size, self.size), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// A batch that holds one factor fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedFactorBatch {
    pub factor: usize,
    pub class: usize,
    pub indices: Vec<usize>,
    /// True when the stratum had fewer than `L` images and was sampled with replacement.
    pub with_replacement: bool,
}

/// Draws a random class for `factor`, then `l` images sharing it.
///
/// Sampling is without replacement unless the stratum holds fewer than `l` images.
pub fn fixed_factor_batch(
    dataset: &FactorDataset,
    factor: usize,
    l: usize,
    rng: &mut SeededRng,
) -> Result<FixedFactorBatch> {
    if l < 2 {
        return invalid(format!("fixed-factor batches need L >= 2, got {l}"));
    }
    if factor >= dataset.num_factors() {
        return invalid(format!("factor {factor} out of range ({} factors)", dataset.num_factors()));
    }
    let mut class = rng.random_range(0..dataset.factor_sizes()[factor]);
    // Classes never observed in a partial dataset are skipped.
    let mut tries = 0;
    while dataset.stratum(factor, class).is_empty() {
        class = rng.random_range(0..dataset.factor_sizes()[factor]);
        tries += 1;
        if tries > 10_000 {
            return invalid(format!("factor {factor} has no populated class"));
        }
    }
    let stratum = dataset.stratum(factor, class);
    let with_replacement = stratum.len() < l;
    let indices = if with_replacement {
        (0..l).map(|_| stratum[rng.random_range(0..stratum.len())]).collect()
    } else {
        rand::seq::index::sample(rng, stratum.len(), l)
            .into_iter()
            .map(|k| stratum[k])
            .collect()
    };
    Ok(FixedFactorBatch {
        factor,
        class,
        indices,
        with_replacement,
    })
}

/// Position inside the epoch stream; enough to resume exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DataCursor {
    pub epoch: u64,
    pub position: usize,
}

/// Endless stream of index batches. Each epoch is a fresh permutation derived
/// from `(seed, epoch)`; the final partial batch of an epoch is dropped.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch: usize,
    shuffle: bool,
    seed: u64,
    cursor: DataCursor,
    order: Vec<usize>,
}

impl BatchIterator {
    pub fn new(len: usize, batch: usize, shuffle: bool, seed: u64) -> Result<Self> {
        Self::resume(len, batch, shuffle, seed, DataCursor::default())
    }

    pub fn resume(len: usize, batch: usize, shuffle: bool, seed: u64, cursor: DataCursor) -> Result<Self> {
        if batch == 0 || batch > len {
            return invalid(format!("batch size {batch} must be in 1..={len}"));
        }
        let mut it = Self {
            len,
            batch,
            shuffle,
            seed,
            cursor,
            order: Vec::new(),
        };
        it.order = it.epoch_order(cursor.epoch);
        Ok(it)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            order.shuffle(&mut substream(self.seed, epoch));
        }
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch
    }

    pub fn cursor(&self) -> DataCursor {
        self.cursor
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor.position + self.batch > self.len {
            self.cursor = DataCursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            };
            self.order = self.epoch_order(self.cursor.epoch);
        }
        let start = self.cursor.position;
        self.cursor.position += self.batch;
        self.order[start..start + self.batch].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn tiny() -> FactorDataset {
        // 2 x 3 factorial, 1-channel 2x2 images.
        let mut pixels = Vec::new();
        let mut classes = Vec::new();
        for a in 0..2u32 {
            for b in 0..3u32 {
                pixels.extend([a as u8, b as u8, 0, 2]);
                classes.extend([a, b]);
            }
        }
        FactorDataset::new("tiny", pixels, 2, (6, 1, 2), classes, vec![2, 3], vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn construction_checks_invariants() {
        let ds = tiny();
        assert!(ds.is_full_factorial());
        assert_eq!(ds.stratum(1, 2), &[2, 5]);
        assert_eq!(ds.image(4), vec![0.5, 0.5, 0.0, 1.0]);
        let err = FactorDataset::new("x", vec![0, 3, 0, 0], 2, (1, 1, 2), vec![0], vec![1], vec!["a".into()]);
        assert!(err.unwrap_err().to_string().contains("offset 1"));
        let err = FactorDataset::new("x", vec![0; 4], 1, (1, 1, 2), vec![3], vec![2], vec!["a".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn channel_replication() {
        let ds = tiny().with_channels(3).unwrap();
        let t = ds.batch_tensor(&[1, 2], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 2]);
        let v = t.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[0..4], &v[4..8]);
        assert!(ds.batch_tensor(&[6], DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn fixed_factor_batch_small_stratum_uses_replacement() {
        let ds = tiny();
        let b = fixed_factor_batch(&ds, 1, 5, &mut seeded(0)).unwrap();
        assert_eq!(b.indices.len(), 5);
        assert!(b.with_replacement);
        assert!(b.indices.iter().all(|&i| ds.factor_classes(i)[1] as usize == b.class));
        assert!(fixed_factor_batch(&ds, 1, 1, &mut seeded(0)).is_err());
        assert!(fixed_factor_batch(&ds, 2, 2, &mut seeded(0)).is_err());
    }

    #[test]
    fn fixed_factor_batch_uniform_within_stratum() {
        let ds = synth_factors(&SynthSpec::default()).unwrap();
        // Fix posx; the posy class of drawn images should be uniform over 8 classes.
        let mut counts = [0usize; 8];
        let mut rng = seeded(42);
        for _ in 0..400 {
            let b = fixed_factor_batch(&ds, 0, 10, &mut rng).unwrap();
            assert!(!b.with_replacement);
            for i in b.indices {
                counts[ds.factor_classes(i)[1] as usize] += 1;
            }
        }
        let expected = 4000.0 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom; 0.999 quantile is 24.3.
        assert!(chi2 < 24.3, "chi2 {chi2} counts {counts:?}");
    }

    #[test]
    fn batch_iterator_examples() {
        let mut it = BatchIterator::new(1024, 64, true, 3).unwrap();
        assert_eq!(it.batches_per_epoch(), 16);
        let epoch0: Vec<Vec<usize>> = (0..16).map(|_| it.next_batch()).collect();
        let first_of_1 = it.next_batch();
        assert_eq!(it.cursor(), DataCursor { epoch: 1, position: 64 });
        let mut again = BatchIterator::new(1024, 64, true, 3).unwrap();
        let replay: Vec<Vec<usize>> = (0..16).map(|_| again.next_batch()).collect();
        assert_eq!(epoch0, replay);
        assert_eq!(again.next_batch(), first_of_1);

        let mut plain = BatchIterator::new(10, 4, false, 0).unwrap();
        assert_eq!(plain.next_batch(), vec![0, 1, 2, 3]);
        assert_eq!(plain.next_batch(), vec![4, 5, 6, 7]);
        assert_eq!(plain.next_batch(), vec![0, 1, 2, 3]);
        assert!(BatchIterator::new(10, 11, true, 0).is_err());
    }

    #[test]
    fn resume_continues_the_stream() {
        let mut a = BatchIterator::new(50, 8, true, 9).unwrap();
        for _ in 0..9 {
            a.next_batch();
        }
        let mut b = BatchIterator::resume(50, 8, true, 9, a.cursor()).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    proptest! {
        #[test]
        fn fixed_factor_is_constant(seed in 0u64..1000, f in 0usize..2, l in 2usize..8) {
            let ds = tiny();
            let b = fixed_factor_batch(&ds, f, l, &mut seeded(seed)).unwrap();
            prop_assert_eq!(b.indices.len(), l);
            for i in b.indices {
                prop_assert_eq!(ds.factor_classes(i)[f] as usize, b.class);
            }
        }

        #[test]
        fn served_pixels_in_unit_range(i in 0usize..6) {
            let ds = tiny();
            prop_assert!(ds.image(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
