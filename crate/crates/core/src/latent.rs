//! Control-vector and noise sampling, and the continuous / one-hot alternation.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{normal_vec, uniform_vec, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Continuous,
    OneHot,
}

impl CodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CodeKind::Continuous => "continuous",
            CodeKind::OneHot => "one_hot",
        }
    }
}

/// A control vector `c` with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    values: Vec<f64>,
    kind: CodeKind,
    hot_index: Option<usize>,
}

impl LatentCode {
    pub fn continuous(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("latent code must have at least one dimension");
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("latent code entry {v} outside [0, 1]"));
        }
        Ok(Self {
            values,
            kind: CodeKind::Continuous,
            hot_index: None,
        })
    }

    pub fn one_hot(d: usize, index: usize) -> Result<Self> {
        if d == 0 {
            return invalid("latent dimension must be >= 1");
        }
        if index >= d {
            return invalid(format!("hot index {index} out of range for d={d}"));
        }
        let mut values = vec![0.0; d];
        values[index] = 1.0;
        Ok(Self {
            values,
            kind: CodeKind::OneHot,
            hot_index: Some(index),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn hot_index(&self) -> Option<usize> {
        self.hot_index
    }

    /// Copy with entry `dim` replaced; the result is always continuous.
    pub fn with_entry(&self, dim: usize, value: f64) -> Result<Self> {
        if dim >= self.values.len() {
            return invalid(format!("dimension {dim} out of range for d={}", self.values.len()));
        }
        let mut values = self.values.clone();
        values[dim] = value;
        Self::continuous(values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("noise dimension must be >= 1");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("noise entries must be finite");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn sample_uniform_code(d: usize, rng: &mut SeededRng) -> Result<LatentCode> {
    if d == 0 {
        return invalid("latent dimension must be >= 1");
    }
    LatentCode::continuous(uniform_vec(rng, d))
}

pub fn sample_onehot_code(d: usize, rng: &mut SeededRng) -> Result<LatentCode> {
    if d == 0 {
        return invalid("latent dimension must be >= 1");
    }
    let index = rng.random_range(0..d);
    LatentCode::one_hot(d, index)
}

pub fn sample_noise(n_z: usize, rng: &mut SeededRng) -> Result<NoiseVector> {
    if n_z == 0 {
        return invalid("noise dimension must be >= 1");
    }
    NoiseVector::new(normal_vec(rng, n_z))
}

pub fn sample_code(kind: CodeKind, d: usize, rng: &mut SeededRng) -> Result<LatentCode> {
    match kind {
        CodeKind::Continuous => sample_uniform_code(d, rng),
        CodeKind::OneHot => sample_onehot_code(d, rng),
    }
}

/// When an iteration draws one-hot codes instead of uniform ones.
///
/// `period = None` never samples one-hot (the no-one-hot ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    period: Option<u64>,
    onehot_phase: u64,
}

impl Default for SamplingSchedule {
    /// Odd iterations one-hot, even iterations uniform.
    fn default() -> Self {
        Self {
            period: Some(2),
            onehot_phase: 1,
        }
    }
}

impl SamplingSchedule {
    pub fn new(period: u64, onehot_phase: u64) -> Result<Self> {
        if period == 0 {
            return invalid("schedule period must be positive");
        }
        if onehot_phase >= period {
            return invalid(format!(
                "onehot_phase {onehot_phase} must be < period {period}"
            ));
        }
        Ok(Self {
            period: Some(period),
            onehot_phase,
        })
    }

    pub fn continuous_only() -> Self {
        Self {
            period: None,
            onehot_phase: 0,
        }
    }

    pub fn period(&self) -> Option<u64> {
        self.period
    }

    pub fn onehot_phase(&self) -> u64 {
        self.onehot_phase
    }

    /// Kind for 1-based `iteration`.
    pub fn kind_at(&self, iteration: u64) -> CodeKind {
        match self.period {
            Some(p) if iteration % p == self.onehot_phase => CodeKind::OneHot,
            _ => CodeKind::Continuous,
        }
    }
}

pub fn schedule_kind(schedule: &SamplingSchedule, iteration: u64) -> Result<CodeKind> {
    if iteration == 0 {
        return invalid("iterations are 1-based");
    }
    Ok(schedule.kind_at(iteration))
}

/// A minibatch of codes that all share one kind.
#[derive(Debug, Clone)]
pub struct CodeBatch {
    kind: CodeKind,
    codes: Vec<LatentCode>,
}

impl CodeBatch {
    pub fn sample(kind: CodeKind, d: usize, batch: usize, rng: &mut SeededRng) -> Result<Self> {
        if batch == 0 {
            return invalid("batch size must be >= 1");
        }
        let codes = (0..batch)
            .map(|_| sample_code(kind, d, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kind, codes })
    }

    pub fn from_codes(codes: Vec<LatentCode>) -> Result<Self> {
        let Some(first) = codes.first() else {
            return invalid("empty code batch");
        };
        let (kind, d) = (first.kind(), first.dim());
        if codes.iter().any(|c| c.kind() != kind || c.dim() != d) {
            return invalid("codes in a batch must share kind and dimension");
        }
        Ok(Self { kind, codes })
    }

    pub fn kind(&self) -> CodeKind {
        self.kind
    }

    pub fn codes(&self) -> &[LatentCode] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes[0].dim()
    }

    pub fn hot_indices(&self) -> Option<Vec<usize>> {
        self.codes.iter().map(|c| c.hot_index()).collect()
    }

    /// `(B, d)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f64> = self.codes.iter().flat_map(|c| c.values().iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (self.len(), self.dim()), device)?.to_dtype(dtype)?)
    }
}

/// `(B, n_z)` standard-normal tensor.
pub fn noise_tensor(
    batch: usize,
    n_z: usize,
    rng: &mut SeededRng,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if batch == 0 || n_z == 0 {
        return invalid("noise batch and dimension must be >= 1");
    }
    let flat = normal_vec(rng, batch * n_z);
    Ok(Tensor::from_vec(flat, (batch, n_z), device)?.to_dtype(dtype)?)
}

pub fn noise_batch_tensor(noise: &[NoiseVector], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = noise.first() else {
        return invalid("empty noise batch");
    };
    let n_z = first.dim();
    if noise.iter().any(|z| z.dim() != n_z) {
        return invalid("noise vectors in a batch must share dimension");
    }
    let flat: Vec<f64> = noise.iter().flat_map(|z| z.values().iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (noise.len(), n_z), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn uniform_code_in_range_and_deterministic() {
        let a = sample_uniform_code(3, &mut seeded(9)).unwrap();
        let b = sample_uniform_code(3, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kind(), CodeKind::Continuous);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let mut rng = seeded(0);
        assert!(sample_uniform_code(0, &mut rng).is_err());
        assert!(sample_onehot_code(0, &mut rng).is_err());
        assert!(sample_noise(0, &mut rng).is_err());
    }

    #[test]
    fn uniform_code_mean_is_one_half() {
        let mut rng = seeded(1);
        let d = 10;
        let n = 100_000;
        let mut sums = vec![0.0; d];
        for _ in 0..n {
            let c = sample_uniform_code(d, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(c.values()) {
                *s += v;
            }
        }
        for s in sums {
            let mean = s / n as f64;
            assert!((0.49..=0.51).contains(&mean), "mean {mean}");
        }
    }

    #[test]
    fn one_hot_definition() {
        let c = LatentCode::one_hot(4, 2).unwrap();
        assert_eq!(c.values(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(c.hot_index(), Some(2));
        assert!(LatentCode::one_hot(4, 4).is_err());
    }

    #[test]
    fn one_hot_index_frequencies_are_uniform() {
        let mut rng = seeded(2);
        let d = 8;
        let n = 100_000;
        let mut counts = vec![0usize; d];
        for _ in 0..n {
            let c = sample_onehot_code(d, &mut rng).unwrap();
            assert_eq!(c.values().iter().sum::<f64>(), 1.0);
            counts[c.hot_index().unwrap()] += 1;
        }
        let p = 1.0 / d as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {k}");
        }
    }

    #[test]
    fn noise_variance_is_one() {
        let mut rng = seeded(3);
        let n_z = 100;
        let n = 100_000;
        let mut sum = vec![0.0; n_z];
        let mut sq = vec![0.0; n_z];
        for _ in 0..n {
            let z = sample_noise(n_z, &mut rng).unwrap();
            for (k, v) in z.values().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..n_z {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!((0.97..=1.03).contains(&var), "var {var}");
        }
    }

    #[test]
    fn noise_is_deterministic_and_finite() {
        let a = sample_noise(5, &mut seeded(4)).unwrap();
        let b = sample_noise(5, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        let s = sample_noise(1, &mut seeded(5)).unwrap();
        assert!(s.values()[0].is_finite());
    }

    #[test]
    fn default_schedule_alternates_odd_even() {
        let s = SamplingSchedule::default();
        assert_eq!(schedule_kind(&s, 1).unwrap(), CodeKind::OneHot);
        assert_eq!(schedule_kind(&s, 2).unwrap(), CodeKind::Continuous);
        let s = SamplingSchedule::new(4, 0).unwrap();
        assert_eq!(schedule_kind(&s, 8).unwrap(), CodeKind::OneHot);
        assert!(schedule_kind(&s, 0).is_err());
        assert!(SamplingSchedule::new(2, 2).is_err());
        assert!(SamplingSchedule::new(0, 0).is_err());
    }

    #[test]
    fn continuous_only_never_samples_one_hot() {
        let s = SamplingSchedule::continuous_only();
        assert!((1..1000).all(|i| s.kind_at(i) == CodeKind::Continuous));
    }

    #[test]
    fn batches_share_kind() {
        let mut rng = seeded(6);
        let b = CodeBatch::sample(CodeKind::OneHot, 5, 16, &mut rng).unwrap();
        assert!(b.codes().iter().all(|c| c.kind() == CodeKind::OneHot));
        let mixed = vec![
            LatentCode::one_hot(3, 0).unwrap(),
            LatentCode::continuous(vec![0.1, 0.2, 0.3]).unwrap(),
        ];
        assert!(CodeBatch::from_codes(mixed).is_err());
    }

    proptest! {
        #[test]
        fn window_has_one_onehot_per_period(period in 1u64..20, phase_seed in 0u64..1000, k in 1u64..10, start in 1u64..500) {
            let phase = phase_seed % period;
            let s = SamplingSchedule::new(period, phase).unwrap();
            let count = (start..start + k * period).filter(|&i| s.kind_at(i) == CodeKind::OneHot).count() as u64;
            prop_assert_eq!(count, k);
        }

        #[test]
        fn one_hot_codes_are_probability_vectors(d in 1usize..32, seed in 0u64..1000) {
            let c = sample_onehot_code(d, &mut seeded(seed)).unwrap();
            prop_assert!(c.values().iter().all(|v| *v == 0.0 || *v == 1.0));
            prop_assert_eq!(c.values().iter().sum::<f64>(), 1.0);
            prop_assert_eq!(c.values()[c.hot_index().unwrap()], 1.0);
        }
    }
}
