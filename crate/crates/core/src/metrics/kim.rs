use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::critic::Critic;
use crate::data::{fixed_factor_batch, FactorDataset};
use crate::error::{invalid, Error, Result};
use crate::nn::Mode;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KimOptions {
    pub fit_votes: usize,
    pub eval_votes: usize,
    pub batch_per_vote: usize,
    /// Encodings used to estimate per-dimension scale; the full dataset if smaller.
    pub std_samples: usize,
    /// Dimensions with std below this fraction of the largest are ignored.
    pub collapse_ratio: f64,
}

impl Default for KimOptions {
    fn default() -> Self {
        Self {
            fit_votes: 800,
            eval_votes: 800,
            batch_per_vote: 100,
            std_samples: 10_000,
            collapse_ratio: 0.05,
        }
    }
}

/// Encodes a list of dataset indices into one code vector per image.
pub type Encoder<'a> = dyn FnMut(&[usize]) -> Result<Vec<Vec<f64>>> + 'a;

/// Wraps a critic's Q head (evaluation mode) as an encoder over `dataset`.
pub fn critic_encoder<'a>(critic: &'a Critic, dataset: &'a FactorDataset) -> impl FnMut(&[usize]) -> Result<Vec<Vec<f64>>> + 'a {
    move |idx: &[usize]| {
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(256) {
            let x = dataset.batch_tensor(chunk, critic.dtype(), critic.device())?;
            let code = critic.extract_code(&x, Mode::Eval)?.code()?;
            out.extend(code.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

fn column_std(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Majority-vote disentanglement accuracy: with one factor held fixed, the
/// normalized code dimension of least variance votes for that factor.
pub fn kim_score(
    encoder: &mut Encoder<'_>,
    dataset: &FactorDataset,
    options: KimOptions,
    rng: &mut SeededRng,
) -> Result<MetricReport> {
    let f = dataset.num_factors();
    if f < 2 || dataset.factor_sizes().iter().any(|&s| s < 2) {
        return invalid("Kim score needs >= 2 factors with >= 2 classes each");
    }
    if options.fit_votes == 0 || options.eval_votes == 0 || options.batch_per_vote < 2 {
        return invalid("Kim score needs votes >= 1 and batch_per_vote >= 2");
    }

    let scale_idx: Vec<usize> = if dataset.len() <= options.std_samples {
        (0..dataset.len()).collect()
    } else {
        rand::seq::index::sample(rng, dataset.len(), options.std_samples).into_vec()
    };
    let codes = encoder(&scale_idx)?;
    if codes.is_empty() || codes[0].is_empty() {
        return Err(Error::DegenerateEncoder("encoder returned no dimensions".into()));
    }
    let d = codes[0].len();
    let std = column_std(&codes);
    let max_std = std.iter().cloned().fold(0.0, f64::max);
    if !(max_std > 0.0) {
        return Err(Error::DegenerateEncoder("every code dimension is constant".into()));
    }
    let active: Vec<usize> = (0..d).filter(|&j| std[j] >= options.collapse_ratio * max_std).collect();

    let total = options.fit_votes + options.eval_votes;
    let mut votes = Vec::with_capacity(total);
    for _ in 0..total {
        let factor = rng.random_range(0..f);
        let batch = fixed_factor_batch(dataset, factor, options.batch_per_vote, rng)?;
        let z = encoder(&batch.indices)?;
        let n = z.len() as f64;
        let mut best = (f64::INFINITY, active[0]);
        for &j in &active {
            let mean = z.iter().map(|r| r[j] / std[j]).sum::<f64>() / n;
            let var = z.iter().map(|r| (r[j] / std[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if var < best.0 {
                best = (var, j);
            }
        }
        votes.push((best.1, factor));
    }

    let mut table = vec![vec![0usize; f]; d];
    for &(dim, factor) in &votes[..options.fit_votes] {
        table[dim][factor] += 1;
    }
    let assign: Vec<Option<usize>> = table
        .iter()
        .map(|row| {
            let (k, &c) = row.iter().enumerate().max_by_key(|(k, c)| (**c, std::cmp::Reverse(*k)))?;
            (c > 0).then_some(k)
        })
        .collect();
    let correct = votes[options.fit_votes..]
        .iter()
        .filter(|(dim, factor)| assign[*dim] == Some(*factor))
        .count();
    let acc = correct as f64 / options.eval_votes as f64;
    let dispersion = (acc * (1.0 - acc) / options.eval_votes as f64).sqrt();
    MetricReport::new(
        "kim",
        acc,
        dispersion,
        options.eval_votes,
        serde_json::json!({
            "options": options,
            "active_dims": active,
            "dataset": dataset.name(),
        }),
    )
}
