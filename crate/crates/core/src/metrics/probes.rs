use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::critic::Critic;
use crate::error::{invalid, Result};
use crate::generator::Generator;
use crate::latent::{noise_tensor, CodeBatch, CodeKind};
use crate::nn::Mode;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub l1_uniform: f64,
    pub l1_onehot: f64,
}

/// Mean `|Q(G(c, z)) - c|` for fresh uniform and fresh one-hot codes.
/// Uses `mu` when Q is probabilistic. No parameters change.
pub fn onehot_l1_probe(generator: &Generator, critic: &Critic, n: usize, rng: &mut SeededRng) -> Result<ProbeResult> {
    if n == 0 {
        return invalid("probe needs n >= 1");
    }
    let d = generator.config().d;
    let n_z = generator.config().n_z;
    let mut sums = [0.0; 2];
    for (slot, kind) in [CodeKind::Continuous, CodeKind::OneHot].into_iter().enumerate() {
        let mut done = 0;
        while done < n {
            let m = 64.min(n - done);
            let codes = CodeBatch::sample(kind, d, m, rng)?;
            let c = codes.to_tensor(generator.dtype(), generator.device())?;
            let z = noise_tensor(m, n_z, rng, generator.dtype(), generator.device())?;
            let x = generator.forward(&c, &z, Mode::Eval)?;
            let pred = critic.extract_code(&x, Mode::Eval)?.code()?;
            let l1 = (pred - &c)?.abs()?.mean(1)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            sums[slot] += l1;
            done += m;
        }
    }
    Ok(ProbeResult {
        l1_uniform: sums[0] / n as f64,
        l1_onehot: sums[1] / n as f64,
    })
}

/// `|cos|` of every unordered pair of rows, per layer; zero rows give 0.
pub fn pairwise_abs_cosines(layers: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    layers
        .iter()
        .map(|rows| {
            let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let mut out = Vec::new();
            for a in 0..rows.len() {
                for b in a + 1..rows.len() {
                    if norms[a] == 0.0 || norms[b] == 0.0 {
                        out.push(0.0);
                        continue;
                    }
                    let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
                    out.push((dot / (norms[a] * norms[b])).abs());
                }
            }
            out
        })
        .collect()
}

/// Mean pairwise `|cos|` over all pairs of all grouped Q layers.
pub fn q_cosine_report(critic: &Critic) -> Result<f64> {
    let pairs: Vec<f64> = pairwise_abs_cosines(&critic.q_grouped_kernel_vectors()?).concat();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}
