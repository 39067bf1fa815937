use candle_core::DType;

use crate::critic::Critic;
use crate::data::FactorDataset;
use crate::error::{invalid, Error, Result};
use crate::nn::Mode;
use crate::rng::{normal_vec, SeededRng};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

pub fn log_normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let u = (x - mu) / sigma;
    -0.5 * u * u - sigma.ln() - HALF_LOG_2PI
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One draw per posterior: `z = mu + sigma * eps`.
pub fn sample_posterior(mu: &[Vec<f64>], sigma: &[Vec<f64>], rng: &mut SeededRng) -> Vec<Vec<f64>> {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let eps = normal_vec(rng, m.len());
            m.iter().zip(s).zip(eps).map(|((m, s), e)| m + s * e).collect()
        })
        .collect()
}

fn check(mu: &[Vec<f64>], sigma: &[Vec<f64>], z: &[Vec<f64>]) -> Result<usize> {
    let b = mu.len();
    if b < 2 {
        return invalid(format!("TC estimate needs a batch of >= 2, got {b}"));
    }
    let d = mu[0].len();
    if d == 0 || sigma.len() != b || z.len() != b {
        return invalid("mu, sigma and z must all hold B rows");
    }
    for rows in [mu, sigma, z] {
        if rows.iter().any(|r| r.len() != d) {
            return invalid("ragged code rows");
        }
    }
    if sigma.iter().flatten().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidState("posterior sigma must be positive".into()));
    }
    Ok(d)
}

/// Total correlation `E[log q(z) - sum_j log q(z_j)]` from one minibatch.
///
/// The aggregate posterior `q(z) = 1/N sum_n q(z | x_n)` is approximated with
/// stratified weights: the sample's own posterior gets `1/N` and each of the
/// other `B - 1` posteriors stands in for `(N - 1) / (B - 1)` dataset points.
/// The same weights are used per dimension.
pub fn tc_estimate(mu: &[Vec<f64>], sigma: &[Vec<f64>], z: &[Vec<f64>], dataset_size: usize) -> Result<f64> {
    let d = check(mu, sigma, z)?;
    let b = mu.len();
    if dataset_size < b {
        return invalid(format!("dataset size {dataset_size} smaller than batch {b}"));
    }
    let n = dataset_size as f64;
    let log_self = -n.ln();
    let log_other = ((n - 1.0) / (n * (b as f64 - 1.0))).ln();
    let mut total = 0.0;
    let mut joint = vec![0.0; b];
    let mut marg = vec![vec![0.0; b]; d];
    for i in 0..b {
        for k in 0..b {
            let w = if i == k { log_self } else { log_other };
            let mut s = 0.0;
            for j in 0..d {
                let l = log_normal_density(z[i][j], mu[k][j], sigma[k][j]);
                marg[j][k] = w + l;
                s += l;
            }
            joint[k] = w + s;
        }
        let log_qz = logsumexp(&joint);
        let log_prod: f64 = marg.iter().map(|m| logsumexp(m)).sum();
        total += log_qz - log_prod;
    }
    Ok(total / b as f64)
}

/// The same quantity with `q(z)` evaluated exactly over all `N` posteriors.
pub fn tc_brute_force(mu: &[Vec<f64>], sigma: &[Vec<f64>], z: &[Vec<f64>]) -> Result<f64> {
    let d = check(mu, sigma, z)?;
    let n = mu.len();
    let log_w = -(n as f64).ln();
    let mut total = 0.0;
    for zi in z {
        let joint: Vec<f64> = (0..n)
            .map(|k| log_w + (0..d).map(|j| log_normal_density(zi[j], mu[k][j], sigma[k][j])).sum::<f64>())
            .collect();
        let mut log_prod = 0.0;
        for j in 0..d {
            let m: Vec<f64> = (0..n).map(|k| log_w + log_normal_density(zi[j], mu[k][j], sigma[k][j])).collect();
            log_prod += logsumexp(&m);
        }
        total += logsumexp(&joint) - log_prod;
    }
    Ok(total / z.len() as f64)
}

/// TC of a probabilistic critic's posteriors on one random minibatch of real images.
pub fn tc_from_critic(critic: &Critic, dataset: &FactorDataset, batch: usize, rng: &mut SeededRng) -> Result<f64> {
    let idx = rand::seq::index::sample(rng, dataset.len(), batch.min(dataset.len())).into_vec();
    let x = dataset.batch_tensor(&idx, critic.dtype(), critic.device())?;
    let pred = critic.extract_code(&x, Mode::Eval)?;
    let sigma = pred
        .sigma()?
        .ok_or_else(|| Error::InvalidState("TC needs a probabilistic Q (q_mode = probabilistic)".into()))?;
    let mu = pred.code()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let sigma = sigma.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let z = sample_posterior(&mu, &sigma, rng);
    tc_estimate(&mu, &sigma, &z, dataset.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_posteriors(b: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = seeded(seed);
        let mu: Vec<Vec<f64>> = (0..b).map(|_| normal_vec(&mut rng, d)).collect();
        let sigma: Vec<Vec<f64>> = (0..b)
            .map(|_| normal_vec(&mut rng, d).iter().map(|e| 0.3 + 0.2 * e.abs()).collect())
            .collect();
        (mu, sigma)
    }

    #[test]
    fn single_dimension_is_exactly_zero() {
        let (mu, sigma) = random_posteriors(16, 1, 0);
        let z = sample_posterior(&mu, &sigma, &mut seeded(1));
        assert_eq!(tc_estimate(&mu, &sigma, &z, 1000).unwrap(), 0.0);
    }

    #[test]
    fn matches_brute_force_when_batch_is_dataset() {
        let (mu, sigma) = random_posteriors(32, 3, 2);
        let z = sample_posterior(&mu, &sigma, &mut seeded(3));
        let a = tc_estimate(&mu, &sigma, &z, 32).unwrap();
        let b = tc_brute_force(&mu, &sigma, &z).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn identical_factorized_posteriors_give_zero() {
        let mu = vec![vec![0.0, 0.0]; 8];
        let sigma = vec![vec![1.0, 1.0]; 8];
        let z = sample_posterior(&mu, &sigma, &mut seeded(4));
        assert!(tc_estimate(&mu, &sigma, &z, 10_000).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        let (mu, sigma) = random_posteriors(1, 2, 0);
        assert!(tc_estimate(&mu, &sigma, &mu, 10).is_err());
        let (mu, mut sigma) = random_posteriors(4, 2, 0);
        assert!(tc_estimate(&mu, &sigma, &mu, 2).is_err());
        sigma[0][0] = 0.0;
        assert!(matches!(tc_estimate(&mu, &sigma, &mu, 10), Err(Error::InvalidState(_))));
    }
}
