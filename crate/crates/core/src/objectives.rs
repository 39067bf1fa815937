//! Adversarial, code-reconstruction and orthogonality losses.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::critic::{QMode, QPrediction};
use crate::error::{invalid, Error, Result};
use crate::latent::{CodeBatch, CodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub ortho_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 1.0,
            ortho_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("ortho_weight", self.ortho_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

fn nonempty(scores: &Tensor, what: &str) -> Result<()> {
    if scores.elem_count() == 0 {
        return invalid(format!("{what} score batch is empty"));
    }
    Ok(())
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    nonempty(real_scores, "real")?;
    nonempty(fake_scores, "fake")?;
    let real = real_scores.flatten_all()?.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.flatten_all()?.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `-mean(fake)`.
pub fn g_adv_loss(fake_scores: &Tensor) -> Result<Tensor> {
    nonempty(fake_scores, "fake")?;
    Ok(fake_scores.flatten_all()?.mean_all()?.neg()?)
}

fn check_target(pred: &QPrediction, c: &Tensor) -> Result<()> {
    if pred.logits().dims() != c.dims() {
        return invalid(format!(
            "prediction shape {:?} does not match code shape {:?}",
            pred.logits().dims(),
            c.dims()
        ));
    }
    Ok(())
}

/// Mean absolute error between `c_hat` and `c`.
pub fn mi_loss_det(pred: &QPrediction, c: &Tensor) -> Result<Tensor> {
    if pred.mode() != QMode::Deterministic {
        return Err(Error::InvalidState("mi_loss_det needs a deterministic prediction".into()));
    }
    check_target(pred, c)?;
    Ok((pred.code()? - c)?.abs()?.mean_all()?)
}

/// Elementwise-mean Gaussian negative log-likelihood of `c` under `N(mu, sigma^2)`.
pub fn gaussian_nll(mu: &Tensor, sigma: &Tensor, c: &Tensor) -> Result<Tensor> {
    let min = sigma.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_vec0::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::InvalidState(format!("sigma must be positive, got {min}")));
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let sq = (c - mu)?.sqr()?;
    let quad = (sq / sigma.sqr()?.affine(2.0, 0.0)?)?;
    Ok((sigma.log()? + quad)?.mean_all()?.affine(1.0, half_log_2pi)?)
}

/// Gaussian NLL with `mu = sigmoid(mu_logits)` and the clamped `sigma`.
pub fn mi_loss_prob(pred: &QPrediction, c: &Tensor) -> Result<Tensor> {
    let sigma = pred
        .sigma()?
        .ok_or_else(|| Error::InvalidState("mi_loss_prob needs a probabilistic prediction".into()))?;
    check_target(pred, c)?;
    gaussian_nll(&pred.code()?, &sigma, c)
}

/// L1 in deterministic mode, NLL in probabilistic mode.
pub fn mi_loss(pred: &QPrediction, c: &Tensor) -> Result<Tensor> {
    match pred.mode() {
        QMode::Deterministic => mi_loss_det(pred, c),
        QMode::Probabilistic => mi_loss_prob(pred, c),
    }
}

/// Row-wise `log_softmax`.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax cross-entropy of the pre-sigmoid logits against the hot index.
pub fn onehot_ce_loss(pred: &QPrediction, codes: &CodeBatch) -> Result<Tensor> {
    let hot = match codes.hot_indices() {
        Some(h) if codes.kind() == CodeKind::OneHot => h,
        _ => return invalid("cross-entropy needs one-hot codes"),
    };
    let logits = pred.logits();
    let (b, d) = logits.dims2()?;
    if b != codes.len() || d != codes.dim() {
        return invalid(format!(
            "logits {:?} do not match {} codes of dim {}",
            logits.dims(),
            codes.len(),
            codes.dim()
        ));
    }
    let mut target = vec![0.0f64; b * d];
    for (row, &j) in hot.iter().enumerate() {
        target[row * d + j] = 1.0;
    }
    let target = Tensor::from_vec(target, (b, d), logits.device())?.to_dtype(logits.dtype())?;
    let picked = (log_softmax(logits)? * target)?.sum(1)?;
    Ok(picked.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CosineSign {
    #[default]
    Absolute,
    Signed,
}

fn pair_mask(n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (n, n), device)?.to_dtype(dtype)?)
}

/// Pairwise cosine matrix of the rows of `k`; zero rows give zero cosines.
pub fn cosine_matrix(k: &Tensor) -> Result<Tensor> {
    let n2 = k.sqr()?.sum_keepdim(1)?;
    let nonzero = n2.gt(0.0)?.to_dtype(k.dtype())?;
    // 1/||k|| on nonzero rows; the (1 - nonzero) term keeps sqrt away from 0.
    let inv = (&nonzero / (&n2 + (1.0 - &nonzero)?)?.sqrt()?)?;
    let unit = k.broadcast_mul(&inv)?;
    Ok(unit.matmul(&unit.t()?)?)
}

/// Sum over layers of the mean within-layer pairwise `|cos|` (or signed cosine).
pub fn orthogonal_reg(kernels: &[Tensor], sign: CosineSign) -> Result<Tensor> {
    if kernels.is_empty() {
        return invalid("orthogonal_reg needs at least one layer");
    }
    let mut total: Option<Tensor> = None;
    for k in kernels {
        let (n, _) = k.dims2()?;
        if n < 2 {
            return invalid(format!("layer has {n} kernels; need at least 2"));
        }
        let cos = cosine_matrix(k)?;
        let cos = match sign {
            CosineSign::Absolute => cos.abs()?,
            CosineSign::Signed => cos,
        };
        let pairs = (n * (n - 1) / 2) as f64;
        let mean = (cos * pair_mask(n, k.dtype(), k.device())?)?.sum_all()?.affine(1.0 / pairs, 0.0)?;
        total = Some(match total {
            None => mean,
            Some(t) => (t + mean)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// The MI-step loss before the orthogonality term:
/// `lambda * mi_loss` plus `gamma * onehot_ce_loss` on one-hot batches.
pub fn total_mi_objective(pred: &QPrediction, codes: &CodeBatch, weights: &LossWeights) -> Result<MiTerms> {
    weights.validate()?;
    let c = codes.to_tensor(pred.logits().dtype(), pred.logits().device())?;
    let mi = mi_loss(pred, &c)?;
    let mut total = mi.affine(weights.lambda, 0.0)?;
    let ce = match codes.kind() {
        CodeKind::OneHot => {
            let ce = onehot_ce_loss(pred, codes)?;
            total = (total + ce.affine(weights.gamma, 0.0)?)?;
            Some(ce)
        }
        CodeKind::Continuous => None,
    };
    Ok(MiTerms { total, mi, ce })
}

/// Components of [`total_mi_objective`]; `ce` is `None` on continuous batches.
#[derive(Debug, Clone)]
pub struct MiTerms {
    pub total: Tensor,
    pub mi: Tensor,
    pub ce: Option<Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::compare;
    use crate::latent::LatentCode;
    use crate::nn::scalar;
    use crate::rng::{normal_vec, seeded, uniform_vec};
    use candle_core::Device;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn t2(v: Vec<f64>, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn det(c_hat: Vec<f64>, r: usize, c: usize) -> QPrediction {
        let l = c_hat.into_iter().map(logit).collect();
        QPrediction::Deterministic { logits: t2(l, r, c) }
    }

    #[test]
    fn hinge_examples() {
        let cases = [(1.0, -1.0, 0.0), (0.0, 0.0, 2.0), (-1.0, 1.0, 4.0)];
        for (r, f, want) in cases {
            let got = scalar(&hinge_d_loss(&t(&[r]), &t(&[f])).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
        assert!(hinge_d_loss(&t(&[]), &t(&[0.0])).is_err());
    }

    #[test]
    fn g_adv_examples() {
        for (v, want) in [(vec![2.0, 0.0], -1.0), (vec![0.0], 0.0), (vec![-3.0], 3.0)] {
            let got = scalar(&g_adv_loss(&t(&v)).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
        assert!(g_adv_loss(&t(&[])).is_err());
    }

    #[test]
    fn l1_examples() {
        let c = t2(vec![0.3, 0.7], 1, 2);
        let got = scalar(&mi_loss_det(&det(vec![0.3, 0.7], 1, 2), &c).unwrap()).unwrap();
        assert!(got.abs() < 1e-12);
        // Saturated logits stand in for exact 0 and 1.
        let p = QPrediction::Deterministic { logits: t2(vec![40.0, -40.0], 1, 2) };
        let got = scalar(&mi_loss_det(&p, &t2(vec![0.0, 1.0], 1, 2)).unwrap()).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
        let got = scalar(&mi_loss_det(&det(vec![0.5, 0.5], 1, 2), &t2(vec![0.0, 1.0], 1, 2)).unwrap()).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mode_mismatch_is_invalid_state() {
        let p = det(vec![0.5, 0.5], 1, 2);
        assert!(matches!(mi_loss_prob(&p, &t2(vec![0.0, 1.0], 1, 2)), Err(Error::InvalidState(_))));
        let p = QPrediction::Probabilistic {
            mu_logits: t2(vec![0.0, 0.0], 1, 2),
            log_sigma: t2(vec![0.0, 0.0], 1, 2),
        };
        assert!(matches!(mi_loss_det(&p, &t2(vec![0.0, 1.0], 1, 2)), Err(Error::InvalidState(_))));
    }

    #[test]
    fn nll_examples() {
        let h = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let c = t(&[0.2, -0.4, 1.5]);
        let e = std::f64::consts::E;
        let one = t(&[1.0, 1.0, 1.0]);
        let got = scalar(&gaussian_nll(&c, &one, &c).unwrap()).unwrap();
        assert!((got - h).abs() < 1e-12);
        let got = scalar(&gaussian_nll(&c, &t(&[e, e, e]), &c).unwrap()).unwrap();
        assert!((got - (1.0 + h)).abs() < 1e-12);
        let shifted = c.affine(1.0, 1.0).unwrap();
        let got = scalar(&gaussian_nll(&shifted, &one, &c).unwrap()).unwrap();
        assert!((got - (0.5 + h)).abs() < 1e-12);
        assert!(matches!(gaussian_nll(&c, &t(&[1.0, 0.0, 1.0]), &c), Err(Error::InvalidState(_))));
    }

    #[test]
    fn nll_through_prediction() {
        let h = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let p = QPrediction::Probabilistic {
            mu_logits: t2(vec![logit(0.25), logit(0.6)], 1, 2),
            log_sigma: t2(vec![0.0, 0.0], 1, 2),
        };
        let got = scalar(&mi_loss_prob(&p, &t2(vec![0.25, 0.6], 1, 2)).unwrap()).unwrap();
        assert!((got - h).abs() < 1e-12);
    }

    fn onehots(d: usize, idx: &[usize]) -> CodeBatch {
        CodeBatch::from_codes(idx.iter().map(|&i| LatentCode::one_hot(d, i).unwrap()).collect()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let uniform = QPrediction::Deterministic { logits: t2(vec![0.3; 4], 1, 4) };
        let got = scalar(&onehot_ce_loss(&uniform, &onehots(4, &[2])).unwrap()).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-12);

        let peaked = QPrediction::Deterministic { logits: t2(vec![2.0, 0.0, 0.0, 0.0], 1, 4) };
        let got = scalar(&onehot_ce_loss(&peaked, &onehots(4, &[0])).unwrap()).unwrap();
        let e2 = 2f64.exp();
        assert!((got - -(e2 / (e2 + 3.0)).ln()).abs() < 1e-12);
        assert!((got - 0.34076).abs() < 1e-4);

        let sharp = QPrediction::Deterministic { logits: t2(vec![0.0, 60.0, 0.0], 1, 3) };
        let got = scalar(&onehot_ce_loss(&sharp, &onehots(3, &[1])).unwrap()).unwrap();
        assert!(got < 1e-20);
    }

    #[test]
    fn ce_uses_mu_logits_in_prob_mode() {
        let p = QPrediction::Probabilistic {
            mu_logits: t2(vec![2.0, 0.0, 0.0, 0.0], 1, 4),
            log_sigma: t2(vec![5.0; 4], 1, 4),
        };
        let got = scalar(&onehot_ce_loss(&p, &onehots(4, &[0])).unwrap()).unwrap();
        assert!((got - 0.34076).abs() < 1e-4);
    }

    #[test]
    fn ce_rejects_continuous_codes() {
        let p = QPrediction::Deterministic { logits: t2(vec![0.0; 2], 1, 2) };
        let codes = CodeBatch::from_codes(vec![LatentCode::continuous(vec![1.0, 0.0]).unwrap()]).unwrap();
        assert!(matches!(onehot_ce_loss(&p, &codes), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ortho_examples() {
        let same = t2(vec![0.5, -1.0, 0.5, -1.0], 2, 2);
        let got = scalar(&orthogonal_reg(&[same], CosineSign::Absolute).unwrap()).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
        let eye = t2(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        let got = scalar(&orthogonal_reg(&[eye], CosineSign::Absolute).unwrap()).unwrap();
        assert!(got.abs() < 1e-12);
        let k = t2(vec![1.0, 0.0, 1.0, 1.0], 2, 2);
        let got = scalar(&orthogonal_reg(&[k], CosineSign::Absolute).unwrap()).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn ortho_sign_and_degenerate() {
        let anti = t2(vec![1.0, 2.0, -1.0, -2.0], 2, 2);
        let abs = scalar(&orthogonal_reg(&[anti.clone()], CosineSign::Absolute).unwrap()).unwrap();
        let signed = scalar(&orthogonal_reg(&[anti], CosineSign::Signed).unwrap()).unwrap();
        assert!((abs - 1.0).abs() < 1e-12);
        assert!((signed + 1.0).abs() < 1e-12);
        // (1,0),(0,0),(1,0): only the first/third pair counts, mean over 3 pairs.
        let z = t2(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3, 2);
        let got = scalar(&orthogonal_reg(&[z], CosineSign::Absolute).unwrap()).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
        assert!(orthogonal_reg(&[t2(vec![1.0, 0.0], 1, 2)], CosineSign::Absolute).is_err());
    }

    #[test]
    fn total_objective_examples() {
        let c = LatentCode::continuous(vec![0.3, 0.8]).unwrap();
        let codes = CodeBatch::from_codes(vec![c]).unwrap();
        let exact = det(vec![0.3, 0.8], 1, 2);
        let w = LossWeights::default();
        let terms = total_mi_objective(&exact, &codes, &w).unwrap();
        assert!(scalar(&terms.total).unwrap().abs() < 1e-12);
        assert!(terms.ce.is_none());

        let off = det(vec![0.5, 0.5], 1, 2);
        let one = scalar(&total_mi_objective(&off, &codes, &w).unwrap().total).unwrap();
        let w2 = LossWeights { lambda: 2.0, ..w };
        let two = scalar(&total_mi_objective(&off, &codes, &w2).unwrap().total).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-15);

        let oh = onehots(3, &[1, 2]);
        let p = QPrediction::Deterministic { logits: t2(vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3], 2, 3) };
        let w0 = LossWeights { lambda: 0.0, ..w };
        let got = scalar(&total_mi_objective(&p, &oh, &w0).unwrap().total).unwrap();
        let ce = scalar(&onehot_ce_loss(&p, &oh).unwrap()).unwrap();
        assert!((got - ce).abs() < 1e-15);
        assert!(LossWeights { gamma: -1.0, ..w }.validate().is_err());
    }

    const INSTANCES: u64 = 20;

    #[test]
    fn ortho_gradient_matches_finite_differences() {
        for seed in 0..INSTANCES {
            let x = t2(normal_vec(&mut seeded(seed), 4 * 6), 4, 6);
            let c = compare(|k| orthogonal_reg(&[k.clone()], CosineSign::Absolute), &x, 1e-6).unwrap();
            assert!(c.relative_error() < 1e-4, "seed {seed}: {}", c.relative_error());
        }
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        for seed in 0..INSTANCES {
            // Keep scores away from the hinge kinks at +-1.
            let v: Vec<f64> = normal_vec(&mut seeded(seed), 8)
                .iter()
                .map(|x| if (x.abs() - 1.0).abs() < 0.05 { x * 1.2 } else { *x })
                .collect();
            let x = t(&v);
            let c = compare(|s| hinge_d_loss(&s.narrow(0, 0, 4)?, &s.narrow(0, 4, 4)?), &x, 1e-6).unwrap();
            assert!(c.relative_error() < 1e-4);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..INSTANCES {
            let mut rng = seeded(100 + seed);
            let x = t2(normal_vec(&mut rng, 2 * 3 * 2), 2, 6);
            let c = t2(uniform_vec(&mut rng, 6), 2, 3);
            let f = |p: &Tensor| {
                let pred = QPrediction::Probabilistic {
                    mu_logits: p.narrow(1, 0, 3)?,
                    log_sigma: p.narrow(1, 3, 3)?,
                };
                mi_loss_prob(&pred, &c)
            };
            let cmp = compare(f, &x, 1e-6).unwrap();
            assert!(cmp.relative_error() < 1e-4);
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        for seed in 0..INSTANCES {
            let x = t2(normal_vec(&mut seeded(200 + seed), 3 * 5), 3, 5);
            let codes = onehots(5, &[seed as usize % 5, 0, 4]);
            let f = |l: &Tensor| onehot_ce_loss(&QPrediction::Deterministic { logits: l.clone() }, &codes);
            assert!(compare(f, &x, 1e-6).unwrap().relative_error() < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ortho_scale_invariant(v in prop::collection::vec(-2.0f64..2.0, 9), s in prop::collection::vec(0.01f64..50.0, 3)) {
            let k = t2(v.clone(), 3, 3);
            let scaled: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * s[i / 3]).collect();
            let a = scalar(&orthogonal_reg(&[k], CosineSign::Absolute).unwrap()).unwrap();
            let b = scalar(&orthogonal_reg(&[t2(scaled, 3, 3)], CosineSign::Absolute).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn ortho_bounded_by_layer_count(v in prop::collection::vec(-1.0f64..1.0, 24)) {
            let layers = [t2(v[..12].to_vec(), 4, 3), t2(v[12..].to_vec(), 3, 4)];
            let r = scalar(&orthogonal_reg(&layers, CosineSign::Absolute).unwrap()).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&r));
        }

        #[test]
        fn hinge_nonnegative_and_zero_iff_saturated(r in prop::collection::vec(-3.0f64..3.0, 1..6), f in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            let v = scalar(&hinge_d_loss(&t(&r), &t(&f)).unwrap()).unwrap();
            prop_assert!(v >= 0.0);
            let saturated = r.iter().all(|x| *x >= 1.0) && f.iter().all(|x| *x <= -1.0);
            prop_assert_eq!(v == 0.0, saturated);
        }
    }
}
