//! Central finite-difference gradient checks.

use candle_core::{DType, Tensor, Var};

use crate::error::{invalid, Result};

/// Analytic and numeric gradients of a scalar function at `x`.
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `||a - n|| / max(||a||, ||n||)`, or 0 when both are zero.
    pub fn relative_error(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&self.analytic).max(norm(&self.numeric));
        if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        }
    }
}

/// Compares autograd against central differences with step `eps`.
/// `x` must be `f64`; `f` must return a scalar.
pub fn compare<F>(f: F, x: &Tensor, eps: f64) -> Result<GradComparison>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x.dtype() != DType::F64 {
        return invalid("gradient checks run in f64");
    }
    let var = Var::from_tensor(x)?;
    let loss = f(var.as_tensor())?;
    if loss.elem_count() != 1 {
        return invalid("gradient check target must be a scalar");
    }
    let grads = loss.backward()?;
    let analytic = match grads.get(&var) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };
    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    let eval = |v: Vec<f64>| -> Result<f64> {
        let t = Tensor::from_vec(v, x.shape(), x.device())?;
        Ok(f(&t)?.flatten_all()?.to_vec1::<f64>()?[0])
    };
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(GradComparison { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn cubic_gradient_matches() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let c = compare(|t| Ok(t.powf(3.0)?.sum_all()?), &x, 1e-5).unwrap();
        assert!(c.relative_error() < 1e-8);
        assert!((c.analytic[1] - 3.0 * 1.44).abs() < 1e-12);
    }

    #[test]
    fn rejects_f32() {
        let x = Tensor::new(&[1.0f32], &Device::Cpu).unwrap();
        assert!(compare(|t| Ok(t.sum_all()?), &x, 1e-3).is_err());
    }
}
