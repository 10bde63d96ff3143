//! Finite-difference gradient checking.
//!
//! Compares the autograd gradient of a scalar function against central
//! differences, in `f64`. The reported error is norm-wise:
//! `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, floor)`, which
//! stays meaningful when individual components are (near) zero.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const STEP: f64 = 1e-6;

/// Denominator floor for gradients that vanish everywhere.
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.numeric.iter().fold(FLOOR, |m, v| m.max(v.abs()));
        let diff = self.analytic.iter().zip(&self.numeric).fold(0f64, |m, (a, n)| m.max((a - n).abs()));
        diff / scale
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.elem_count() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", t.dims())));
    }
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Checks `f` at `x` (converted to `f64`) with step `h`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = x.to_dtype(DType::F64)?.detach();
    let var = Var::from_tensor(&x)?;
    let out = f(var.as_tensor())?;
    scalar(&out)?;
    let grads = out.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };

    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let up = scalar(&f(&Tensor::from_vec(probe.clone(), x.shape(), x.device())?)?)?;
        probe[i] = base[i] - h;
        let down = scalar(&f(&Tensor::from_vec(probe, x.shape(), x.device())?)?)?;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok(GradCheck { analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn polynomial_gradient() {
        let x = Tensor::new(&[0.5f64, -1.5, 2.0], &Device::Cpu).unwrap();
        let check = check_gradient(|t| Ok(t.powf(3.0)?.sum_all()?), &x, STEP).unwrap();
        let expected = [0.75, 6.75, 12.0];
        for (a, e) in check.analytic.iter().zip(expected) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(check.relative_error() < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach() hides half of the dependency from autograd.
        let x = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let check = check_gradient(|t| Ok((t.sqr()? * t.detach())?.sum_all()?), &x, STEP).unwrap();
        assert!(check.relative_error() > 0.1);
    }
}
