use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{Tensor, Var};
use crate::scalar::Scalar;

use super::AugmentError;

/// Standard-normal deviate for a uniform draw in (0, 1).
pub fn standard_normal(u: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    n.inverse_cdf(u)
}

fn check_uniforms(eps: &[f64], expected: usize) -> Result<(), AugmentError> {
    if eps.len() != expected {
        return Err(AugmentError::NoiseLength {
            expected,
            got: eps.len(),
        });
    }
    if let Some(index) = eps.iter().position(|&u| !(u > 0.0 && u < 1.0)) {
        return Err(AugmentError::UniformOutOfRange { index });
    }
    Ok(())
}

/// Tensor of standard-normal deviates `Φ⁻¹(ε)` with the given shape.
pub fn normal_field<S: Scalar>(eps: &[f64], shape: Vec<usize>) -> Result<Tensor<S>, AugmentError> {
    check_uniforms(eps, shape.iter().product())?;
    Ok(Tensor::new(
        shape,
        eps.iter().map(|&u| S::lit(standard_normal(u))).collect(),
    )?)
}

/// `μ + σ·Φ⁻¹(ε)`, differentiable in `μ` and `σ`.
///
/// `mu` and `sigma` broadcast against `shape`.
pub fn reparam_normal<'t, S: Scalar>(
    mu: Var<'t, S>,
    sigma: Var<'t, S>,
    eps: &[f64],
    shape: Vec<usize>,
) -> Result<Var<'t, S>, AugmentError> {
    if sigma.value().data().iter().any(|&s| s < S::zero()) {
        return Err(AugmentError::NegativeScale);
    }
    let z = sigma.tape().constant(normal_field(eps, shape)?);
    Ok(mu.add(sigma.mul(z)?)?)
}

/// `low + (high - low)·ε`, differentiable in both bounds.
pub fn reparam_uniform<'t, S: Scalar>(
    low: Var<'t, S>,
    high: Var<'t, S>,
    eps: &[f64],
    shape: Vec<usize>,
) -> Result<Var<'t, S>, AugmentError> {
    let (l, h) = (low.value(), high.value());
    if let (Some(l), Some(h)) = (l.item(), h.item()) {
        if l > h {
            return Err(AugmentError::InvalidInterval {
                low: l.as_f64(),
                high: h.as_f64(),
            });
        }
    } else {
        return Err(AugmentError::Autodiff(crate::autodiff::AutodiffError::InvalidArgument(
            "uniform bounds must be scalars",
        )));
    }
    check_uniforms(eps, shape.iter().product())?;
    let e = low
        .tape()
        .constant(Tensor::new(shape, eps.iter().map(|&u| S::lit(u)).collect())?);
    Ok(low.add(high.sub(low)?.mul(e)?)?)
}

/// Which logit a relaxed Bernoulli draw is built from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BernoulliLogit {
    /// `log p`, the formula exactly as printed. Its limit as `t → 0` is a
    /// Bernoulli with success probability `p / (1 + p)`.
    Probability,
    /// `log(p / (1 - p))`, the concrete-distribution logit. Its limit as
    /// `t → 0` is a Bernoulli with success probability `p`.
    #[default]
    Odds,
}

/// A relaxed Bernoulli draw before and after the logistic squash.
#[derive(Clone, Copy, Debug)]
pub struct RelaxedBernoulli<'t, S: Scalar> {
    pub pre_squash: Var<'t, S>,
    pub sample: Var<'t, S>,
}

/// `logistic((logit(p) + log ε - log(1 - ε)) / t)`, differentiable in `p`.
pub fn reparam_relaxed_bernoulli<'t, S: Scalar>(
    p: Var<'t, S>,
    t: f64,
    eps: &[f64],
    shape: Vec<usize>,
    logit: BernoulliLogit,
) -> Result<RelaxedBernoulli<'t, S>, AugmentError> {
    if p.value().data().iter().any(|&v| !(v > S::zero() && v < S::one())) {
        return Err(AugmentError::ProbabilityOutOfRange);
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(AugmentError::NonPositiveTemperature);
    }
    check_uniforms(eps, shape.iter().product())?;
    let logistic_noise = eps.iter().map(|&u| S::lit(u.ln() - (1.0 - u).ln())).collect();
    let noise = p.tape().constant(Tensor::new(shape, logistic_noise)?);
    let base = match logit {
        BernoulliLogit::Probability => p.log()?,
        BernoulliLogit::Odds => p.log()?.sub(p.neg().add_scalar(S::one()).log()?)?,
    };
    let pre_squash = base.add(noise)?.mul_scalar(S::lit(1.0 / t));
    Ok(RelaxedBernoulli {
        pre_squash,
        sample: pre_squash.logistic(),
    })
}
