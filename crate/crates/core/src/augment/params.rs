use crate::autodiff::{Tape, Tensor, Var};
use crate::scalar::{logistic, Scalar};

use super::AugmentError;

/// Fixed bounds and structural constants of the augmentation module.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentBounds {
    /// Upper bound on the magnitude intensities (jitter, scale, magnitude warp).
    pub eta: f64,
    /// Upper bound on the number of permutation segments.
    pub max_segments: usize,
    /// Number of mixture components driving time distortion.
    pub components: usize,
    /// Knots of the magnitude/time warp curves.
    pub knots: usize,
    /// Temperature of the relaxed categorical and relaxed Bernoulli draws.
    pub temperature: f64,
}

impl Default for AugmentBounds {
    fn default() -> Self {
        Self {
            eta: 0.05,
            max_segments: 5,
            components: 6,
            knots: 8,
            temperature: 0.01,
        }
    }
}

impl AugmentBounds {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let fail = |what: &str| Err(AugmentError::InvalidBounds(what.to_string()));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return fail("eta must be positive");
        }
        if self.max_segments == 0 {
            return fail("max_segments must be at least 1");
        }
        if self.components == 0 {
            return fail("components must be at least 1");
        }
        if self.knots < 2 {
            return fail("knots must be at least 2");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail("temperature must be positive");
        }
        Ok(())
    }
}

/// Learnable augmentation parameters in unconstrained ("raw") form.
///
/// Effective values are obtained through bounded maps:
/// intensities are `eta * logistic(raw)`, the segment count is
/// `1 + round((max_segments - 1) * logistic(raw_perm))`, mixture weights are a
/// softmax, means a `tanh` and scales an `exp`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams<S> {
    pub raw_sigma_jitter: S,
    pub raw_sigma_scale: S,
    pub raw_sigma_magw: S,
    pub raw_perm: S,
    pub gmm_weights_raw: Vec<S>,
    pub gmm_means_raw: Vec<S>,
    pub gmm_scales_raw: Vec<S>,
    pub bounds: AugmentBounds,
}

/// Names of the learnable tensors, in declaration order.
pub const PARAM_NAMES: [&str; 7] = [
    "raw_sigma_jitter",
    "raw_sigma_scale",
    "raw_sigma_magw",
    "raw_perm",
    "gmm_weights_raw",
    "gmm_means_raw",
    "gmm_scales_raw",
];

/// Raw value standing in for negative infinity: every bounded map saturates
/// exactly (logistic to 0, exp to 0, tanh to -1).
pub const SATURATED_RAW: f64 = -1.0e3;

impl<S: Scalar> AugmentParams<S> {
    /// Default initialization: intensities at `eta / 2`, segment count at the
    /// midpoint of `[1, max_segments]`, and a near-uniform mixture with evenly
    /// spread means whose scale matches their spacing.
    pub fn new(bounds: AugmentBounds) -> Result<Self, AugmentError> {
        bounds.validate()?;
        let m = bounds.components;
        let spacing = if m == 1 { 1.0 } else { 1.5 / (m - 1) as f64 };
        let means = (0..m)
            .map(|i| {
                let target = if m == 1 { 0.0 } else { -0.75 + spacing * i as f64 };
                S::lit(target.atanh())
            })
            .collect();
        Ok(Self {
            raw_sigma_jitter: S::zero(),
            raw_sigma_scale: S::zero(),
            raw_sigma_magw: S::zero(),
            raw_perm: S::zero(),
            gmm_weights_raw: vec![S::zero(); m],
            gmm_means_raw: means,
            gmm_scales_raw: vec![S::lit(spacing.ln()); m],
            bounds,
        })
    }

    /// The zero-intensity limit: every raw value saturated towards -inf.
    ///
    /// Intensities are exactly zero, the segment count is 1 and the mixture
    /// collapses to a point, so the composed augmentation is the identity.
    pub fn identity_limit(bounds: AugmentBounds) -> Result<Self, AugmentError> {
        bounds.validate()?;
        let m = bounds.components;
        let raw = S::lit(SATURATED_RAW);
        Ok(Self {
            raw_sigma_jitter: raw,
            raw_sigma_scale: raw,
            raw_sigma_magw: raw,
            raw_perm: raw,
            gmm_weights_raw: vec![S::zero(); m],
            gmm_means_raw: vec![raw; m],
            gmm_scales_raw: vec![raw; m],
            bounds,
        })
    }

    /// Number of learnable scalars: `4 + 3 * components`.
    pub fn learnable_count(&self) -> usize {
        4 + self.gmm_weights_raw.len() + self.gmm_means_raw.len() + self.gmm_scales_raw.len()
    }

    /// Learnable tensors in declaration order (see [`PARAM_NAMES`]).
    pub fn to_tensors(&self) -> Vec<Tensor<S>> {
        vec![
            Tensor::scalar(self.raw_sigma_jitter),
            Tensor::scalar(self.raw_sigma_scale),
            Tensor::scalar(self.raw_sigma_magw),
            Tensor::scalar(self.raw_perm),
            Tensor::vector(self.gmm_weights_raw.clone()),
            Tensor::vector(self.gmm_means_raw.clone()),
            Tensor::vector(self.gmm_scales_raw.clone()),
        ]
    }

    /// Inverse of [`to_tensors`](Self::to_tensors).
    pub fn set_from_tensors(&mut self, tensors: &[Tensor<S>]) -> Result<(), AugmentError> {
        let m = self.bounds.components;
        let sizes = [1, 1, 1, 1, m, m, m];
        if tensors.len() != sizes.len() || tensors.iter().zip(sizes).any(|(t, n)| t.len() != n) {
            return Err(AugmentError::InvalidBounds(format!(
                "expected {} tensors with sizes {sizes:?}",
                sizes.len()
            )));
        }
        self.raw_sigma_jitter = tensors[0].data()[0];
        self.raw_sigma_scale = tensors[1].data()[0];
        self.raw_sigma_magw = tensors[2].data()[0];
        self.raw_perm = tensors[3].data()[0];
        self.gmm_weights_raw = tensors[4].data().to_vec();
        self.gmm_means_raw = tensors[5].data().to_vec();
        self.gmm_scales_raw = tensors[6].data().to_vec();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_tensors().iter().all(Tensor::is_finite)
    }

    /// Records the parameters on `tape` as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> AugmentVars<'t, S> {
        let mut vars = self.to_tensors().into_iter().map(|t| tape.param(t));
        let mut next = || vars.next().expect("seven parameter tensors");
        AugmentVars {
            raw_sigma_jitter: next(),
            raw_sigma_scale: next(),
            raw_sigma_magw: next(),
            raw_perm: next(),
            gmm_weights_raw: next(),
            gmm_means_raw: next(),
            gmm_scales_raw: next(),
            bounds: self.bounds.clone(),
        }
    }

    /// Effective (constrained) values, computed outside any tape.
    pub fn effective(&self) -> EffectiveParams {
        let eta = self.bounds.eta;
        let sigma = |raw: S| eta * logistic(raw.as_f64());
        let segments_relaxed = relaxed_segments(self.raw_perm.as_f64(), self.bounds.max_segments);
        let w: Vec<f64> = self.gmm_weights_raw.iter().map(|v| v.as_f64()).collect();
        let wmax = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - wmax).exp()).collect();
        let z: f64 = e.iter().sum();
        EffectiveParams {
            sigma_jitter: sigma(self.raw_sigma_jitter),
            sigma_scale: sigma(self.raw_sigma_scale),
            sigma_magw: sigma(self.raw_sigma_magw),
            segments: hard_segments(segments_relaxed, self.bounds.max_segments),
            segments_relaxed,
            gmm_weights: e.iter().map(|v| v / z).collect(),
            gmm_means: self.gmm_means_raw.iter().map(|v| v.as_f64().tanh()).collect(),
            gmm_scales: self.gmm_scales_raw.iter().map(|v| v.as_f64().exp()).collect(),
        }
    }
}

/// `1 + (max_segments - 1) * logistic(raw)`, in `[1, max_segments]`.
pub fn relaxed_segments(raw: f64, max_segments: usize) -> f64 {
    1.0 + (max_segments as f64 - 1.0) * logistic(raw)
}

/// Hard segment count: the relaxed count rounded and clamped to `[1, max_segments]`.
pub fn hard_segments(relaxed: f64, max_segments: usize) -> usize {
    (relaxed.round().max(1.0) as usize).min(max_segments)
}

/// Constrained parameter values, for logging and inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveParams {
    pub sigma_jitter: f64,
    pub sigma_scale: f64,
    pub sigma_magw: f64,
    pub segments: usize,
    pub segments_relaxed: f64,
    pub gmm_weights: Vec<f64>,
    pub gmm_means: Vec<f64>,
    pub gmm_scales: Vec<f64>,
}

/// Augmentation parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct AugmentVars<'t, S: Scalar> {
    pub raw_sigma_jitter: Var<'t, S>,
    pub raw_sigma_scale: Var<'t, S>,
    pub raw_sigma_magw: Var<'t, S>,
    pub raw_perm: Var<'t, S>,
    pub gmm_weights_raw: Var<'t, S>,
    pub gmm_means_raw: Var<'t, S>,
    pub gmm_scales_raw: Var<'t, S>,
    pub bounds: AugmentBounds,
}

impl<'t, S: Scalar> AugmentVars<'t, S> {
    /// Leaves in declaration order.
    pub fn all(&self) -> [Var<'t, S>; 7] {
        [
            self.raw_sigma_jitter,
            self.raw_sigma_scale,
            self.raw_sigma_magw,
            self.raw_perm,
            self.gmm_weights_raw,
            self.gmm_means_raw,
            self.gmm_scales_raw,
        ]
    }

    /// `eta * logistic(raw)` on the tape.
    pub fn bounded_sigma(&self, raw: Var<'t, S>) -> Var<'t, S> {
        raw.logistic().mul_scalar(S::lit(self.bounds.eta))
    }

    /// Relaxed segment count on the tape.
    pub fn relaxed_segments(&self) -> Var<'t, S> {
        self.raw_perm
            .logistic()
            .mul_scalar(S::lit(self.bounds.max_segments as f64 - 1.0))
            .add_scalar(S::one())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn parameter_count_is_four_plus_three_m() {
        for m in 1..10 {
            let bounds = AugmentBounds {
                components: m,
                ..AugmentBounds::default()
            };
            let p = AugmentParams::<f64>::new(bounds).unwrap();
            assert_eq!(p.learnable_count(), 4 + 3 * m);
            let total: usize = p.to_tensors().iter().map(Tensor::len).sum();
            assert_eq!(total, 4 + 3 * m);
        }
        assert_eq!(
            AugmentParams::<f64>::new(AugmentBounds::default())
                .unwrap()
                .learnable_count(),
            22
        );
    }

    #[test]
    fn initial_intensities_are_half_eta() {
        let p = AugmentParams::<f64>::new(AugmentBounds::default()).unwrap();
        let e = p.effective();
        assert_eq!(e.sigma_jitter, 0.025);
        assert_eq!(e.sigma_scale, 0.025);
        assert_eq!(e.sigma_magw, 0.025);
        assert_eq!(e.segments, 3);
        assert!((e.gmm_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((e.gmm_means[0] + 0.75).abs() < 1e-12 && (e.gmm_means[5] - 0.75).abs() < 1e-12);
        assert!(e.gmm_scales.iter().all(|&s| (s - 0.3).abs() < 1e-12));
    }

    #[test]
    fn identity_limit_saturates_exactly() {
        let p = AugmentParams::<f64>::identity_limit(AugmentBounds::default()).unwrap();
        let e = p.effective();
        assert_eq!((e.sigma_jitter, e.sigma_scale, e.sigma_magw), (0.0, 0.0, 0.0));
        assert_eq!(e.segments, 1);
        assert!(e.gmm_scales.iter().all(|&s| s == 0.0));
        assert!(e.gmm_means.iter().all(|&m| m == -1.0));
    }

    #[test]
    fn tensor_round_trip() {
        let mut p = AugmentParams::<f64>::new(AugmentBounds::default()).unwrap();
        let mut ts = p.to_tensors();
        ts[0].data_mut()[0] = 1.25;
        ts[6].data_mut()[2] = -0.5;
        p.set_from_tensors(&ts).unwrap();
        assert_eq!(p.raw_sigma_jitter, 1.25);
        assert_eq!(p.gmm_scales_raw[2], -0.5);
        assert!(p.set_from_tensors(&ts[..3]).is_err());
    }

    #[test]
    fn invalid_bounds_rejected() {
        for bounds in [
            AugmentBounds {
                eta: 0.0,
                ..Default::default()
            },
            AugmentBounds {
                max_segments: 0,
                ..Default::default()
            },
            AugmentBounds {
                components: 0,
                ..Default::default()
            },
            AugmentBounds {
                knots: 1,
                ..Default::default()
            },
            AugmentBounds {
                temperature: 0.0,
                ..Default::default()
            },
        ] {
            assert!(AugmentParams::<f64>::new(bounds).is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn bounds_hold_for_any_raw_values(
            j in -1e3f64..1e3, s in -1e3f64..1e3, m in -1e3f64..1e3, perm in -1e3f64..1e3,
            w in prop::collection::vec(-50.0f64..50.0, 6),
            scale in -30.0f64..5.0,
        ) {
            let mut p = AugmentParams::<f64>::new(AugmentBounds::default()).unwrap();
            p.raw_sigma_jitter = j;
            p.raw_sigma_scale = s;
            p.raw_sigma_magw = m;
            p.raw_perm = perm;
            p.gmm_weights_raw = w;
            p.gmm_scales_raw = vec![scale; 6];
            let e = p.effective();
            for sigma in [e.sigma_jitter, e.sigma_scale, e.sigma_magw] {
                prop_assert!((0.0..=0.05).contains(&sigma));
            }
            prop_assert!((1..=5).contains(&e.segments));
            prop_assert!((e.gmm_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(e.gmm_scales.iter().all(|&v| v > 0.0));
        }
    }
}
