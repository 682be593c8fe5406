use crate::autodiff::{log_softmax_last, Tape, Tensor, Var};
use crate::scalar::Scalar;

use super::noise::{NoiseBundle, NoiseShape};
use super::params::{AugmentBounds, AugmentParams, AugmentVars};
use super::permute::{permute, permute_with_counts, SegmentAnchor};
use super::time_distort::{time_distort, GmmVars};
use super::transforms::{dims, jitter, mag_warp, scale, time_warp_baseline, MagWarpMode};
use super::AugmentError;

/// Deliberately wrong gradients, for checking that the gradient suite notices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientFault {
    /// Negates the jitter intensity's gradient.
    FlipJitterSign,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeavesOptions {
    pub mag_warp_mode: MagWarpMode,
    /// Freezes the segment count for finite-difference checks.
    pub segment_anchor: Option<SegmentAnchor>,
    pub fault: Option<GradientFault>,
}

#[derive(Clone, Debug)]
pub struct LeavesView<'t, S: Scalar> {
    pub view: Var<'t, S>,
    /// Time-distortion sampling locations, shape `(N, C, L)`.
    pub locations: Var<'t, S>,
    pub segments: usize,
    pub time_distort_degenerate: bool,
}

/// The noise layout a batch of shape `(N, C, L)` needs under `bounds`.
pub fn noise_shape(batch: usize, channels: usize, length: usize, bounds: &AugmentBounds) -> NoiseShape {
    NoiseShape {
        batch,
        channels,
        length,
        components: bounds.components,
        knots: bounds.knots,
        max_segments: bounds.max_segments,
    }
}

/// Generates the view: jitter, scale, magnitude warp, time distortion and
/// segment permutation, in that order. Differentiable in every parameter.
pub fn leaves_forward<'t, S: Scalar>(
    x: Var<'t, S>,
    params: &AugmentVars<'t, S>,
    noise: &NoiseBundle,
    opts: &LeavesOptions,
) -> Result<LeavesView<'t, S>, AugmentError> {
    let (n, c, l) = dims(&x)?;
    let expected = noise_shape(n, c, l, &params.bounds);
    if noise.shape != expected {
        return Err(AugmentError::NoiseShape {
            expected: format!("{expected:?}"),
            got: format!("{:?}", noise.shape),
        });
    }
    let mut sigma_j = params.bounded_sigma(params.raw_sigma_jitter);
    if opts.fault == Some(GradientFault::FlipJitterSign) {
        sigma_j = sigma_j.grad_reverse();
    }
    let y = jitter(x, sigma_j, &noise.jitter)?;
    let y = scale(y, params.bounded_sigma(params.raw_sigma_scale), &noise.scale)?;
    let y = mag_warp(
        y,
        params.bounded_sigma(params.raw_sigma_magw),
        &noise.magw_knots,
        params.bounds.knots,
        opts.mag_warp_mode,
    )?;
    let gmm = GmmVars {
        log_weights: log_softmax_last(params.gmm_weights_raw)?,
        means: params.gmm_means_raw.tanh(),
        scales: params.gmm_scales_raw.exp(),
    };
    let td = time_distort(y, gmm, &noise.gmm_select, &noise.gmm_normal, params.bounds.temperature)?;
    let p = permute(
        td.view,
        params.relaxed_segments(),
        params.bounds.max_segments,
        &noise.perm_order,
        opts.segment_anchor,
    )?;
    Ok(LeavesView {
        view: p.view,
        locations: td.locations,
        segments: p.segments,
        time_distort_degenerate: td.degenerate,
    })
}

/// Computes one view outside of training.
pub fn augment_view<S: Scalar>(
    x: &Tensor<S>,
    params: &AugmentParams<S>,
    noise: &NoiseBundle,
    mode: MagWarpMode,
) -> Result<Tensor<S>, AugmentError> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let opts = LeavesOptions {
        mag_warp_mode: mode,
        ..LeavesOptions::default()
    };
    let v = leaves_forward(tape.constant(x.clone()), &vars, noise, &opts)?;
    Ok((*v.view.value()).clone())
}

/// Fixed, hand-set intensities for the contrastive baseline: one shared
/// `sigma` for jitter, scale, magnitude warp and time warp, and a random
/// segment count in `[1, max_segments]` per sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedIntensity {
    pub sigma: f64,
    pub max_segments: usize,
    pub knots: usize,
}

/// Applies the fixed-intensity pipeline: jitter, scale, magnitude warp,
/// time warp and permutation. No gradients flow.
pub fn fixed_intensity_view<S: Scalar>(
    x: &Tensor<S>,
    cfg: FixedIntensity,
    noise: &NoiseBundle,
) -> Result<Tensor<S>, AugmentError> {
    if !(cfg.sigma.is_finite() && cfg.sigma >= 0.0) {
        return Err(AugmentError::NegativeScale);
    }
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (n, c, l) = dims(&xv)?;
    let expected = NoiseShape {
        batch: n,
        channels: c,
        length: l,
        components: noise.shape.components,
        knots: cfg.knots,
        max_segments: cfg.max_segments,
    };
    if noise.shape != expected {
        return Err(AugmentError::NoiseShape {
            expected: format!("{expected:?}"),
            got: format!("{:?}", noise.shape),
        });
    }
    let sigma = tape.scalar(S::lit(cfg.sigma));
    let y = jitter(xv, sigma, &noise.jitter)?;
    let y = scale(y, sigma, &noise.scale)?;
    let y = mag_warp(y, sigma, &noise.magw_knots, cfg.knots, MagWarpMode::Multiplicative)?;
    let y = time_warp_baseline(y, cfg.sigma, &noise.timew_knots, cfg.knots)?;
    let counts: Vec<usize> = noise
        .perm_count
        .iter()
        .map(|&u| 1 + ((u * cfg.max_segments as f64) as usize).min(cfg.max_segments - 1))
        .collect();
    let y = permute_with_counts(y, &counts, &noise.perm_order, cfg.max_segments)?;
    Ok((*y.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::params::hard_segments;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions};

    fn signal(n: usize, c: usize, l: usize) -> Tensor<f64> {
        let data = (0..n * c * l)
            .map(|i| {
                let t = (i % l) as f64 / l as f64;
                (2.0 * std::f64::consts::PI * (1.0 + (i / l) as f64) * t).sin()
            })
            .collect();
        Tensor::new(vec![n, c, l], data).unwrap()
    }

    #[test]
    fn identity_limit_reproduces_the_input() {
        let bounds = AugmentBounds::default();
        let params = AugmentParams::<f64>::identity_limit(bounds.clone()).unwrap();
        let x = signal(3, 2, 64);
        for seed in 0..5 {
            let noise = NoiseBundle::generate(seed, noise_shape(3, 2, 64, &bounds));
            let v = augment_view(&x, &params, &noise, MagWarpMode::Multiplicative).unwrap();
            assert!(v.max_abs_diff(&x) < 1e-9);
        }
    }

    #[test]
    fn default_parameters_change_the_signal_but_keep_its_shape() {
        let bounds = AugmentBounds::default();
        let params = AugmentParams::<f64>::new(bounds.clone()).unwrap();
        let x = signal(2, 3, 50);
        let noise = NoiseBundle::generate(9, noise_shape(2, 3, 50, &bounds));
        let v = augment_view(&x, &params, &noise, MagWarpMode::Multiplicative).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.max_abs_diff(&x) > 1e-3);
        assert!(v.is_finite());
    }

    #[test]
    fn distinct_noise_gives_distinct_views() {
        let bounds = AugmentBounds::default();
        let params = AugmentParams::<f64>::new(bounds.clone()).unwrap();
        let x = signal(1, 1, 32);
        let shape = noise_shape(1, 1, 32, &bounds);
        for seed in 0..100 {
            let a = augment_view(
                &x,
                &params,
                &NoiseBundle::generate(2 * seed, shape),
                MagWarpMode::Multiplicative,
            )
            .unwrap();
            let b = augment_view(
                &x,
                &params,
                &NoiseBundle::generate(2 * seed + 1, shape),
                MagWarpMode::Multiplicative,
            )
            .unwrap();
            assert!(a.max_abs_diff(&b) > 0.0);
        }
    }

    #[test]
    fn views_are_bitwise_deterministic() {
        let bounds = AugmentBounds::default();
        let params = AugmentParams::<f64>::new(bounds.clone()).unwrap();
        let x = signal(2, 2, 40);
        let noise = NoiseBundle::generate(3, noise_shape(2, 2, 40, &bounds));
        let a = augment_view(&x, &params, &noise, MagWarpMode::Multiplicative).unwrap();
        let b = augment_view(&x, &params, &noise, MagWarpMode::Multiplicative).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn noise_shape_mismatch_is_rejected() {
        let bounds = AugmentBounds::default();
        let params = AugmentParams::<f64>::new(bounds.clone()).unwrap();
        let noise = NoiseBundle::generate(0, noise_shape(1, 1, 10, &bounds));
        let r = augment_view(&signal(1, 1, 11), &params, &noise, MagWarpMode::Multiplicative);
        assert!(matches!(r, Err(AugmentError::NoiseShape { .. })));
    }

    #[test]
    fn gradcheck_through_the_full_composition() {
        let bounds = AugmentBounds::default();
        let mut params = AugmentParams::<f64>::new(bounds.clone()).unwrap();
        params.raw_perm = 0.3;
        let (n, c, l) = (2, 2, 24);
        let x = signal(n, c, l);
        let noise = NoiseBundle::generate(17, noise_shape(n, c, l, &bounds));
        let relaxed = crate::augment::params::relaxed_segments(params.raw_perm, bounds.max_segments);
        let anchor = SegmentAnchor {
            count: hard_segments(relaxed, bounds.max_segments),
            relaxed,
        };
        let weights = Tensor::new(
            vec![n, c, l],
            (0..n * c * l).map(|i| 0.5 + ((i * 13) % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let report = grad_check_inputs(
            |tape, v| {
                let mut p = params.clone();
                p.set_from_tensors(&v.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>())?;
                let vars = AugmentVars {
                    raw_sigma_jitter: v[0],
                    raw_sigma_scale: v[1],
                    raw_sigma_magw: v[2],
                    raw_perm: v[3],
                    gmm_weights_raw: v[4],
                    gmm_means_raw: v[5],
                    gmm_scales_raw: v[6],
                    bounds: p.bounds.clone(),
                };
                let opts = LeavesOptions {
                    segment_anchor: Some(anchor),
                    ..LeavesOptions::default()
                };
                let out = leaves_forward(tape.constant(x.clone()), &vars, &noise, &opts)?;
                Ok::<_, AugmentError>(out.view.mul(tape.constant(weights.clone()))?.sum())
            },
            &params.to_tensors(),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fixed_intensity_view_zero_sigma_single_segment_is_identity() {
        let x = signal(2, 1, 30);
        let mut noise = NoiseBundle::generate(
            4,
            NoiseShape {
                batch: 2,
                channels: 1,
                length: 30,
                components: 1,
                knots: 8,
                max_segments: 1,
            },
        );
        noise.perm_count = vec![0.99, 0.01];
        let cfg = FixedIntensity {
            sigma: 0.0,
            max_segments: 1,
            knots: 8,
        };
        assert_eq!(fixed_intensity_view(&x, cfg, &noise).unwrap(), x);
    }

    #[test]
    fn fixed_intensity_counts_cover_the_range() {
        let x = signal(1, 1, 20);
        let cfg = FixedIntensity {
            sigma: 0.03,
            max_segments: 5,
            knots: 8,
        };
        let shape = NoiseShape {
            batch: 1,
            channels: 1,
            length: 20,
            components: 1,
            knots: 8,
            max_segments: 5,
        };
        let v = fixed_intensity_view(&x, cfg, &NoiseBundle::generate(1, shape)).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.max_abs_diff(&x) > 0.0);
    }
}
