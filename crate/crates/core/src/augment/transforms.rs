use std::rc::Rc;

use crate::autodiff::{Tensor, Var};
use crate::scalar::Scalar;

use super::reparam::{normal_field, reparam_normal, standard_normal};
use super::AugmentError;

/// Checks that `x` is a `(N, C, L)` batch and returns its dimensions.
pub(crate) fn dims<S: Scalar>(x: &Var<'_, S>) -> Result<(usize, usize, usize), AugmentError> {
    match x.shape()[..] {
        [n, c, l] => Ok((n, c, l)),
        ref other => Err(AugmentError::InputShape(other.to_vec())),
    }
}

/// `X + σ·Φ⁻¹(ε)` with one draw per element.
pub fn jitter<'t, S: Scalar>(x: Var<'t, S>, sigma: Var<'t, S>, eps: &[f64]) -> Result<Var<'t, S>, AugmentError> {
    let (n, c, l) = dims(&x)?;
    let zero = x.tape().scalar(S::zero());
    let noise = reparam_normal(zero, sigma, eps, vec![n, c, l])?;
    Ok(x.add(noise)?)
}

/// `X[n, c, :] · (1 + σ·Φ⁻¹(ε[n, c]))`: one amplitude factor per channel.
pub fn scale<'t, S: Scalar>(x: Var<'t, S>, sigma: Var<'t, S>, eps: &[f64]) -> Result<Var<'t, S>, AugmentError> {
    let (n, c, _) = dims(&x)?;
    let one = x.tape().scalar(S::one());
    let factor = reparam_normal(one, sigma, eps, vec![n, c, 1])?;
    Ok(x.mul(factor)?)
}

/// How the magnitude-warp curve is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MagWarpMode {
    /// `X ⊙ curve`; identity when the curve is flat at 1.
    #[default]
    Multiplicative,
    /// `X + curve`, with knots still centred on 1. Not an identity at zero
    /// intensity: the signal is shifted by +1.
    Additive,
}

/// Segment index and fraction of every time step against `knots` evenly
/// spaced knots that include both endpoints.
pub fn knot_interpolation(length: usize, knots: usize) -> (Vec<usize>, Vec<f64>) {
    let mut lower = Vec::with_capacity(length);
    let mut frac = Vec::with_capacity(length);
    for t in 0..length {
        if length == 1 || knots < 2 {
            lower.push(0);
            frac.push(0.0);
            continue;
        }
        let u = t as f64 * (knots - 1) as f64 / (length - 1) as f64;
        let j = (u.floor() as usize).min(knots - 2);
        lower.push(j);
        frac.push(u - j as f64);
    }
    (lower, frac)
}

/// Piecewise-linear curve through per-row knots `(rows..., k)`, evaluated at
/// `length` steps. Equal knots give an exactly flat curve.
pub fn knot_curve<'t, S: Scalar>(knots: Var<'t, S>, length: usize) -> Result<Var<'t, S>, AugmentError> {
    let shape = knots.shape();
    let k = *shape.last().ok_or(AugmentError::InputShape(shape.clone()))?;
    let rows = knots.value().len() / k.max(1);
    let (lower, frac) = knot_interpolation(length, k);
    let upper: Vec<usize> = lower.iter().map(|&j| (j + 1).min(k - 1)).collect();
    let tile = |idx: &[usize]| Rc::new(idx.iter().copied().cycle().take(rows * length).collect::<Vec<_>>());
    let a = knots.gather_last(tile(&lower), length)?;
    let b = knots.gather_last(tile(&upper), length)?;
    let f = knots
        .tape()
        .constant(Tensor::new(vec![length], frac.iter().map(|&v| S::lit(v)).collect())?);
    Ok(a.add(b.sub(a)?.mul(f)?)?)
}

/// Smooth magnitude warp: knots drawn around 1 with scale `σ`, linearly
/// interpolated to the signal length.
pub fn mag_warp<'t, S: Scalar>(
    x: Var<'t, S>,
    sigma: Var<'t, S>,
    eps: &[f64],
    knots: usize,
    mode: MagWarpMode,
) -> Result<Var<'t, S>, AugmentError> {
    let (n, c, l) = dims(&x)?;
    if knots < 2 {
        return Err(AugmentError::InvalidBounds("knots must be at least 2".into()));
    }
    let one = x.tape().scalar(S::one());
    let k = reparam_normal(one, sigma, eps, vec![n, c, knots])?;
    let curve = knot_curve(k, l)?;
    Ok(match mode {
        MagWarpMode::Multiplicative => x.mul(curve)?,
        MagWarpMode::Additive => x.add(curve)?,
    })
}

/// Warped sampling positions of the time-warp baseline, one row per
/// `(sample, channel)`, each spanning `[0, L - 1]`.
pub fn time_warp_positions(
    rows: usize,
    length: usize,
    sigma: f64,
    eps: &[f64],
    knots: usize,
) -> Result<Vec<f64>, AugmentError> {
    if eps.len() != rows * knots {
        return Err(AugmentError::NoiseLength {
            expected: rows * knots,
            got: eps.len(),
        });
    }
    let (lower, frac) = knot_interpolation(length, knots);
    let mut out = Vec::with_capacity(rows * length);
    for r in 0..rows {
        let k: Vec<f64> = eps[r * knots..(r + 1) * knots]
            .iter()
            .map(|&u| 1.0 + sigma * standard_normal(u))
            .collect();
        let mut cum = Vec::with_capacity(length);
        let mut acc = 0.0;
        for t in 0..length {
            let j = lower[t];
            let speed = k[j] + (k[(j + 1).min(knots - 1)] - k[j]) * frac[t];
            acc += speed;
            cum.push(acc);
        }
        let span = cum.last().copied().unwrap_or(0.0) - cum.first().copied().unwrap_or(0.0);
        if length < 2 || span == 0.0 || !span.is_finite() {
            out.extend((0..length).map(|t| t as f64));
            continue;
        }
        let first = cum[0];
        let top = (length - 1) as f64;
        out.extend(cum.iter().map(|&v| (v - first) * top / span));
    }
    Ok(out)
}

/// Time-warp baseline: a cumulative warp from `knots` speeds drawn around 1,
/// normalized to `[0, L - 1]` and resampled linearly.
///
/// Only for fixed-intensity baselines: the input must not require gradients.
pub fn time_warp_baseline<'t, S: Scalar>(
    x: Var<'t, S>,
    sigma: f64,
    eps: &[f64],
    knots: usize,
) -> Result<Var<'t, S>, AugmentError> {
    if x.requires_grad() {
        return Err(AugmentError::NotDifferentiable("time_warp_baseline"));
    }
    let (n, c, l) = dims(&x)?;
    let pos = time_warp_positions(n * c, l, sigma, eps, knots)?;
    let xv = x.value();
    let mut data = Vec::with_capacity(xv.len());
    for (r, row) in xv.data().chunks(l.max(1)).enumerate() {
        for &p in &pos[r * l..(r + 1) * l] {
            if l == 1 {
                data.push(row[0]);
                continue;
            }
            let p = p.clamp(0.0, (l - 1) as f64);
            let i0 = (p.floor() as usize).min(l - 2);
            let f = S::lit(p - i0 as f64);
            data.push(row[i0] * (S::one() - f) + row[i0 + 1] * f);
        }
    }
    Ok(x.tape().constant(Tensor::new(vec![n, c, l], data)?))
}

/// Knot values `1 + σ·Φ⁻¹(ε)` without a tape, for inspection.
pub fn knot_values<S: Scalar>(sigma: f64, eps: &[f64], shape: Vec<usize>) -> Result<Tensor<S>, AugmentError> {
    Ok(normal_field::<S>(eps, shape)?.map(|z| S::one() + S::lit(sigma) * z))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::distributions::Open01;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions, Tape};

    fn uniforms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(Open01)).collect()
    }

    fn signal(n: usize, c: usize, l: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, c, l],
            (0..n * c * l).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn jitter_zero_intensity_is_identity() {
        let tape = Tape::new();
        let x = signal(2, 3, 10, 1);
        let out = jitter(tape.constant(x.clone()), tape.scalar(0.0), &uniforms(60, 2)).unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn jitter_on_zeros_is_the_scaled_noise_field() {
        let tape = Tape::new();
        let eps = uniforms(12, 3);
        let out = jitter(tape.constant(Tensor::zeros(vec![1, 2, 6])), tape.scalar(0.05), &eps).unwrap();
        for (o, &u) in out.value().data().iter().zip(&eps) {
            assert_eq!(*o, 0.05 * standard_normal(u));
        }
    }

    #[test]
    fn jitter_variance_matches_sigma_squared() {
        let n = 100_000;
        let tape = Tape::new();
        let x = signal(1, 1, n, 4);
        let out = jitter(tape.constant(x.clone()), tape.scalar(0.05), &uniforms(n, 5)).unwrap();
        let d: Vec<f64> = out.value().data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.0025 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn scale_examples() {
        let tape = Tape::new();
        let x = signal(2, 2, 7, 6);
        let out = scale(tape.constant(x.clone()), tape.scalar(0.0), &uniforms(4, 7)).unwrap();
        assert_eq!(*out.value(), x);

        // a deviate of 1 with σ = 0.5 gives the factor 1.5
        let u = 0.8413447460685429;
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let out = scale(tape.constant(x), tape.scalar(0.5), &[u]).unwrap();
        let v = out.value();
        assert!((v.data()[0] - 1.5).abs() < 1e-9 && (v.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn scale_ratio_is_constant_per_channel() {
        let tape = Tape::new();
        let x = signal(3, 2, 9, 8);
        let out = scale(tape.constant(x.clone()), tape.scalar(0.05), &uniforms(6, 9)).unwrap();
        let v = out.value();
        for r in 0..6 {
            let ratios: Vec<f64> = (0..9).map(|t| v.data()[r * 9 + t] / x.data()[r * 9 + t]).collect();
            assert!(ratios.iter().all(|q| (q - ratios[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn mag_warp_zero_intensity_is_identity() {
        let tape = Tape::new();
        let x = signal(2, 2, 50, 10);
        let out = mag_warp(
            tape.constant(x.clone()),
            tape.scalar(0.0),
            &uniforms(32, 11),
            8,
            MagWarpMode::Multiplicative,
        )
        .unwrap();
        assert_eq!(*out.value(), x);
    }

    #[test]
    fn flat_knots_at_two_double_the_signal() {
        let tape = Tape::new();
        let knots = tape.constant(Tensor::full(vec![1, 1, 8], 2.0));
        let curve = knot_curve(knots, 4).unwrap();
        let x = tape.constant(Tensor::ones(vec![1, 1, 4]));
        assert_eq!(x.mul(curve).unwrap().value().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn warp_curve_is_piecewise_linear_between_knots() {
        let (l, k) = (101, 8);
        let tape = Tape::new();
        let knots = tape.constant(knot_values::<f64>(0.3, &uniforms(k, 12), vec![1, 1, k]).unwrap());
        let curve = knot_curve(knots, l).unwrap().value();
        let c = curve.data();
        // an interior step t sits on a knot when t·(k−1)/(L−1) is within one step of an integer
        let near_knot = |t: usize| {
            let u = t as f64 * (k - 1) as f64 / (l - 1) as f64;
            let step = (k - 1) as f64 / (l - 1) as f64;
            (u - u.round()).abs() < step
        };
        let mut kinks = 0;
        for t in 1..l - 1 {
            let second = c[t + 1] - 2.0 * c[t] + c[t - 1];
            if near_knot(t) {
                kinks += usize::from(second.abs() > 1e-12);
            } else {
                assert!(second.abs() < 1e-12, "curvature {second} at {t}");
            }
        }
        assert!(kinks > 0);
        // endpoints are the first and last knots
        let kv = knots.value();
        assert_eq!(c[0], kv.data()[0]);
        assert!((c[l - 1] - kv.data()[k - 1]).abs() < 1e-12);
    }

    #[test]
    fn additive_mode_shifts_by_the_curve() {
        let tape = Tape::new();
        let x = signal(1, 1, 9, 13);
        let out = mag_warp(
            tape.constant(x.clone()),
            tape.scalar(0.0),
            &uniforms(8, 14),
            8,
            MagWarpMode::Additive,
        )
        .unwrap();
        for (o, v) in out.value().data().iter().zip(x.data()) {
            assert_eq!(*o, v + 1.0);
        }
    }

    #[test]
    fn magnitude_transforms_gradcheck_in_sigma_and_signal() {
        let x = signal(2, 2, 13, 15);
        let (ej, es, em) = (uniforms(52, 16), uniforms(4, 17), uniforms(32, 18));
        let report = grad_check_inputs(
            |_, v| {
                let y = jitter(v[0], v[1], &ej)?;
                let y = scale(y, v[1], &es)?;
                let y = mag_warp(y, v[1], &em, 8, MagWarpMode::Multiplicative)?;
                Ok::<_, AugmentError>(y.square().sum())
            },
            &[x, Tensor::scalar(0.04)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn time_warp_zero_intensity_is_identity() {
        let tape = Tape::new();
        let x = signal(2, 3, 40, 19);
        let out = time_warp_baseline(tape.constant(x.clone()), 0.0, &uniforms(48, 20), 8).unwrap();
        assert_eq!(*out.value(), x);
        let pos = time_warp_positions(6, 40, 0.0, &uniforms(48, 20), 8).unwrap();
        assert!(pos.iter().enumerate().all(|(i, &p)| p == (i % 40) as f64));
    }

    #[test]
    fn time_warp_preserves_length_and_refuses_gradients() {
        let tape = Tape::new();
        let x = signal(1, 2, 33, 21);
        let out = time_warp_baseline(tape.constant(x.clone()), 0.2, &uniforms(16, 22), 8).unwrap();
        assert_eq!(out.shape(), vec![1, 2, 33]);
        let err = time_warp_baseline(tape.param(x), 0.2, &uniforms(16, 22), 8);
        assert!(matches!(err, Err(AugmentError::NotDifferentiable(_))));
    }

    #[test]
    fn time_warp_positions_increase_when_knots_are_positive() {
        let mut checked = 0;
        for seed in 0..1000 {
            let eps = uniforms(8, seed);
            let sigma = 0.3;
            let k = knot_values::<f64>(sigma, &eps, vec![8]).unwrap();
            if k.data().iter().any(|&v| v <= 0.0) {
                continue;
            }
            let pos = time_warp_positions(1, 64, sigma, &eps, 8).unwrap();
            assert!(pos.windows(2).all(|w| w[1] > w[0]), "seed {seed}");
            assert_eq!(pos[0], 0.0);
            assert!((pos[63] - 63.0).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > 900);
    }

    proptest! {
        #[test]
        fn magnitude_transforms_preserve_shape(
            n in 1usize..3, c in 1usize..3, l in 1usize..20, seed in any::<u64>(), sigma in 0.0f64..0.05,
        ) {
            let tape = Tape::new();
            let x = tape.constant(signal(n, c, l, seed));
            let s = tape.scalar(sigma);
            let shape = vec![n, c, l];
            prop_assert_eq!(jitter(x, s, &uniforms(n * c * l, seed))?.shape(), shape.clone());
            prop_assert_eq!(scale(x, s, &uniforms(n * c, seed))?.shape(), shape.clone());
            let m = mag_warp(x, s, &uniforms(n * c * 8, seed), 8, MagWarpMode::Multiplicative)?;
            prop_assert_eq!(m.shape(), shape.clone());
            prop_assert_eq!(time_warp_baseline(x, sigma, &uniforms(n * c * 8, seed), 8)?.shape(), shape);
        }
    }
}
