use crate::autodiff::{softmax_last, Tensor, Var};
use crate::scalar::Scalar;

use super::reparam::normal_field;
use super::transforms::dims;
use super::AugmentError;

/// Ranges below this are treated as a collapsed mixture.
pub const DEGENERATE_RANGE: f64 = 1e-10;

/// Mixture parameters in effective form, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars<'t, S: Scalar> {
    /// `log φ`, shape `(M)`.
    pub log_weights: Var<'t, S>,
    /// Component means, shape `(M)`.
    pub means: Var<'t, S>,
    /// Component scales (non-negative), shape `(M)`.
    pub scales: Var<'t, S>,
}

#[derive(Clone, Debug)]
pub struct TimeDistortOutput<'t, S: Scalar> {
    pub view: Var<'t, S>,
    /// Sampling locations in `[-1, 1]`, shape `(N, C, L)`.
    pub locations: Var<'t, S>,
    /// Whether the mixture collapsed and the identity grid was used.
    pub degenerate: bool,
}

/// Draws `L` mixture samples per `(sample, channel)`, sorts them, rescales
/// them to `[-1, 1]` and resamples `x` at those locations.
///
/// Each sample is a relaxed-categorical blend (temperature `t`) of one
/// reparameterized draw per component. Dense regions of the mixture are
/// up-sampled and sparse regions down-sampled. If any row's draws collapse to
/// a single value the uniform grid is used instead and `x` is returned as is.
pub fn time_distort<'t, S: Scalar>(
    x: Var<'t, S>,
    gmm: GmmVars<'t, S>,
    select_eps: &[f64],
    normal_eps: &[f64],
    temperature: f64,
) -> Result<TimeDistortOutput<'t, S>, AugmentError> {
    let (n, c, l) = dims(&x)?;
    let m = gmm.means.value().len();
    if m == 0 || gmm.log_weights.value().len() != m || gmm.scales.value().len() != m {
        return Err(AugmentError::InvalidBounds(
            "mixture parameters must share one non-zero length".into(),
        ));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(AugmentError::NonPositiveTemperature);
    }
    if gmm.scales.value().data().iter().any(|&s| s < S::zero()) {
        return Err(AugmentError::NegativeScale);
    }
    let rows = n * c * l;
    if select_eps.len() != rows * m {
        return Err(AugmentError::NoiseLength {
            expected: rows * m,
            got: select_eps.len(),
        });
    }
    let tape = x.tape();

    let z = tape.constant(normal_field(normal_eps, vec![rows, m])?);
    let draws = gmm.means.add(gmm.scales.mul(z)?)?;
    let gumbel: Vec<S> = select_eps.iter().map(|&u| S::lit(-(-u.ln()).ln())).collect();
    let gumbel = tape.constant(Tensor::new(vec![rows, m], gumbel)?);
    let logits = gmm.log_weights.add(gumbel)?.mul_scalar(S::lit(1.0 / temperature));
    let mix = softmax_last(logits)?;
    let samples = mix.mul(draws)?.sum_axis(1, false)?.reshape(vec![n * c, l])?;

    let (sorted, _) = samples.sort_last()?;
    let lo = sorted.gather_last(std::rc::Rc::new(vec![0; n * c]), 1)?;
    let hi = sorted.gather_last(std::rc::Rc::new(vec![l - 1; n * c]), 1)?;
    let range = hi.sub(lo)?;
    let degenerate = range
        .value()
        .data()
        .iter()
        .any(|&r| r.as_f64().is_nan() || r.as_f64() < DEGENERATE_RANGE);
    if degenerate {
        let grid = identity_grid::<S>(n, c, l);
        return Ok(TimeDistortOutput {
            view: x,
            locations: tape.constant(grid),
            degenerate: true,
        });
    }
    let unit = sorted.sub(lo)?.div(range)?;
    let locations = unit
        .mul_scalar(S::lit(2.0))
        .add_scalar(-S::one())
        .reshape(vec![n, c, l])?;
    let view = x.interp1d(locations)?;
    Ok(TimeDistortOutput {
        view,
        locations,
        degenerate: false,
    })
}

/// Evenly spaced locations `-1, ..., 1` that resample a signal onto itself.
pub fn identity_grid<S: Scalar>(n: usize, c: usize, l: usize) -> Tensor<S> {
    let row: Vec<S> = (0..l)
        .map(|t| {
            if l == 1 {
                S::zero()
            } else {
                S::lit(2.0 * t as f64 / (l - 1) as f64 - 1.0)
            }
        })
        .collect();
    let data = row.iter().copied().cycle().take(n * c * l).collect();
    Tensor::new(vec![n, c, l], data).expect("grid shape")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::distributions::Open01;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_inputs, log_softmax_last, GradCheckOptions, Tape};

    fn uniforms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(Open01)).collect()
    }

    fn gmm<'t>(tape: &'t Tape<f64>, w: &[f64], mu: &[f64], s: &[f64]) -> GmmVars<'t, f64> {
        let w = tape.constant(Tensor::vector(w.to_vec()));
        GmmVars {
            log_weights: log_softmax_last(w).unwrap(),
            means: tape.constant(Tensor::vector(mu.to_vec())),
            scales: tape.constant(Tensor::vector(s.to_vec())),
        }
    }

    fn sine(l: usize, cycles: f64) -> Tensor<f64> {
        let data = (0..l)
            .map(|t| (2.0 * std::f64::consts::PI * cycles * t as f64 / l as f64).sin())
            .collect();
        Tensor::new(vec![1, 1, l], data).unwrap()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn collapsed_single_component_falls_back_to_identity() {
        let tape = Tape::new();
        let x = sine(32, 2.0);
        let out = time_distort(
            tape.constant(x.clone()),
            gmm(&tape, &[0.0], &[0.3], &[0.0]),
            &uniforms(32, 1),
            &uniforms(32, 2),
            0.01,
        )
        .unwrap();
        assert!(out.degenerate);
        assert_eq!(*out.view.value(), x);
        assert_eq!(out.locations.value().data()[0], -1.0);
        assert_eq!(out.locations.value().data()[31], 1.0);
    }

    #[test]
    fn locations_are_sorted_with_exact_endpoints() {
        for seed in 0..50 {
            let tape = Tape::new();
            let (n, c, l, m) = (2, 3, 40, 6);
            let x = tape.constant(Tensor::zeros(vec![n, c, l]));
            let mu: Vec<f64> = (0..m).map(|i| -0.75 + 0.3 * i as f64).collect();
            let out = time_distort(
                x,
                gmm(&tape, &[0.1, -0.3, 0.5, 0.0, 0.2, -0.1], &mu, &[0.3; 6]),
                &uniforms(n * c * l * m, seed),
                &uniforms(n * c * l * m, seed + 1000),
                0.01,
            )
            .unwrap();
            assert!(!out.degenerate);
            for row in out.locations.value().data().chunks(l) {
                assert!(row.windows(2).all(|w| w[0] <= w[1]));
                assert_eq!(row[0], -1.0);
                assert_eq!(row[l - 1], 1.0);
            }
        }
    }

    #[test]
    fn near_uniform_mixture_mildly_resamples_a_sinusoid() {
        // evenly spread components of width equal to half their spacing approximate a uniform density
        let (l, m) = (256, 6);
        let mu: Vec<f64> = (0..m).map(|i| -1.0 + (2 * i + 1) as f64 / m as f64).collect();
        let x = sine(l, 1.0);
        let mut worst = f64::INFINITY;
        for seed in 0..10 {
            let tape = Tape::new();
            let out = time_distort(
                tape.constant(x.clone()),
                gmm(&tape, &[0.0; 6], &mu, &[1.0 / m as f64; 6]),
                &uniforms(l * m, seed),
                &uniforms(l * m, seed + 77),
                0.01,
            )
            .unwrap();
            worst = worst.min(pearson(out.view.value().data(), x.data()));
        }
        assert!(worst > 0.9, "correlation {worst}");
    }

    #[test]
    fn single_component_width_is_removed_by_rescaling() {
        let l = 64;
        let x = sine(l, 1.0);
        let view = |scale: f64| {
            let tape = Tape::new();
            let out = time_distort(
                tape.constant(x.clone()),
                gmm(&tape, &[0.0], &[0.2], &[scale]),
                &uniforms(l, 8),
                &uniforms(l, 9),
                0.01,
            )
            .unwrap();
            (*out.view.value()).clone()
        };
        assert!(view(0.1).max_abs_diff(&view(10.0)) < 1e-9);
    }

    #[test]
    fn dense_regions_are_upsampled() {
        // three quarters of the mass in the left component: about three quarters of
        // the output steps resample the first half of the signal
        let (l, m) = (200, 2);
        let tape = Tape::new();
        let ramp = Tensor::new(vec![1, 1, l], (0..l).map(|t| t as f64).collect()).unwrap();
        let out = time_distort(
            tape.constant(ramp),
            gmm(&tape, &[3f64.ln(), 0.0], &[-0.5, 0.5], &[0.1, 0.1]),
            &uniforms(l * m, 3),
            &uniforms(l * m, 4),
            0.01,
        )
        .unwrap();
        let v = out.view.value();
        let early = v.data().iter().filter(|&&s| s < (l / 2) as f64).count();
        assert!(early > 13 * l / 20, "{early} of {l} steps drawn from the first half");
    }

    #[test]
    fn gradcheck_over_mixture_parameters_and_signal() {
        let (n, c, l, m) = (1, 2, 12, 3);
        let sel = uniforms(n * c * l * m, 5);
        let nor = uniforms(n * c * l * m, 6);
        let x = sine(24, 1.5).reshape(vec![n, c, l]).unwrap();
        let report = grad_check_inputs(
            |_, v| {
                let g = GmmVars {
                    log_weights: log_softmax_last(v[1])?,
                    means: v[2].tanh(),
                    scales: v[3].exp(),
                };
                // a larger temperature keeps the blend weights smooth enough for finite differences
                let out = time_distort(v[0], g, &sel, &nor, 0.5)?;
                let w = Tensor::new(vec![n, c, l], (0..n * c * l).map(|i| 1.0 + 0.1 * i as f64).collect())?;
                Ok::<_, AugmentError>(out.view.mul(v[0].tape().constant(w))?.sum())
            },
            &[
                x,
                Tensor::vector(vec![0.2, -0.1, 0.4]),
                Tensor::vector(vec![-0.5, 0.1, 0.6]),
                Tensor::vector(vec![-1.0, -1.2, -0.9]),
            ],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shape_and_monotonicity_hold(
            n in 1usize..3, c in 1usize..3, l in 2usize..30, m in 1usize..5, seed in any::<u64>(),
        ) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::zeros(vec![n, c, l]));
            let mu: Vec<f64> = (0..m).map(|i| i as f64 * 0.2 - 0.3).collect();
            let out = time_distort(
                x,
                gmm(&tape, &vec![0.0; m], &mu, &vec![0.25; m]),
                &uniforms(n * c * l * m, seed),
                &uniforms(n * c * l * m, seed ^ 0x5555),
                0.01,
            ).unwrap();
            prop_assert_eq!(out.view.shape(), vec![n, c, l]);
            for row in out.locations.value().data().chunks(l) {
                prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(row[0], -1.0);
                prop_assert_eq!(row[l - 1], 1.0);
            }
        }
    }
}
