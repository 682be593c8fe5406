//! Finite-difference gradient suite over every differentiable operator, the
//! augmentation pipeline, the encoder and the full contrastive pipeline.

use std::rc::Rc;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    hard_segments, jitter, leaves_forward, mag_warp, noise_shape, permute, relaxed_segments, reparam_normal,
    reparam_relaxed_bernoulli, reparam_uniform, scale, time_distort, AugmentBounds, AugmentError, AugmentParams,
    AugmentVars, BernoulliLogit, GmmVars, GradientFault, LeavesOptions, MagWarpMode, NoiseBundle, SegmentAnchor,
};
use crate::autodiff::{
    grad_check_inputs, log_softmax_last, softmax_last, AutodiffError, GradCheckOptions, GradCheckReport, Tape, Tensor,
    Var,
};
use crate::contrastive::{cosine_similarity, interleave_views, nt_xent, ContrastiveError};
use crate::encoder::{
    cross_entropy, encoder_forward, probe_forward, projection_forward, EncoderConfig, EncoderError, EncoderParams, Mode,
};

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrastive(#[from] ContrastiveError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seeds: u64,
    /// Relative-error bound for operators and pipelines.
    pub tolerance: f64,
    /// Relative-error bound for checks of a loss against its direct input.
    pub loss_tolerance: f64,
    /// Replaces both bounds when set.
    pub tolerance_override: Option<f64>,
    pub step: f64,
    pub fault: Option<GradientFault>,
    /// Runs only the named checks when non-empty.
    pub only: Vec<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            tolerance: 1e-4,
            loss_tolerance: 1e-6,
            tolerance_override: None,
            step: 1e-6,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Operator,
    Loss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }

    /// Error as a multiple of the tolerance.
    pub fn ratio(&self) -> f64 {
        self.report.max_rel_error / self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    /// The result closest to (or furthest past) its tolerance.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.results.iter().max_by(|a, b| a.ratio().total_cmp(&b.ratio()))
    }

    /// Largest error per check name, in suite order.
    pub fn per_check(&self) -> Vec<(&'static str, f64, f64)> {
        let mut out: Vec<(&'static str, f64, f64)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|(n, _, _)| *n == r.name) {
                Some(e) => e.1 = e.1.max(r.report.max_rel_error),
                None => out.push((r.name, r.report.max_rel_error, r.tolerance)),
            }
        }
        out
    }
}

type CheckFn = fn(&mut ChaCha8Rng, &SuiteOptions) -> Result<GradCheckReport, SuiteError>;

/// Names of all checks, in the order they run.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _, _)| *n).collect()
}

pub fn run_gradient_suite(opts: &SuiteOptions) -> Result<SuiteReport, SuiteError> {
    let mut report = SuiteReport::default();
    for (k, (name, kind, check)) in CHECKS.iter().enumerate() {
        if !opts.only.is_empty() && !opts.only.iter().any(|o| o == name) {
            continue;
        }
        let tolerance = opts.tolerance_override.unwrap_or(match kind {
            Kind::Operator => opts.tolerance,
            Kind::Loss => opts.loss_tolerance,
        });
        for seed in 0..opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let r = check(&mut rng, opts)?;
            log::debug!("{name} seed {seed}: {:.3e}", r.max_rel_error);
            report.results.push(CheckResult {
                name,
                seed,
                tolerance,
                report: r,
            });
        }
    }
    Ok(report)
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn uniforms(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(Open01)).collect()
}

/// `sum(out * w)` with fixed random weights, so every output coordinate
/// contributes to the checked gradient.
fn weighted<'t>(out: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>, SuiteError> {
    Ok(out.mul(out.tape().constant(w.clone()))?.sum())
}

fn run<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &SuiteOptions,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, SuiteError>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, SuiteError>,
{
    grad_check_inputs(
        f,
        inputs,
        GradCheckOptions {
            step: opts.step,
            max_coords,
        },
    )
}

fn unary(
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    lo: f64,
    hi: f64,
    op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>, SuiteError>,
) -> Result<GradCheckReport, SuiteError> {
    let x = away_from_zero(rng, &[3, 5], lo, hi);
    let w = tensor(rng, &[3, 5], -1.0, 1.0);
    run(|_, v| weighted(op(v[0])?, &w), &[x], opts, None)
}

type BinaryOp = for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>, AutodiffError>;

fn binary(rng: &mut ChaCha8Rng, opts: &SuiteOptions, op: BinaryOp) -> Result<GradCheckReport, SuiteError> {
    let a = tensor(rng, &[2, 3, 4], -2.0, 2.0);
    let b = away_from_zero(rng, &[1, 3, 1], 0.5, 2.0);
    let w = tensor(rng, &[2, 3, 4], -1.0, 1.0);
    run(|_, v| weighted(op(v[0], v[1])?, &w), &[a, b], opts, None)
}

fn reduction(
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>, AutodiffError>,
) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[2, 3, 4], -2.0, 2.0);
    let out_shape = {
        let tape = Tape::new();
        op(tape.constant(x.clone()))?.shape()
    };
    let w = tensor(rng, &out_shape, -1.0, 1.0);
    run(|_, v| weighted(op(v[0])?, &w), &[x], opts, None)
}

fn sample_signal(rng: &mut ChaCha8Rng, n: usize, c: usize, l: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * c * l);
    for _ in 0..n * c {
        let f = rng.gen_range(1.0..3.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise: Vec<f64> = (0..l).map(|_| rng.gen_range(-0.1..0.1)).collect();
        data.extend((0..l).map(|t| (std::f64::consts::TAU * f * t as f64 / l as f64 + phase).sin() + noise[t]));
    }
    Tensor::new(vec![n, c, l], data).expect("shape")
}

fn check_jitter(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let (n, c, l) = (2, 2, 12);
    let x = sample_signal(rng, n, c, l);
    let raw = Tensor::scalar(rng.gen_range(-2.0..2.0));
    let eps = uniforms(rng, n * c * l);
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    let eta = AugmentBounds::default().eta;
    let fault = opts.fault;
    run(
        |_, v| {
            let mut sigma = v[1].logistic().mul_scalar(eta);
            if fault == Some(GradientFault::FlipJitterSign) {
                sigma = sigma.grad_reverse();
            }
            weighted(jitter(v[0], sigma, &eps)?, &w)
        },
        &[x, raw],
        opts,
        None,
    )
}

fn check_scale(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let (n, c, l) = (2, 2, 12);
    let x = sample_signal(rng, n, c, l);
    let raw = Tensor::scalar(rng.gen_range(-2.0..2.0));
    let eps = uniforms(rng, n * c);
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    run(
        |_, v| weighted(scale(v[0], v[1].logistic().mul_scalar(0.05), &eps)?, &w),
        &[x, raw],
        opts,
        None,
    )
}

fn mag_warp_check(rng: &mut ChaCha8Rng, opts: &SuiteOptions, mode: MagWarpMode) -> Result<GradCheckReport, SuiteError> {
    let (n, c, l, k) = (2, 2, 20, 8);
    let x = sample_signal(rng, n, c, l);
    let raw = Tensor::scalar(rng.gen_range(-2.0..2.0));
    let eps = uniforms(rng, n * c * k);
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    run(
        |_, v| weighted(mag_warp(v[0], v[1].logistic().mul_scalar(0.05), &eps, k, mode)?, &w),
        &[x, raw],
        opts,
        None,
    )
}

fn check_mag_warp(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    mag_warp_check(rng, opts, MagWarpMode::Multiplicative)
}

fn check_mag_warp_additive(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    mag_warp_check(rng, opts, MagWarpMode::Additive)
}

fn check_time_distort(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let (n, c, l, m) = (2, 1, 16, 6);
    let x = sample_signal(rng, n, c, l);
    let weights = tensor(rng, &[m], -0.5, 0.5);
    let means = tensor(rng, &[m], -0.8, 0.8);
    let scales = tensor(rng, &[m], -1.5, -0.5);
    let select = uniforms(rng, n * c * l * m);
    let normal = uniforms(rng, n * c * l * m);
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    let temperature = AugmentBounds::default().temperature;
    run(
        |_, v| {
            let gmm = GmmVars {
                log_weights: log_softmax_last(v[1])?,
                means: v[2].tanh(),
                scales: v[3].exp(),
            };
            weighted(time_distort(v[0], gmm, &select, &normal, temperature)?.view, &w)
        },
        &[x, weights, means, scales],
        opts,
        None,
    )
}

fn check_permute(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let (n, c, l, k) = (2, 2, 20, 5);
    let x = sample_signal(rng, n, c, l);
    let raw = rng.gen_range(-2.0..2.0);
    let ranks = uniforms(rng, n * k);
    let relaxed = relaxed_segments(raw, k);
    let anchor = SegmentAnchor {
        count: hard_segments(relaxed, k),
        relaxed,
    };
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    run(
        |_, v| {
            let r = v[1].logistic().mul_scalar((k - 1) as f64).add_scalar(1.0);
            weighted(permute(v[0], r, k, &ranks, Some(anchor))?.view, &w)
        },
        &[x, Tensor::scalar(raw)],
        opts,
        None,
    )
}

fn check_reparam_normal(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let mu = Tensor::scalar(rng.gen_range(-1.0..1.0));
    let sigma = Tensor::scalar(rng.gen_range(0.1..1.0));
    let eps = uniforms(rng, 6);
    let w = tensor(rng, &[2, 3], -1.0, 1.0);
    run(
        |_, v| weighted(reparam_normal(v[0], v[1], &eps, vec![2, 3])?, &w),
        &[mu, sigma],
        opts,
        None,
    )
}

fn check_reparam_uniform(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let low = Tensor::scalar(rng.gen_range(-1.0..0.0));
    let high = Tensor::scalar(rng.gen_range(0.5..1.5));
    let eps = uniforms(rng, 6);
    let w = tensor(rng, &[6], -1.0, 1.0);
    run(
        |_, v| weighted(reparam_uniform(v[0], v[1], &eps, vec![6])?, &w),
        &[low, high],
        opts,
        None,
    )
}

fn check_relaxed_bernoulli(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let p = Tensor::scalar(rng.gen_range(0.2..0.8));
    let eps = uniforms(rng, 6);
    let w = tensor(rng, &[6], -1.0, 1.0);
    run(
        |_, v| {
            weighted(
                reparam_relaxed_bernoulli(v[0], 0.5, &eps, vec![6], BernoulliLogit::Odds)?.sample,
                &w,
            )
        },
        &[p],
        opts,
        None,
    )
}

fn random_augment(rng: &mut ChaCha8Rng, bounds: &AugmentBounds) -> Result<AugmentParams<f64>, SuiteError> {
    let mut p = AugmentParams::new(bounds.clone())?;
    p.raw_sigma_jitter = rng.gen_range(-2.0..2.0);
    p.raw_sigma_scale = rng.gen_range(-2.0..2.0);
    p.raw_sigma_magw = rng.gen_range(-2.0..2.0);
    p.raw_perm = rng.gen_range(-2.0..2.0);
    for v in p.gmm_weights_raw.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    for v in p.gmm_means_raw.iter_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    for v in p.gmm_scales_raw.iter_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    Ok(p)
}

fn augment_vars<'t>(v: &[Var<'t, f64>], bounds: &AugmentBounds) -> AugmentVars<'t, f64> {
    AugmentVars {
        raw_sigma_jitter: v[0],
        raw_sigma_scale: v[1],
        raw_sigma_magw: v[2],
        raw_perm: v[3],
        gmm_weights_raw: v[4],
        gmm_means_raw: v[5],
        gmm_scales_raw: v[6],
        bounds: bounds.clone(),
    }
}

fn anchor_for(p: &AugmentParams<f64>) -> SegmentAnchor {
    let k = p.bounds.max_segments;
    let relaxed = relaxed_segments(p.raw_perm, k);
    SegmentAnchor {
        count: hard_segments(relaxed, k),
        relaxed,
    }
}

fn check_leaves(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let bounds = AugmentBounds::default();
    let (n, c, l) = (2, 2, 24);
    let x = sample_signal(rng, n, c, l);
    let params = random_augment(rng, &bounds)?;
    let noise = NoiseBundle::generate(rng.gen(), noise_shape(n, c, l, &bounds));
    let w = tensor(rng, &[n, c, l], -1.0, 1.0);
    let lopts = LeavesOptions {
        segment_anchor: Some(anchor_for(&params)),
        fault: opts.fault,
        ..LeavesOptions::default()
    };
    run(
        |tape, v| {
            let vars = augment_vars(v, &bounds);
            weighted(
                leaves_forward(tape.constant(x.clone()), &vars, &noise, &lopts)?.view,
                &w,
            )
        },
        &params.to_tensors(),
        opts,
        None,
    )
}

fn small_encoder(rng: &mut ChaCha8Rng, channels: usize) -> Result<EncoderParams<f64>, SuiteError> {
    let cfg = EncoderConfig {
        channels_in: channels,
        widths: vec![3, 4],
        stem_kernel: 5,
        kernel: 3,
        embedding_dim: 4,
        projection_dim: 3,
        classes: 2,
    };
    let mut p = EncoderParams::init(cfg, rng.gen())?;
    // non-trivial norm and probe parameters
    for (name, t) in p.config.layout().into_iter().zip(p.tensors.iter_mut()) {
        if name.0.ends_with("gamma")
            || name.0.ends_with("beta")
            || name.0.starts_with("probe")
            || name.0.ends_with("bias")
        {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    for run in p.running.iter_mut() {
        for v in run.mean.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        for v in run.var.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
    }
    Ok(p)
}

fn encoder_check(rng: &mut ChaCha8Rng, opts: &SuiteOptions, mode: Mode) -> Result<GradCheckReport, SuiteError> {
    let params = small_encoder(rng, 2)?;
    let x = sample_signal(rng, 3, 2, 16);
    let w = tensor(rng, &[3, 4], -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(params.tensors.iter().cloned());
    let names = params.names();
    run(
        |_, v| {
            let mut p = params.clone();
            p.tensors = v[1..].iter().map(|t| (*t.value()).clone()).collect();
            let vars = crate::encoder::EncoderVars::from_parts(v[1..].to_vec(), names.clone());
            weighted(encoder_forward(v[0], &p, &vars, mode)?.embedding, &w)
        },
        &inputs,
        opts,
        Some(12),
    )
}

fn check_encoder_train(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    encoder_check(rng, opts, Mode::Train)
}

fn check_encoder_eval(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    encoder_check(rng, opts, Mode::Eval)
}

fn check_heads(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let params = small_encoder(rng, 1)?;
    let z = tensor(rng, &[3, 4], -1.0, 1.0);
    let w = tensor(rng, &[3, 3], -1.0, 1.0);
    let wp = tensor(rng, &[3, 2], -1.0, 1.0);
    let mut inputs = vec![z];
    inputs.extend(params.tensors.iter().cloned());
    let names = params.names();
    run(
        |_, v| {
            let vars = crate::encoder::EncoderVars::from_parts(v[1..].to_vec(), names.clone());
            let a = weighted(projection_forward(v[0], &vars)?, &w)?;
            let b = weighted(probe_forward(v[0], &vars)?, &wp)?;
            Ok(a.add(b)?)
        },
        &inputs,
        opts,
        Some(12),
    )
}

fn check_cosine(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let a = tensor(rng, &[6], -1.0, 1.0);
    let b = tensor(rng, &[6], -1.0, 1.0);
    run(|_, v| Ok(cosine_similarity(v[0], v[1])?), &[a, b], opts, None)
}

fn check_nt_xent(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let n = [2, 4, 8][rng.gen_range(0..3)];
    let d = [4, 16][rng.gen_range(0..2)];
    let z = tensor(rng, &[2 * n, d], -1.0, 1.0);
    run(
        |_, v| Ok(nt_xent(&crate::contrastive::EmbeddingBatch::new(v[0], 0.05)?)?),
        &[z],
        opts,
        None,
    )
}

fn check_cross_entropy(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let logits = tensor(rng, &[5, 3], -2.0, 2.0);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    run(|_, v| Ok(cross_entropy(v[0], &labels)?), &[logits], opts, None)
}

/// Augmentation parameters and encoder weights through two views, the
/// encoder, the projection head and the contrastive loss.
fn check_pipeline(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let bounds = AugmentBounds::default();
    let (n, c, l) = (3, 1, 16);
    let x = sample_signal(rng, n, c, l);
    let aug = random_augment(rng, &bounds)?;
    let enc = small_encoder(rng, c)?;
    let shape = noise_shape(n, c, l, &bounds);
    let na = NoiseBundle::generate(rng.gen(), shape);
    let nb = NoiseBundle::generate(rng.gen(), shape);
    let lopts = LeavesOptions {
        segment_anchor: Some(anchor_for(&aug)),
        fault: opts.fault,
        ..LeavesOptions::default()
    };
    let mut inputs = aug.to_tensors();
    let split = inputs.len();
    inputs.extend(enc.tensors.iter().cloned());
    let names = enc.names();
    run(
        |tape, v| {
            let avars = augment_vars(&v[..split], &bounds);
            let evars = crate::encoder::EncoderVars::from_parts(v[split..].to_vec(), names.clone());
            let mut p = enc.clone();
            p.tensors = v[split..].iter().map(|t| (*t.value()).clone()).collect();
            let xv = tape.constant(x.clone());
            let va = leaves_forward(xv, &avars, &na, &lopts)?.view;
            let vb = leaves_forward(xv, &avars, &nb, &lopts)?.view;
            let both = tape.concat_rows(&[va, vb])?;
            let h = projection_forward(encoder_forward(both, &p, &evars, Mode::Train)?.embedding, &evars)?;
            let ha = h.select_rows(Rc::new((0..n).collect()))?;
            let hb = h.select_rows(Rc::new((n..2 * n).collect()))?;
            Ok(nt_xent(&interleave_views(ha, hb, 0.05)?)?)
        },
        &inputs,
        opts,
        Some(6),
    )
}

fn check_conv1d(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[2, 3, 11], -1.0, 1.0);
    let k = tensor(rng, &[4, 3, 3], -1.0, 1.0);
    let w = tensor(rng, &[2, 4, 6], -1.0, 1.0);
    run(|_, v| weighted(v[0].conv1d(v[1], 2, 1)?, &w), &[x, k], opts, None)
}

fn check_matmul(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let a = tensor(rng, &[3, 4], -1.0, 1.0);
    let b = tensor(rng, &[4, 2], -1.0, 1.0);
    let w = tensor(rng, &[2, 3], -1.0, 1.0);
    run(
        |_, v| weighted(v[0].matmul(v[1])?.transpose()?, &w),
        &[a, b],
        opts,
        None,
    )
}

fn check_reshape(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[2, 6], -1.0, 1.0);
    let w = tensor(rng, &[3, 4], -1.0, 1.0);
    run(|_, v| weighted(v[0].reshape(vec![3, 4])?, &w), &[x], opts, None)
}

fn check_interp1d(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[2, 1, 10], -1.0, 1.0);
    let locs = tensor(rng, &[2, 1, 7], -0.95, 0.95);
    let w = tensor(rng, &[2, 1, 7], -1.0, 1.0);
    run(|_, v| weighted(v[0].interp1d(v[1])?, &w), &[x, locs], opts, None)
}

fn check_gather(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[2, 5], -1.0, 1.0);
    let index: Vec<usize> = (0..2 * 7).map(|_| rng.gen_range(0..5)).collect();
    let index = Rc::new(index);
    let w = tensor(rng, &[2, 7], -1.0, 1.0);
    run(
        |_, v| weighted(v[0].gather_last(index.clone(), 7)?, &w),
        &[x],
        opts,
        None,
    )
}

fn check_sort(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[3, 6], -1.0, 1.0);
    let w = tensor(rng, &[3, 6], -1.0, 1.0);
    run(|_, v| weighted(v[0].sort_last()?.0, &w), &[x], opts, None)
}

fn check_rows(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let a = tensor(rng, &[2, 3], -1.0, 1.0);
    let b = tensor(rng, &[3, 3], -1.0, 1.0);
    let w = tensor(rng, &[4, 3], -1.0, 1.0);
    run(
        |tape, v| {
            let both = tape.concat_rows(&[v[0], v[1]])?;
            weighted(both.select_rows(Rc::new(vec![4, 0, 2, 0]))?, &w)
        },
        &[a, b],
        opts,
        None,
    )
}

fn check_grad_reverse(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    let x = tensor(rng, &[4], -1.0, 1.0);
    let w = tensor(rng, &[4], -1.0, 1.0);
    run(
        |_, v| weighted(v[0].grad_reverse().grad_reverse(), &w),
        &[x],
        opts,
        None,
    )
}

macro_rules! unary_check {
    ($name:ident, $lo:expr, $hi:expr, $op:expr) => {
        fn $name(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
            unary(rng, opts, $lo, $hi, $op)
        }
    };
}

unary_check!(check_exp, 0.1, 2.0, |x| Ok(x.exp()));
unary_check!(check_log, 0.5, 2.0, |x| Ok(x.square().log()?));
unary_check!(check_sqrt, 0.5, 2.0, |x| Ok(x.square().sqrt()?));
unary_check!(check_tanh, 0.1, 2.0, |x| Ok(x.tanh()));
unary_check!(check_relu, 0.1, 2.0, |x| Ok(x.relu()));
unary_check!(check_logistic, 0.1, 3.0, |x| Ok(x.logistic()));
unary_check!(check_neg, 0.1, 2.0, |x| Ok(x.neg()));
unary_check!(check_affine, 0.1, 2.0, |x| Ok(x.mul_scalar(-1.7).add_scalar(0.3)));
unary_check!(check_softmax, 0.1, 2.0, |x| Ok(softmax_last(x)?));
unary_check!(check_log_softmax, 0.1, 2.0, |x| Ok(log_softmax_last(x)?));

fn check_add(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    binary(rng, opts, |a, b| a.add(b))
}
fn check_sub(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    binary(rng, opts, |a, b| a.sub(b))
}
fn check_mul(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    binary(rng, opts, |a, b| a.mul(b))
}
fn check_div(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    binary(rng, opts, |a, b| a.div(b))
}
fn check_sum(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    reduction(rng, opts, |x| x.sum_axis(1, true))
}
fn check_mean(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    reduction(rng, opts, |x| x.mean_axis(2, false))
}
fn check_max(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradCheckReport, SuiteError> {
    reduction(rng, opts, |x| x.max_axis(0, false))
}

static CHECKS: &[(&str, Kind, CheckFn)] = &[
    ("add", Kind::Operator, check_add),
    ("sub", Kind::Operator, check_sub),
    ("mul", Kind::Operator, check_mul),
    ("div", Kind::Operator, check_div),
    ("affine", Kind::Operator, check_affine),
    ("neg", Kind::Operator, check_neg),
    ("exp", Kind::Operator, check_exp),
    ("log", Kind::Operator, check_log),
    ("sqrt", Kind::Operator, check_sqrt),
    ("tanh", Kind::Operator, check_tanh),
    ("relu", Kind::Operator, check_relu),
    ("logistic", Kind::Operator, check_logistic),
    ("softmax", Kind::Operator, check_softmax),
    ("log_softmax", Kind::Operator, check_log_softmax),
    ("sum_axis", Kind::Operator, check_sum),
    ("mean_axis", Kind::Operator, check_mean),
    ("max_axis", Kind::Operator, check_max),
    ("matmul", Kind::Operator, check_matmul),
    ("reshape", Kind::Operator, check_reshape),
    ("conv1d", Kind::Operator, check_conv1d),
    ("interp1d", Kind::Operator, check_interp1d),
    ("gather_last", Kind::Operator, check_gather),
    ("sort_last", Kind::Operator, check_sort),
    ("concat_select_rows", Kind::Operator, check_rows),
    ("grad_reverse", Kind::Operator, check_grad_reverse),
    ("reparam_normal", Kind::Operator, check_reparam_normal),
    ("reparam_uniform", Kind::Operator, check_reparam_uniform),
    ("relaxed_bernoulli", Kind::Operator, check_relaxed_bernoulli),
    ("jitter", Kind::Operator, check_jitter),
    ("scale", Kind::Operator, check_scale),
    ("mag_warp", Kind::Operator, check_mag_warp),
    ("mag_warp_additive", Kind::Operator, check_mag_warp_additive),
    ("time_distort", Kind::Operator, check_time_distort),
    ("permute", Kind::Operator, check_permute),
    ("leaves", Kind::Operator, check_leaves),
    ("encoder_train", Kind::Operator, check_encoder_train),
    ("encoder_eval", Kind::Operator, check_encoder_eval),
    ("heads", Kind::Operator, check_heads),
    ("cosine_similarity", Kind::Operator, check_cosine),
    ("nt_xent", Kind::Loss, check_nt_xent),
    ("cross_entropy", Kind::Loss, check_cross_entropy),
    ("pipeline", Kind::Operator, check_pipeline),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_on_a_few_seeds() {
        let opts = SuiteOptions {
            seeds: 3,
            ..SuiteOptions::default()
        };
        let report = run_gradient_suite(&opts).unwrap();
        let worst = report.worst().unwrap();
        assert!(report.passed(), "{worst:?}");
        assert_eq!(report.results.len(), 3 * check_names().len());
    }

    #[test]
    fn jitter_fault_is_detected_by_name() {
        let opts = SuiteOptions {
            seeds: 2,
            fault: Some(GradientFault::FlipJitterSign),
            only: vec!["jitter".into(), "scale".into()],
            ..SuiteOptions::default()
        };
        let report = run_gradient_suite(&opts).unwrap();
        let failing: Vec<&str> = report.failures().iter().map(|r| r.name).collect();
        assert!(failing.contains(&"jitter"));
        assert!(!failing.contains(&"scale"));
    }

    #[test]
    fn impossible_tolerance_fails() {
        let opts = SuiteOptions {
            seeds: 1,
            tolerance_override: Some(1e-12),
            only: vec!["time_distort".into()],
            ..SuiteOptions::default()
        };
        assert!(!run_gradient_suite(&opts).unwrap().passed());
    }
}
