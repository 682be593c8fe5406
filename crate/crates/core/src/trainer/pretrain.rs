use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    faithfulness_proxy, fixed_intensity_view, leaves_forward, noise_shape, AugmentParams, AugmentVars, FixedIntensity,
    LeavesOptions, NoiseBundle,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::contrastive::{interleave_views, nt_xent};
use crate::data::{batches, Dataset, LastBatch};
use crate::encoder::{
    encoder_forward, projection_forward, EncoderParams, EncoderVars, Mode, RunningStats, BN_MOMENTUM,
};
use crate::scalar::Scalar;

use super::adam::{adam_step, OptimizerState};
use super::runlog::{EpochRecord, RunLog, StepRecord};
use super::{TrainConfig, TrainError};

/// Stream of the noise-seed generator, kept apart from batch shuffling.
const NOISE_STREAM: u64 = 0x6e6f697365;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutput<S> {
    pub encoder: EncoderParams<S>,
    pub augment: AugmentParams<S>,
    pub log: RunLog,
}

/// Contrastive loss of two encoded views of the same batch.
fn view_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    a: Var<'t, S>,
    b: Var<'t, S>,
    enc: &EncoderParams<S>,
    vars: &EncoderVars<'t, S>,
    temperature: f64,
) -> Result<(Var<'t, S>, Vec<RunningStats<S>>), TrainError> {
    let n = a.shape()[0];
    let both = tape.concat_rows(&[a, b])?;
    let out = encoder_forward(both, enc, vars, Mode::Train)?;
    let h = projection_forward(out.embedding, vars)?;
    let ha = h.select_rows(Rc::new((0..n).collect()))?;
    let hb = h.select_rows(Rc::new((n..2 * n).collect()))?;
    let loss = nt_xent(&interleave_views(ha, hb, temperature)?)?;
    Ok((loss, out.batch_stats))
}

/// Tape leaves of the augmentation parameters, and the copies used in the
/// forward pass, which reverse the gradient sign.
fn reversed_vars<'t, S: Scalar>(aug: &AugmentParams<S>, tape: &'t Tape<S>) -> (AugmentVars<'t, S>, AugmentVars<'t, S>) {
    let leaves = aug.bind(tape);
    let rev = AugmentVars {
        raw_sigma_jitter: leaves.raw_sigma_jitter.grad_reverse(),
        raw_sigma_scale: leaves.raw_sigma_scale.grad_reverse(),
        raw_sigma_magw: leaves.raw_sigma_magw.grad_reverse(),
        raw_perm: leaves.raw_perm.grad_reverse(),
        gmm_weights_raw: leaves.gmm_weights_raw.grad_reverse(),
        gmm_means_raw: leaves.gmm_means_raw.grad_reverse(),
        gmm_scales_raw: leaves.gmm_scales_raw.grad_reverse(),
        bounds: leaves.bounds.clone(),
    };
    (leaves, rev)
}

struct StepResult<S> {
    loss: f64,
    encoder_grads: Vec<Tensor<S>>,
    /// Already sign-reversed: descending on these ascends the loss.
    augment_grads: Vec<Tensor<S>>,
    batch_stats: Vec<RunningStats<S>>,
    view: Tensor<S>,
}

fn leaves_step<S: Scalar>(
    enc: &EncoderParams<S>,
    aug: &AugmentParams<S>,
    x: &Tensor<S>,
    noise: (&NoiseBundle, &NoiseBundle),
    config: &TrainConfig,
) -> Result<StepResult<S>, TrainError> {
    let tape = Tape::new();
    let vars = enc.bind(&tape);
    let (leaves, rev) = reversed_vars(aug, &tape);
    let opts = LeavesOptions {
        mag_warp_mode: config.mag_warp_mode,
        ..LeavesOptions::default()
    };
    let xv = tape.constant(x.clone());
    let va = leaves_forward(xv, &rev, noise.0, &opts)?;
    let vb = leaves_forward(xv, &rev, noise.1, &opts)?;
    let (loss, batch_stats) = view_loss(&tape, va.view, vb.view, enc, &vars, config.temperature)?;
    let grads = tape.backward(loss)?;
    Ok(StepResult {
        loss: loss.value().data()[0].as_f64(),
        encoder_grads: vars.vars.iter().map(|&v| grads.wrt(v)).collect(),
        augment_grads: leaves.all().iter().map(|&v| grads.wrt(v)).collect(),
        batch_stats,
        view: (*va.view.value()).clone(),
    })
}

/// Contrastive loss for fixed parameters and noise, without gradients.
pub fn contrastive_loss<S: Scalar>(
    enc: &EncoderParams<S>,
    aug: &AugmentParams<S>,
    x: &Tensor<S>,
    noise: (&NoiseBundle, &NoiseBundle),
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let vars = enc.bind(&tape);
    let av = aug.bind(&tape);
    let opts = LeavesOptions {
        mag_warp_mode: config.mag_warp_mode,
        ..LeavesOptions::default()
    };
    let xv = tape.constant(x.clone());
    let va = leaves_forward(xv, &av, noise.0, &opts)?;
    let vb = leaves_forward(xv, &av, noise.1, &opts)?;
    let (loss, _) = view_loss(&tape, va.view, vb.view, enc, &vars, config.temperature)?;
    let v = loss.value().data()[0].as_f64();
    Ok(v)
}

/// Probe learning rate: small enough for first-order behaviour, see
/// [`adversarial_probe`].
pub const PROBE_LR: f64 = 1e-5;

/// Losses around one frozen-noise step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub loss: f64,
    /// After updating only the augmentation parameters.
    pub after_augment_step: f64,
    /// After updating only the encoder.
    pub after_encoder_step: f64,
}

/// Applies a single Adam update of each player with learning rate `lr`,
/// separately and from fresh optimizer state, and re-evaluates the loss with
/// the same noise.
///
/// A fresh Adam step moves every coordinate by about `lr`, so `lr` must be
/// small enough for the loss to be locally linear: the relaxed categorical
/// draw at temperature 0.01 makes the mixture-weight curvature of order 1e4.
pub fn adversarial_probe<S: Scalar>(
    enc: &EncoderParams<S>,
    aug: &AugmentParams<S>,
    x: &Tensor<S>,
    noise: (&NoiseBundle, &NoiseBundle),
    config: &TrainConfig,
    lr: f64,
) -> Result<ProbeOutcome, TrainError> {
    let step = leaves_step(enc, aug, x, noise, config)?;

    let mut aug_t = aug.to_tensors();
    let mut st = OptimizerState::new(&aug_t);
    adam_step(&mut aug_t, &step.augment_grads, &mut st, lr)?;
    let mut aug_next = aug.clone();
    aug_next.set_from_tensors(&aug_t)?;

    let mut enc_next = enc.clone();
    let mut st = OptimizerState::new(&enc_next.tensors);
    adam_step(&mut enc_next.tensors, &step.encoder_grads, &mut st, lr)?;

    Ok(ProbeOutcome {
        loss: step.loss,
        after_augment_step: contrastive_loss(enc, &aug_next, x, noise, config)?,
        after_encoder_step: contrastive_loss(&enc_next, aug, x, noise, config)?,
    })
}

/// `(N, D)` embeddings in evaluation mode, computed in chunks.
pub fn embed<S: Scalar>(enc: &EncoderParams<S>, data: &Dataset<S>) -> Result<Tensor<S>, TrainError> {
    let mut out = Vec::new();
    let mut d = 0;
    for idx in batches(data.len(), 64, None, LastBatch::Keep) {
        let tape = Tape::new();
        let vars = enc.bind(&tape);
        let z = encoder_forward(tape.constant(data.gather(&idx)), enc, &vars, Mode::Eval)?.embedding;
        d = z.shape()[1];
        out.extend_from_slice(z.value().data());
    }
    Ok(Tensor::new(vec![data.len(), d], out)?)
}

/// Leave-one-out 1-nearest-neighbour accuracy under cosine similarity.
pub fn knn_accuracy<S: Scalar>(embeddings: &Tensor<S>, labels: &[usize]) -> f64 {
    let d = embeddings.shape()[1];
    let rows: Vec<Vec<f64>> = embeddings
        .data()
        .chunks(d)
        .map(|r| {
            let v: Vec<f64> = r.iter().map(|x| x.as_f64()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| {
            let mut best = (f64::NEG_INFINITY, i);
            for j in (0..n).filter(|&j| j != i) {
                let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, j);
                }
            }
            labels[best.1] == labels[i]
        })
        .count();
    hits as f64 / n as f64
}

fn check_data<S: Scalar>(data: &Dataset<S>, config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(TrainError::Config(format!(
            "{} samples cannot fill a batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    Ok(())
}

fn diverged(step: u64, log: &RunLog) -> TrainError {
    let last = log
        .steps()
        .last()
        .and_then(|r| serde_json::to_string(r).ok())
        .unwrap_or_else(|| "none".into());
    TrainError::Diverged { step, last }
}

fn abort(e: TrainError, step: u64, log: &RunLog) -> TrainError {
    if e.is_domain() {
        diverged(step, log)
    } else {
        e
    }
}

fn end_epoch<S: Scalar>(
    log: &mut RunLog,
    epoch: u64,
    losses: &[f64],
    enc: &EncoderParams<S>,
    eval: Option<&Dataset<S>>,
) -> Result<(), TrainError> {
    let knn = match eval {
        Some(ds) => Some(knn_accuracy(&embed(enc, ds)?, &ds.labels)),
        None => None,
    };
    log.push_epoch(EpochRecord {
        epoch,
        mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        knn_accuracy: knn,
    });
    Ok(())
}

/// Adversarial contrastive pretraining of the encoder and the augmentation
/// parameters. `eval`, when given, is embedded at the end of every epoch.
pub fn pretrain_adversarial<S: Scalar>(
    data: &Dataset<S>,
    config: &TrainConfig,
    eval: Option<&Dataset<S>>,
) -> Result<PretrainOutput<S>, TrainError> {
    check_data(data, config)?;
    let mut enc = EncoderParams::init(config.encoder_for(data.channels(), data.classes), config.seed)?;
    let mut aug = AugmentParams::new(config.bounds.clone())?;
    let mut enc_state = OptimizerState::new(&enc.tensors);
    let mut aug_state = OptimizerState::new(&aug.to_tensors());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut log = RunLog::new();
    let mut step = 0u64;
    'epochs: for epoch in 0..config.pretrain_epochs as u64 {
        let mut losses = Vec::new();
        for idx in batches(
            data.len(),
            config.batch_size,
            Some((config.seed, epoch)),
            LastBatch::Drop,
        ) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let x = data.gather(&idx);
            let shape = noise_shape(idx.len(), data.channels(), data.length(), &config.bounds);
            let na = NoiseBundle::generate(noise_rng.gen(), shape);
            let nb = NoiseBundle::generate(noise_rng.gen(), shape);
            let r = leaves_step(&enc, &aug, &x, (&na, &nb), config).map_err(|e| abort(e, step, &log))?;
            if !r.loss.is_finite() {
                return Err(diverged(step, &log));
            }
            adam_step(&mut enc.tensors, &r.encoder_grads, &mut enc_state, config.encoder_lr)?;
            let mut aug_t = aug.to_tensors();
            adam_step(&mut aug_t, &r.augment_grads, &mut aug_state, config.leaves_lr)?;
            aug.set_from_tensors(&aug_t)?;
            enc.update_running(&r.batch_stats, BN_MOMENTUM);
            if !(enc.is_finite() && aug.is_finite()) {
                return Err(diverged(step, &log));
            }
            let faith = faithfulness_proxy(&x, &r.view)?;
            log.push_step(StepRecord::new(step, epoch, r.loss, &aug, &faith))?;
            log::debug!("step {step} loss {:.6}", r.loss);
            losses.push(r.loss);
            step += 1;
        }
        end_epoch(&mut log, epoch, &losses, &enc, eval)?;
    }
    Ok(PretrainOutput {
        encoder: enc,
        augment: aug,
        log,
    })
}

/// Contrastive pretraining with hand-set augmentation intensities: one shared
/// `sigma` for jitter, scale, magnitude warp and time warp, and up to
/// `max_segments` permutation segments. Nothing but the encoder is learned.
pub fn pretrain_fixed<S: Scalar>(
    data: &Dataset<S>,
    config: &TrainConfig,
    sigma: f64,
    eval: Option<&Dataset<S>>,
) -> Result<(EncoderParams<S>, RunLog), TrainError> {
    check_data(data, config)?;
    let mut enc = EncoderParams::init(config.encoder_for(data.channels(), data.classes), config.seed)?;
    let mut state = OptimizerState::new(&enc.tensors);
    let fixed = FixedIntensity {
        sigma,
        max_segments: config.bounds.max_segments,
        knots: config.bounds.knots,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut log = RunLog::new();
    let mut step = 0u64;
    'epochs: for epoch in 0..config.pretrain_epochs as u64 {
        let mut losses = Vec::new();
        for idx in batches(
            data.len(),
            config.batch_size,
            Some((config.seed, epoch)),
            LastBatch::Drop,
        ) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let x = data.gather(&idx);
            let shape = noise_shape(idx.len(), data.channels(), data.length(), &config.bounds);
            let va = fixed_intensity_view(&x, fixed, &NoiseBundle::generate(noise_rng.gen(), shape))?;
            let vb = fixed_intensity_view(&x, fixed, &NoiseBundle::generate(noise_rng.gen(), shape))?;
            let tape = Tape::new();
            let vars = enc.bind(&tape);
            let (loss, stats) = view_loss(
                &tape,
                tape.constant(va.clone()),
                tape.constant(vb),
                &enc,
                &vars,
                config.temperature,
            )
            .map_err(|e| abort(e, step, &log))?;
            let value = loss.value().data()[0].as_f64();
            if !value.is_finite() {
                return Err(diverged(step, &log));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<S>> = vars.vars.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut enc.tensors, &g, &mut state, config.encoder_lr)?;
            enc.update_running(&stats, BN_MOMENTUM);
            if !enc.is_finite() {
                return Err(diverged(step, &log));
            }
            let faith = faithfulness_proxy(&x, &va)?;
            log.push_step(StepRecord {
                step,
                epoch,
                loss: value,
                sigma_jitter: sigma,
                sigma_scale: sigma,
                sigma_magw: sigma,
                segments: config.bounds.max_segments,
                segments_relaxed: config.bounds.max_segments as f64,
                gmm_mean_of_means: 0.0,
                gmm_mean_of_scales: 0.0,
                faithfulness_rmse: faith.rmse,
                faithfulness_corr: faith.mean_correlation(),
            })?;
            losses.push(value);
            step += 1;
        }
        end_epoch(&mut log, epoch, &losses, &enc, eval)?;
    }
    Ok((enc, log))
}
