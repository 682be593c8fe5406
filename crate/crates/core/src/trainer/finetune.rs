use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{batches, Dataset, LastBatch};
use crate::encoder::{cross_entropy, encoder_forward, probe_forward, EncoderParams, Mode, BN_MOMENTUM};
use crate::scalar::Scalar;

use super::adam::{adam_step, OptimizerState};
use super::metrics::{evaluate, Metrics};
use super::pretrain::embed;
use super::{TrainConfig, TrainError};

/// Separates fine-tuning batch order from pretraining batch order.
const FINETUNE_SALT: u64 = 0x66696e65;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Encoder and probe are trained together.
    #[default]
    Full,
    /// Only the probe is trained; encoder weights and statistics are frozen.
    ProbeOnly,
}

/// Class logits in evaluation mode.
pub fn predict<S: Scalar>(params: &EncoderParams<S>, data: &Dataset<S>) -> Result<Tensor<S>, TrainError> {
    let z = embed(params, data)?;
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let logits = probe_forward(tape.constant(z), &vars)?;
    Ok((*logits.value()).clone())
}

/// Cross-entropy training on `train`, then metrics on the held-out `test`.
pub fn finetune<S: Scalar>(
    pretrained: &EncoderParams<S>,
    train: &Dataset<S>,
    test: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(EncoderParams<S>, Metrics), TrainError> {
    config.validate()?;
    if train.class_counts().iter().filter(|&&k| k > 0).count() < 2 {
        return Err(TrainError::SingleClass);
    }
    if train.classes != pretrained.config.classes || test.classes != pretrained.config.classes {
        return Err(TrainError::Config(format!(
            "probe has {} classes, data has {}",
            pretrained.config.classes, train.classes
        )));
    }
    let mut params = pretrained.clone();
    let seed = config.seed ^ FINETUNE_SALT;
    match config.finetune_mode {
        FinetuneMode::Full => {
            let mut state = OptimizerState::new(&params.tensors);
            for epoch in 0..config.finetune_epochs as u64 {
                for idx in batches(train.len(), config.batch_size, Some((seed, epoch)), LastBatch::Keep) {
                    let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                    let tape = Tape::new();
                    let vars = params.bind(&tape);
                    let out = encoder_forward(tape.constant(train.gather(&idx)), &params, &vars, Mode::Train)?;
                    let loss = cross_entropy(probe_forward(out.embedding, &vars)?, &labels)?;
                    let grads = tape.backward(loss)?;
                    let g: Vec<Tensor<S>> = vars.vars.iter().map(|&v| grads.wrt(v)).collect();
                    adam_step(&mut params.tensors, &g, &mut state, config.finetune_lr)?;
                    params.update_running(&out.batch_stats, BN_MOMENTUM);
                }
            }
        }
        FinetuneMode::ProbeOnly => {
            let z = embed(&params, train)?;
            let d = z.shape()[1];
            let probe = params.probe_indices();
            let mut probe_t: Vec<Tensor<S>> = probe.iter().map(|&i| params.tensors[i].clone()).collect();
            let mut state = OptimizerState::new(&probe_t);
            for epoch in 0..config.finetune_epochs as u64 {
                for idx in batches(train.len(), config.batch_size, Some((seed, epoch)), LastBatch::Keep) {
                    let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                    let rows: Vec<S> = idx
                        .iter()
                        .flat_map(|&i| z.data()[i * d..(i + 1) * d].iter().copied())
                        .collect();
                    let tape = Tape::new();
                    let w = tape.param(probe_t[0].clone());
                    let b = tape.param(probe_t[1].clone());
                    let zb = tape.constant(Tensor::new(vec![idx.len(), d], rows)?);
                    let loss = cross_entropy(zb.matmul(w)?.add(b)?, &labels)?;
                    let grads = tape.backward(loss)?;
                    adam_step(
                        &mut probe_t,
                        &[grads.wrt(w), grads.wrt(b)],
                        &mut state,
                        config.finetune_lr,
                    )?;
                }
            }
            for (&i, t) in probe.iter().zip(probe_t) {
                params.tensors[i] = t;
            }
        }
    }
    if !params.is_finite() {
        return Err(TrainError::Diverged {
            step: 0,
            last: "fine-tuning produced non-finite weights".into(),
        });
    }
    let metrics = evaluate(&predict(&params, test)?, &test.labels)?;
    Ok((params, metrics))
}

/// The supervised-from-scratch reference: freshly initialized encoder,
/// full fine-tuning on the labelled data.
pub fn train_supervised<S: Scalar>(
    train: &Dataset<S>,
    test: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(EncoderParams<S>, Metrics), TrainError> {
    let init = EncoderParams::init(config.encoder_for(train.channels(), train.classes), config.seed)?;
    let cfg = TrainConfig {
        finetune_mode: super::FinetuneMode::Full,
        ..config.clone()
    };
    finetune(&init, train, test, &cfg)
}
