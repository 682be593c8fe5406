//! Small 1-D convolutional residual encoder with projection and probe heads.
//!
//! The stack is a stem convolution followed by residual blocks
//! (conv-BN-ReLU-conv-BN plus shortcut, then ReLU), global average pooling to
//! the embedding, a two-layer projection head used during contrastive
//! pretraining, and a single dense probe for classification.

mod checkpoint;

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input of length {got} is shorter than the minimum {min}")]
    InputTooShort { min: usize, got: usize },
    #[error("expected input shape (N, {channels}, L), got {got:?}")]
    InputShape { channels: usize, got: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels_in: usize,
    /// Output channels of each residual block; the first block keeps the
    /// stem's resolution and each later block halves it.
    pub widths: Vec<usize>,
    pub stem_kernel: usize,
    pub kernel: usize,
    /// Must equal the last block width (global average pooling).
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels_in: 1,
            widths: vec![16, 32, 64],
            stem_kernel: 7,
            kernel: 3,
            embedding_dim: 64,
            projection_dim: 32,
            classes: 2,
        }
    }
}

/// Stride of the stem convolution.
pub const STEM_STRIDE: usize = 2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.channels_in == 0 || self.classes == 0 || self.projection_dim == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("at least one block, all widths at least 1");
        }
        if self.stem_kernel.is_multiple_of(2) || self.kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd");
        }
        if self.embedding_dim != *self.widths.last().unwrap() {
            return bad("embedding_dim must equal the last block width");
        }
        if self.projection_dim > self.embedding_dim {
            return bad("projection_dim must not exceed embedding_dim");
        }
        Ok(())
    }

    fn block_stride(i: usize) -> usize {
        if i == 0 {
            1
        } else {
            2
        }
    }

    /// Shortest input whose every downsampling stage sees at least one full step.
    pub fn min_length(&self) -> usize {
        (1..self.widths.len()).fold(STEM_STRIDE, |acc, i| acc * Self::block_stride(i))
    }

    /// Named learnable tensors and their shapes, in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let w0 = self.widths[0];
        out.push(("stem.conv.weight".into(), vec![w0, self.channels_in, self.stem_kernel]));
        out.push(("stem.bn.gamma".into(), vec![w0]));
        out.push(("stem.bn.beta".into(), vec![w0]));
        let mut cin = w0;
        for (i, &w) in self.widths.iter().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.conv1.weight"), vec![w, cin, self.kernel]));
            out.push((format!("{p}.bn1.gamma"), vec![w]));
            out.push((format!("{p}.bn1.beta"), vec![w]));
            out.push((format!("{p}.conv2.weight"), vec![w, w, self.kernel]));
            out.push((format!("{p}.bn2.gamma"), vec![w]));
            out.push((format!("{p}.bn2.beta"), vec![w]));
            if w != cin || Self::block_stride(i) != 1 {
                out.push((format!("{p}.shortcut.weight"), vec![w, cin, 1]));
            }
            cin = w;
        }
        let (d, p) = (self.embedding_dim, self.projection_dim);
        out.push(("proj.fc1.weight".into(), vec![d, d]));
        out.push(("proj.fc1.bias".into(), vec![d]));
        out.push(("proj.fc2.weight".into(), vec![d, p]));
        out.push(("proj.fc2.bias".into(), vec![p]));
        out.push(("probe.weight".into(), vec![d, self.classes]));
        out.push(("probe.bias".into(), vec![self.classes]));
        out
    }

    /// Batch-norm layers in forward order, with their channel counts.
    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem.bn".to_string(), self.widths[0])];
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("block{i}.bn1"), w));
            out.push((format!("block{i}.bn2"), w));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Running batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S> {
    pub config: EncoderConfig,
    /// Learnable tensors, aligned with `config.layout()`.
    pub tensors: Vec<Tensor<S>>,
    /// Aligned with `config.norm_layers()`.
    pub running: Vec<RunningStats<S>>,
}

/// Whether batch norm uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<S: Scalar> EncoderParams<S> {
    /// Fan-in scaled uniform kernels, unit norm scales, zero offsets and
    /// biases, and a zero probe.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                if name.ends_with("gamma") {
                    Tensor::ones(shape)
                } else if name.ends_with("beta") || name.ends_with("bias") || name.starts_with("probe") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = if shape.len() == 3 {
                        shape[1] * shape[2]
                    } else {
                        shape[0]
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = (0..n).map(|_| S::lit(rng.gen_range(-bound..bound))).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
            })
            .collect();
        let running = config
            .norm_layers()
            .into_iter()
            .map(|(_, c)| RunningStats {
                mean: vec![S::zero(); c],
                var: vec![S::one(); c],
            })
            .collect();
        Ok(Self {
            config,
            tensors,
            running,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.config.layout().iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Indices of the probe tensors.
    pub fn probe_indices(&self) -> Vec<usize> {
        self.names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("probe."))
            .map(|(i, _)| i)
            .collect()
    }

    /// Records every learnable tensor as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> EncoderVars<'t, S> {
        EncoderVars {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
            names: self.names(),
        }
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running(&mut self, batch: &[RunningStats<S>], momentum: f64) {
        let m = S::lit(momentum);
        for (run, b) in self.running.iter_mut().zip(batch) {
            for (r, &v) in run.mean.iter_mut().zip(&b.mean) {
                *r = (S::one() - m) * *r + m * v;
            }
            for (r, &v) in run.var.iter_mut().zip(&b.var) {
                *r = (S::one() - m) * *r + m * v;
            }
        }
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars<'t, S: Scalar> {
    pub vars: Vec<Var<'t, S>>,
    names: Vec<String>,
}

impl<'t, S: Scalar> EncoderVars<'t, S> {
    /// Pairs tape variables with parameter names, in layout order.
    pub fn from_parts(vars: Vec<Var<'t, S>>, names: Vec<String>) -> Self {
        Self { vars, names }
    }

    fn get(&self, name: &str) -> Result<Var<'t, S>, EncoderError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| EncoderError::Config(format!("missing parameter {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

/// Embeddings plus the batch statistics observed in training mode.
#[derive(Clone, Debug)]
pub struct EncoderOutput<'t, S: Scalar> {
    pub embedding: Var<'t, S>,
    /// Empty in evaluation mode.
    pub batch_stats: Vec<RunningStats<S>>,
}

struct Forward<'a, 't, S: Scalar> {
    params: &'a EncoderParams<S>,
    vars: &'a EncoderVars<'t, S>,
    mode: Mode,
    layer: usize,
    stats: Vec<RunningStats<S>>,
}

impl<'t, S: Scalar> Forward<'_, 't, S> {
    fn batch_norm(&mut self, x: Var<'t, S>, prefix: &str) -> Result<Var<'t, S>, EncoderError> {
        let tape = x.tape();
        let gamma = self.vars.get(&format!("{prefix}.gamma"))?;
        let beta = self.vars.get(&format!("{prefix}.beta"))?;
        let c = gamma.value().len();
        let gamma = gamma.reshape(vec![1, c, 1])?;
        let beta = beta.reshape(vec![1, c, 1])?;
        let normalized = match self.mode {
            Mode::Train => {
                let mean = x.mean_axis(2, true)?.mean_axis(0, true)?;
                let centered = x.sub(mean)?;
                let var = centered.square().mean_axis(2, true)?.mean_axis(0, true)?;
                let shape = x.shape();
                let count = (shape[0] * shape[2]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                self.stats.push(RunningStats {
                    mean: mean.value().data().to_vec(),
                    var: var.value().data().iter().map(|&v| v * S::lit(unbias)).collect(),
                });
                centered.div(var.add_scalar(S::lit(BN_EPS)).sqrt()?)?
            }
            Mode::Eval => {
                let run = &self.params.running[self.layer];
                let mean = tape.constant(Tensor::new(vec![1, c, 1], run.mean.clone())?);
                let inv: Vec<S> = run
                    .var
                    .iter()
                    .map(|&v| S::one() / (v + S::lit(BN_EPS)).sqrt())
                    .collect();
                let inv = tape.constant(Tensor::new(vec![1, c, 1], inv)?);
                x.sub(mean)?.mul(inv)?
            }
        };
        self.layer += 1;
        Ok(normalized.mul(gamma)?.add(beta)?)
    }

    fn conv(&self, x: Var<'t, S>, name: &str, stride: usize) -> Result<Var<'t, S>, EncoderError> {
        let w = self.vars.get(name)?;
        let k = w.shape()[2];
        Ok(x.conv1d(w, stride, k / 2)?)
    }
}

fn dense<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>, EncoderError> {
    Ok(x.matmul(w)?.add(b)?)
}

/// Embeds a `(N, C, L)` batch into `(N, D)`.
pub fn encoder_forward<'t, S: Scalar>(
    x: Var<'t, S>,
    params: &EncoderParams<S>,
    vars: &EncoderVars<'t, S>,
    mode: Mode,
) -> Result<EncoderOutput<'t, S>, EncoderError> {
    let cfg = &params.config;
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != cfg.channels_in {
        return Err(EncoderError::InputShape {
            channels: cfg.channels_in,
            got: shape,
        });
    }
    if shape[2] < cfg.min_length() {
        return Err(EncoderError::InputTooShort {
            min: cfg.min_length(),
            got: shape[2],
        });
    }
    let mut f = Forward {
        params,
        vars,
        mode,
        layer: 0,
        stats: Vec::new(),
    };
    let h = f.conv(x, "stem.conv.weight", STEM_STRIDE)?;
    let mut h = f.batch_norm(h, "stem.bn")?.relu();
    for i in 0..cfg.widths.len() {
        let p = format!("block{i}");
        let stride = EncoderConfig::block_stride(i);
        let r = f.conv(h, &format!("{p}.conv1.weight"), stride)?;
        let r = f.batch_norm(r, &format!("{p}.bn1"))?.relu();
        let r = f.conv(r, &format!("{p}.conv2.weight"), 1)?;
        let r = f.batch_norm(r, &format!("{p}.bn2"))?;
        let shortcut = format!("{p}.shortcut.weight");
        let s = if vars.has(&shortcut) {
            f.conv(h, &shortcut, stride)?
        } else {
            h
        };
        h = r.add(s)?.relu();
    }
    let embedding = h.mean_axis(2, false)?;
    Ok(EncoderOutput {
        embedding,
        batch_stats: f.stats,
    })
}

/// Projection head: dense, ReLU, dense.
pub fn projection_forward<'t, S: Scalar>(z: Var<'t, S>, vars: &EncoderVars<'t, S>) -> Result<Var<'t, S>, EncoderError> {
    let h = dense(z, vars.get("proj.fc1.weight")?, vars.get("proj.fc1.bias")?)?.relu();
    dense(h, vars.get("proj.fc2.weight")?, vars.get("proj.fc2.bias")?)
}

/// Probe head: one dense layer to class logits.
pub fn probe_forward<'t, S: Scalar>(z: Var<'t, S>, vars: &EncoderVars<'t, S>) -> Result<Var<'t, S>, EncoderError> {
    dense(z, vars.get("probe.weight")?, vars.get("probe.bias")?)
}

/// Mean softmax cross-entropy of `(N, K)` logits against class labels.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, labels: &[usize]) -> Result<Var<'t, S>, EncoderError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&y| y >= shape[1]) {
        return Err(EncoderError::Config("labels do not match the logits".into()));
    }
    let logp = crate::autodiff::log_softmax_last(logits)?;
    let picked = logp.gather_last(std::rc::Rc::new(labels.to_vec()), 1)?;
    Ok(picked.mean().neg())
}
