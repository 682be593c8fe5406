//! Synthetic signals, CSV ingestion, stratified splits, normalization and
//! batching.
//!
//! CSV layout: one sample per row, the integer label first, then `C·L`
//! values in channel-major order (all of channel 0, then channel 1, ...).
//! An optional header row `label,c0_t0,c0_t1,...` is recognized and skipped.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::Open01;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::standard_normal;
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no data rows")]
    NoRows,
    #[error("line {line}: expected {expected} fields (label + C·L values), got {got}")]
    Ragged { line: u64, expected: usize, got: usize },
    #[error("line {line}: field {field} is not a number: {value:?}")]
    NonNumeric { line: u64, field: usize, value: String },
    #[error("line {line}: value at field {field} is not finite")]
    NonFinite { line: u64, field: usize },
    #[error("line {line}: label {label} outside [0, {classes})")]
    LabelOutOfRange { line: u64, label: String, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("class {class} has {count} samples; both splits need at least one")]
    ClassTooSmall { class: usize, count: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Labelled signals `(N, C, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub signals: Tensor<S>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channel_names: Vec<String>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(signals: Tensor<S>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        let shape = signals.shape().to_vec();
        if shape.len() != 3 {
            return Err(DataError::Invalid(format!("signals must be (N, C, L), got {shape:?}")));
        }
        if labels.len() != shape[0] {
            return Err(DataError::Invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                shape[0]
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::Invalid(format!("label {y} outside [0, {classes})")));
        }
        if !signals.is_finite() {
            return Err(DataError::Invalid("signals contain NaN or infinity".into()));
        }
        let channel_names = (0..shape[1]).map(|c| format!("c{c}")).collect();
        Ok(Self {
            signals,
            labels,
            classes,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.signals.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.signals.shape()[2]
    }

    /// Signals of the given samples, in order, as `(len, C, L)`.
    pub fn gather(&self, indices: &[usize]) -> Tensor<S> {
        let row = self.channels() * self.length();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.signals.data()[i * row..(i + 1) * row]);
        }
        Tensor::new(vec![indices.len(), self.channels(), self.length()], data).expect("gather shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            signals: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channel_names: self.channel_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            signals: self.signals.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Waveform family of the synthetic generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Waveform {
    #[default]
    Sine,
    /// A spike train at the class frequency with a flat baseline between
    /// beats: `max(0, sin(·))^SPIKE_POWER`.
    EcgLike,
}

/// Exponent that narrows each positive half-wave into a spike.
pub const SPIKE_POWER: i32 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub length: usize,
    pub channels: usize,
    /// Cycles per window for each class.
    pub base_frequencies: Vec<f64>,
    /// Each sample's frequency is scaled by `1 + u`, `u ~ U[-j, j]`.
    pub frequency_jitter: f64,
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub waveform: Waveform,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            samples_per_class: 150,
            length: 256,
            channels: 1,
            base_frequencies: vec![3.0, 4.0, 5.0],
            frequency_jitter: 0.1,
            amplitude_range: (0.5, 1.5),
            phase_range: (0.0, std::f64::consts::TAU),
            noise: 0.2,
            waveform: Waveform::Sine,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.classes == 0 || self.samples_per_class == 0 || self.length == 0 || self.channels == 0 {
            return bad("classes, samples, length and channels must be positive");
        }
        if self.base_frequencies.len() != self.classes {
            return bad("one base frequency per class");
        }
        let mut f = self.base_frequencies.clone();
        f.sort_by(f64::total_cmp);
        if f.windows(2).any(|w| w[0] == w[1]) {
            return bad("base frequencies must be distinct");
        }
        if self.amplitude_range.0 > self.amplitude_range.1 || self.phase_range.0 > self.phase_range.1 {
            return bad("ranges must have low <= high");
        }
        if !(self.noise >= 0.0 && self.frequency_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative");
        }
        Ok(())
    }
}

/// Generates `samples_per_class` samples per class, ordered by class.
///
/// Every channel of a sample shares the frequency and amplitude but draws its
/// own phase.
pub fn gen_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<Dataset<S>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, l) = (spec.channels, spec.length);
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * c * l);
    let mut labels = Vec::with_capacity(n);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.sample::<f64, _>(Open01);
    for (class, &f0) in spec.base_frequencies.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let f = f0 * (1.0 + uniform(&mut rng, (-spec.frequency_jitter, spec.frequency_jitter)));
            let amp = uniform(&mut rng, spec.amplitude_range);
            for _ in 0..c {
                let phase = uniform(&mut rng, spec.phase_range);
                for t in 0..l {
                    let arg = std::f64::consts::TAU * f * t as f64 / l as f64 + phase;
                    let clean = match spec.waveform {
                        Waveform::Sine => arg.sin(),
                        Waveform::EcgLike => arg.sin().max(0.0).powi(SPIKE_POWER),
                    };
                    let noise = if spec.noise > 0.0 {
                        spec.noise * standard_normal(rng.sample(Open01))
                    } else {
                        0.0
                    };
                    data.push(S::lit(amp * clean + noise));
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, c, l], data)?, labels, spec.classes)
}

impl From<crate::autodiff::AutodiffError> for DataError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        DataError::Invalid(e.to_string())
    }
}

/// Expected layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

/// Header row for the channel-major layout.
pub fn csv_header(channels: usize, length: usize) -> Vec<String> {
    let mut h = vec!["label".to_string()];
    for c in 0..channels {
        h.extend((0..length).map(|t| format!("c{c}_t{t}")));
    }
    h
}

pub fn write_csv<S: Scalar, W: Write>(out: W, ds: &Dataset<S>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(ds.channels(), ds.length()))?;
    let row = ds.channels() * ds.length();
    for (i, &y) in ds.labels.iter().enumerate() {
        let mut rec = vec![y.to_string()];
        rec.extend(
            ds.signals.data()[i * row..(i + 1) * row]
                .iter()
                .map(|v| v.as_f64().to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv<S: Scalar>(path: &Path, ds: &Dataset<S>) -> Result<(), DataError> {
    write_csv(fs::File::create(path)?, ds)
}

/// Parses CSV text with the given schema. Line numbers in errors are 1-based.
pub fn parse_csv<S: Scalar>(text: &str, schema: &CsvSchema) -> Result<Dataset<S>, DataError> {
    let expected = 1 + schema.channels * schema.length;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && rec.get(0) == Some("label") {
            continue;
        }
        if rec.len() != expected {
            return Err(DataError::Ragged {
                line,
                expected,
                got: rec.len(),
            });
        }
        let label_field = &rec[0];
        let label: usize = match label_field.parse() {
            Ok(y) if y < schema.classes => y,
            Ok(_) => {
                return Err(DataError::LabelOutOfRange {
                    line,
                    label: label_field.to_string(),
                    classes: schema.classes,
                })
            }
            Err(_) => {
                return Err(match label_field.parse::<f64>() {
                    Ok(_) => DataError::LabelOutOfRange {
                        line,
                        label: label_field.to_string(),
                        classes: schema.classes,
                    },
                    Err(_) => DataError::NonNumeric {
                        line,
                        field: 1,
                        value: label_field.to_string(),
                    },
                })
            }
        };
        labels.push(label);
        for (j, f) in rec.iter().enumerate().skip(1) {
            let v: f64 = f.parse().map_err(|_| DataError::NonNumeric {
                line,
                field: j + 1,
                value: f.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { line, field: j + 1 });
            }
            data.push(S::lit(v));
        }
    }
    if labels.is_empty() {
        return Err(DataError::NoRows);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, schema.channels, schema.length], data)?,
        labels,
        schema.classes,
    )
}

pub fn load_csv<S: Scalar>(path: &Path, schema: &CsvSchema) -> Result<Dataset<S>, DataError> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, schema)
}

/// Largest-remainder allocation of `total` items proportionally to `weights`.
fn allocate(weights: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = weights.iter().sum();
    let total = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * fraction).collect();
    let mut out: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(out.iter().sum());
    for &k in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if out[k] < weights[k] {
            out[k] += 1;
            missing -= 1;
        }
    }
    out
}

fn class_indices(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by[y].push(i);
    }
    by
}

/// Stratified split into `(train, test)` with `fractions = (train, test)`.
///
/// Per-class train counts follow a largest-remainder allocation, so each
/// class is within one sample of its exact share. Indices keep their
/// original order inside each split.
pub fn split_indices(
    labels: &[usize],
    classes: usize,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    let (ft, fs) = fractions;
    if !(ft >= 0.0 && fs >= 0.0 && (ft + fs - 1.0).abs() < 1e-9) {
        return Err(DataError::Invalid(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let by = class_indices(labels, classes);
    let counts: Vec<usize> = by.iter().map(Vec::len).collect();
    let train_counts = allocate(&counts, ft);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by.into_iter().enumerate() {
        let k = train_counts[class];
        if ft > 0.0 && fs > 0.0 && !idx.is_empty() && (k == 0 || k == idx.len()) {
            return Err(DataError::ClassTooSmall {
                class,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split<S: Scalar>(
    ds: &Dataset<S>,
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Dataset<S>, Dataset<S>), DataError> {
    let (tr, te) = split_indices(&ds.labels, ds.classes, fractions, seed)?;
    Ok((ds.subset(&tr), ds.subset(&te)))
}

/// Stratified subsample keeping `fraction` of the labelled samples.
pub fn label_subsample<S: Scalar>(ds: &Dataset<S>, fraction: f64, seed: u64) -> Result<Dataset<S>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!(
            "label fraction {fraction} must be in (0, 1]"
        )));
    }
    let by = class_indices(&ds.labels, ds.classes);
    let counts: Vec<usize> = by.iter().map(Vec::len).collect();
    let keep = allocate(&counts, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (class, mut idx) in by.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..keep[class]]);
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    ZscorePerChannel,
    None,
}

/// Per-channel statistics estimated on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels left unscaled because their variance was zero.
    pub constant_channels: Vec<usize>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            constant_channels: Vec::new(),
        }
    }

    pub fn fit<S: Scalar>(ds: &Dataset<S>, mode: Normalization) -> Self {
        let c = ds.channels();
        if mode == Normalization::None {
            return Self::identity(c);
        }
        let l = ds.length();
        let mut stats = Self::identity(c);
        for ch in 0..c {
            let vals: Vec<f64> = (0..ds.len())
                .flat_map(|i| ds.signals.data()[(i * c + ch) * l..(i * c + ch + 1) * l].iter())
                .map(|v| v.as_f64())
                .collect();
            let n = vals.len().max(1) as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                stats.mean[ch] = mean;
                stats.std[ch] = var.sqrt();
            } else {
                log::warn!("channel {ch} has zero variance; left unscaled");
                stats.constant_channels.push(ch);
            }
        }
        stats
    }

    pub fn apply<S: Scalar>(&self, ds: &Dataset<S>) -> Dataset<S> {
        let (c, l) = (ds.channels(), ds.length());
        let mut out = ds.clone();
        for (k, v) in out.signals.data_mut().iter_mut().enumerate() {
            let ch = (k / l) % c;
            if self.mean[ch] != 0.0 || self.std[ch] != 1.0 {
                *v = S::lit((v.as_f64() - self.mean[ch]) / self.std[ch]);
            }
        }
        out
    }
}

/// Fits statistics on `train` and applies them to both splits.
pub fn normalize<S: Scalar>(
    train: &Dataset<S>,
    test: &Dataset<S>,
    mode: Normalization,
) -> (Dataset<S>, Dataset<S>, NormStats) {
    let stats = NormStats::fit(train, mode);
    (stats.apply(train), stats.apply(test), stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastBatch {
    /// Contrastive pretraining: every batch has the full size.
    Drop,
    /// Evaluation: the final short batch is kept.
    Keep,
}

/// Index batches for one epoch. With `shuffle`, the order is a function of
/// `(seed, epoch)` only.
pub fn batches(n: usize, batch_size: usize, shuffle: Option<(u64, u64)>, last: LastBatch) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        idx.shuffle(&mut rng);
    }
    let size = batch_size.max(1);
    idx.chunks(size)
        .filter(|b| last == LastBatch::Keep || b.len() == size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Provenance record written next to generated or loaded data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub synthetic: Option<SyntheticSpec>,
    pub csv: Option<CsvSchema>,
    pub path: Option<String>,
    pub split_seed: u64,
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}
