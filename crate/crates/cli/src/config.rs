//! Line-based `key=value` run configuration.
//!
//! Every key has a default taken from the library defaults. Values are
//! layered as defaults < config file < `--set` flags < `--seed`, with the
//! `LEAVES_SEED` environment variable sitting just above the defaults for
//! `seed` only. The fully resolved map is what gets snapshotted into a run
//! directory.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use leaves::augment::{AugmentBounds, MagWarpMode};
use leaves::data::{
    gen_synthetic, load_csv, normalize, split, CsvSchema, DatasetManifest, Normalization, SyntheticSpec, Waveform,
};
use leaves::encoder::EncoderConfig;
use leaves::trainer::{FinetuneMode, TrainConfig, TrainMode, DEFAULT_GRID_SIGMAS};
use leaves::Dataset;

use crate::error::CliError;

pub const SEED_ENV: &str = "LEAVES_SEED";
pub const SNAPSHOT_FILE: &str = "config.resolved";

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn defaults() -> BTreeMap<&'static str, String> {
    let t = TrainConfig::default();
    let s = SyntheticSpec::default();
    let b = AugmentBounds::default();
    let e = EncoderConfig::default();
    let pairs: Vec<(&'static str, String)> = vec![
        ("seed", t.seed.to_string()),
        ("data", "synthetic".into()),
        ("classes", s.classes.to_string()),
        ("channels", s.channels.to_string()),
        ("length", s.length.to_string()),
        ("synthetic_seed", s.seed.to_string()),
        ("samples_per_class", s.samples_per_class.to_string()),
        ("base_frequencies", list(&s.base_frequencies)),
        ("frequency_jitter", s.frequency_jitter.to_string()),
        ("amplitude_min", s.amplitude_range.0.to_string()),
        ("amplitude_max", s.amplitude_range.1.to_string()),
        ("noise", s.noise.to_string()),
        ("waveform", "sine".into()),
        ("train_fraction", (2.0f64 / 3.0).to_string()),
        ("normalization", "zscore".into()),
        ("batch_size", t.batch_size.to_string()),
        ("pretrain_epochs", t.pretrain_epochs.to_string()),
        ("finetune_epochs", t.finetune_epochs.to_string()),
        ("max_steps", "none".into()),
        ("encoder_lr", t.encoder_lr.to_string()),
        ("leaves_lr", t.leaves_lr.to_string()),
        ("finetune_lr", t.finetune_lr.to_string()),
        ("temperature", t.temperature.to_string()),
        ("label_fraction", t.label_fraction.to_string()),
        ("mode", "leaves".into()),
        ("fixed_sigma", t.fixed_sigma.to_string()),
        ("finetune_mode", "full".into()),
        ("mag_warp_mode", "multiplicative".into()),
        ("eta", b.eta.to_string()),
        ("max_segments", b.max_segments.to_string()),
        ("components", b.components.to_string()),
        ("knots", b.knots.to_string()),
        ("relax_temperature", b.temperature.to_string()),
        ("widths", list(&e.widths)),
        ("stem_kernel", e.stem_kernel.to_string()),
        ("kernel", e.kernel.to_string()),
        ("embedding_dim", e.embedding_dim.to_string()),
        ("projection_dim", e.projection_dim.to_string()),
        ("grid_sigmas", list(&DEFAULT_GRID_SIGMAS)),
        ("preview_samples", "4".into()),
        ("eval_knn", "false".into()),
    ];
    pairs.into_iter().collect()
}

/// Names of every recognised key, sorted.
pub fn known_keys() -> Vec<&'static str> {
    defaults().into_keys().collect()
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; a `#` after a value starts a trailing comment.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Resolves the layered configuration. `env_seed` is the value of
    /// `LEAVES_SEED`, if set.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        env_seed: Option<String>,
    ) -> Result<Self, CliError> {
        let mut values = defaults();
        if let Some(s) = env_seed {
            values.insert("seed", s);
        }
        let mut set = |k: String, v: String, origin: &str| -> Result<(), CliError> {
            match values.keys().find(|known| **known == k).copied() {
                Some(key) => {
                    values.insert(key, v);
                    Ok(())
                }
                None => Err(CliError::usage(format!("{origin}: unknown key {k:?}"))),
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config file {}: {e}", path.display())))?;
            let origin = path.display().to_string();
            for (k, v) in parse_lines(&text, &origin)? {
                set(k, v, &origin)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects key=value, got {o:?}")))?;
            set(k.trim().to_string(), v.trim().to_string(), "--set")?;
        }
        if let Some(s) = seed {
            values.insert("seed", s.to_string());
        }
        let cfg = Self { values };
        cfg.train()?;
        cfg.data_source()?;
        cfg.grid_sigmas()?;
        cfg.preview_samples()?;
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .expect("key is in the defaults table")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| CliError::usage(format!("invalid value for {key}: {v:?}")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("invalid entry in {key}: {p:?}")))
            })
            .collect()
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T, CliError> {
        let v = self.raw(key);
        options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            CliError::usage(format!("{key} must be one of {}, got {v:?}", names.join("|")))
        })
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let max_steps = match self.raw("max_steps") {
            "none" => None,
            _ => Some(self.parse("max_steps")?),
        };
        let cfg = TrainConfig {
            seed: self.seed()?,
            batch_size: self.parse("batch_size")?,
            pretrain_epochs: self.parse("pretrain_epochs")?,
            finetune_epochs: self.parse("finetune_epochs")?,
            max_steps,
            encoder_lr: self.parse("encoder_lr")?,
            leaves_lr: self.parse("leaves_lr")?,
            finetune_lr: self.parse("finetune_lr")?,
            temperature: self.parse("temperature")?,
            bounds: AugmentBounds {
                eta: self.parse("eta")?,
                max_segments: self.parse("max_segments")?,
                components: self.parse("components")?,
                knots: self.parse("knots")?,
                temperature: self.parse("relax_temperature")?,
            },
            label_fraction: self.parse("label_fraction")?,
            mode: self.choice(
                "mode",
                &[
                    ("leaves", TrainMode::Leaves),
                    ("fixed-sigma", TrainMode::FixedSigma),
                    ("supervised", TrainMode::Supervised),
                ],
            )?,
            fixed_sigma: self.parse("fixed_sigma")?,
            finetune_mode: self.choice(
                "finetune_mode",
                &[("full", FinetuneMode::Full), ("probe-only", FinetuneMode::ProbeOnly)],
            )?,
            mag_warp_mode: self.choice(
                "mag_warp_mode",
                &[
                    ("multiplicative", MagWarpMode::Multiplicative),
                    ("additive", MagWarpMode::Additive),
                ],
            )?,
            encoder: EncoderConfig {
                channels_in: self.parse("channels")?,
                widths: self.parse_list("widths")?,
                stem_kernel: self.parse("stem_kernel")?,
                kernel: self.parse("kernel")?,
                embedding_dim: self.parse("embedding_dim")?,
                projection_dim: self.parse("projection_dim")?,
                classes: self.parse("classes")?,
            },
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.bounds.validate().map_err(|e| CliError::usage(e.to_string()))?;
        cfg.encoder.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn set_finetune_mode(&mut self, mode: FinetuneMode) {
        let v = match mode {
            FinetuneMode::Full => "full",
            FinetuneMode::ProbeOnly => "probe-only",
        };
        self.values.insert("finetune_mode", v.into());
    }

    pub fn grid_sigmas(&self) -> Result<Vec<f64>, CliError> {
        let s: Vec<f64> = self.parse_list("grid_sigmas")?;
        if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::usage("grid_sigmas must be finite and non-negative"));
        }
        Ok(s)
    }

    pub fn preview_samples(&self) -> Result<usize, CliError> {
        self.parse("preview_samples")
    }

    pub fn eval_knn(&self) -> Result<bool, CliError> {
        self.parse("eval_knn")
    }

    fn data_source(&self) -> Result<DataSource, CliError> {
        let classes = self.parse("classes")?;
        let channels = self.parse("channels")?;
        let length = self.parse("length")?;
        let train_fraction: f64 = self.parse("train_fraction")?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(CliError::usage("train_fraction must be in (0, 1)"));
        }
        let normalization = self.choice(
            "normalization",
            &[
                ("zscore", Normalization::ZscorePerChannel),
                ("none", Normalization::None),
            ],
        )?;
        let kind = match self.raw("data") {
            "synthetic" => {
                let spec = SyntheticSpec {
                    classes,
                    samples_per_class: self.parse("samples_per_class")?,
                    length,
                    channels,
                    base_frequencies: self.parse_list("base_frequencies")?,
                    frequency_jitter: self.parse("frequency_jitter")?,
                    amplitude_range: (self.parse("amplitude_min")?, self.parse("amplitude_max")?),
                    noise: self.parse("noise")?,
                    waveform: self.choice("waveform", &[("sine", Waveform::Sine), ("ecg-like", Waveform::EcgLike)])?,
                    seed: self.parse("synthetic_seed")?,
                    ..SyntheticSpec::default()
                };
                spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
                SourceKind::Synthetic(spec)
            }
            path => SourceKind::Csv(
                PathBuf::from(path),
                CsvSchema {
                    channels,
                    length,
                    classes,
                },
            ),
        };
        Ok(DataSource {
            kind,
            train_fraction,
            normalization,
            split_seed: self.seed()?,
        })
    }

    /// Loads or generates the dataset and returns the normalized
    /// train and test splits.
    pub fn load_data(&self) -> Result<LoadedData, CliError> {
        self.data_source()?.load()
    }

    /// The resolved configuration, one sorted `key=value` line per key.
    pub fn snapshot(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(SNAPSHOT_FILE), self.snapshot()).map_err(|e| CliError::io(dir, e))
    }
}

#[derive(Clone, Debug)]
enum SourceKind {
    Synthetic(SyntheticSpec),
    Csv(PathBuf, CsvSchema),
}

#[derive(Clone, Debug)]
struct DataSource {
    kind: SourceKind,
    train_fraction: f64,
    normalization: Normalization,
    split_seed: u64,
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub manifest: DatasetManifest,
}

impl DataSource {
    fn load(&self) -> Result<LoadedData, CliError> {
        let (ds, synthetic, csv, path): (Dataset, _, _, _) = match &self.kind {
            SourceKind::Synthetic(spec) => (gen_synthetic(spec)?, Some(spec.clone()), None, None),
            SourceKind::Csv(p, schema) => (
                load_csv(p, schema).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
                None,
                Some(schema.clone()),
                Some(p.display().to_string()),
            ),
        };
        let manifest = DatasetManifest {
            source: if synthetic.is_some() { "synthetic" } else { "csv" }.into(),
            synthetic,
            csv,
            path,
            split_seed: self.split_seed,
            samples: ds.len(),
            channels: ds.channels(),
            length: ds.length(),
            classes: ds.classes,
        };
        let (train, test) = split(&ds, (self.train_fraction, 1.0 - self.train_fraction), self.split_seed)?;
        let (train, test, _) = normalize(&train, &test, self.normalization);
        Ok(LoadedData { train, test, manifest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::resolve(None, &[], None, None).unwrap();
        let base = TrainConfig::default();
        let expected = TrainConfig {
            encoder: base.encoder_for(1, SyntheticSpec::default().classes),
            ..base
        };
        assert_eq!(cfg.train().unwrap(), expected);
        assert_eq!(cfg.grid_sigmas().unwrap(), DEFAULT_GRID_SIGMAS.to_vec());
    }

    #[test]
    fn seed_priority() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "seed = 5 # from file\n").unwrap();
        let env = Some("9".to_string());
        let s = |f: Option<&Path>, flag| RunConfig::resolve(f, &[], flag, env.clone()).unwrap().seed().unwrap();
        assert_eq!(s(None, None), 9);
        assert_eq!(s(Some(&file), None), 5);
        assert_eq!(s(Some(&file), Some(7)), 7);
        assert_eq!(RunConfig::resolve(None, &[], None, None).unwrap().seed().unwrap(), 0);
    }

    #[test]
    fn set_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "batch_size=16\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &["batch_size=8".into()], None, None).unwrap();
        assert_eq!(cfg.train().unwrap().batch_size, 8);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# comment\nbatch_sise=16\n").unwrap();
        let err = RunConfig::resolve(Some(&file), &[], None, None).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("batch_sise"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_lines("a=1\n\njust text\n", "f.cfg").unwrap_err();
        assert!(err.message.contains("f.cfg:3"), "{}", err.message);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        for o in [
            "batch_size=x",
            "mode=bogus",
            "label_fraction=0",
            "widths=4,,8",
            "train_fraction=1",
        ] {
            let err = RunConfig::resolve(None, &[o.to_string()], None, None).unwrap_err();
            assert_eq!(err.code, 2, "{o}");
        }
    }

    #[test]
    fn snapshot_roundtrips() {
        let cfg = RunConfig::resolve(None, &["noise=0.3".into(), "max_steps=4".into()], Some(3), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_snapshot(dir.path()).unwrap();
        let again = RunConfig::resolve(Some(&dir.path().join(SNAPSHOT_FILE)), &[], None, None).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(known_keys().len(), again.snapshot().lines().count() - 1);
    }
}
