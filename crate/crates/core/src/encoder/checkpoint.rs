use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::{EncoderConfig, EncoderError, EncoderParams, RunningStats};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LEAV";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar manifest path: the checkpoint path with `.manifest` appended.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn fmt_dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Writes learnable tensors in declaration order, followed by the running
/// normalization statistics, as little-endian f64 after a
/// `LEAV | version u32 | count u64` header. A text manifest with the config
/// and every entry's name and shape is written alongside.
pub fn save_checkpoint<S: Scalar>(params: &EncoderParams<S>, path: &Path) -> Result<(), EncoderError> {
    let layout = params.config.layout();
    let mut entries: Vec<(String, String, Vec<usize>)> = layout
        .iter()
        .map(|(n, s)| ("param".to_string(), n.clone(), s.clone()))
        .collect();
    let mut values: Vec<f64> = params.tensors.iter().flat_map(|t| t.to_f64_vec()).collect();
    for ((name, c), run) in params.config.norm_layers().into_iter().zip(&params.running) {
        entries.push(("buffer".into(), format!("{name}.running_mean"), vec![c]));
        entries.push(("buffer".into(), format!("{name}.running_var"), vec![c]));
        values.extend(run.mean.iter().map(|v| v.as_f64()));
        values.extend(run.var.iter().map(|v| v.as_f64()));
    }

    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in &values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;

    let cfg = &params.config;
    let mut m = String::from("# leaves encoder checkpoint manifest v1\n");
    m.push_str(&format!(
        "config channels_in={} widths={} stem_kernel={} kernel={} embedding_dim={} projection_dim={} classes={}\n",
        cfg.channels_in,
        fmt_dims(&cfg.widths),
        cfg.stem_kernel,
        cfg.kernel,
        cfg.embedding_dim,
        cfg.projection_dim,
        cfg.classes
    ));
    for (kind, name, shape) in &entries {
        m.push_str(&format!("{kind} {name} {}\n", fmt_dims(shape)));
    }
    fs::write(manifest_path(path), m)?;
    Ok(())
}

fn parse_config(line: &str) -> Result<EncoderConfig, EncoderError> {
    let bad = |m: String| EncoderError::Checkpoint(m);
    let mut cfg = EncoderConfig::default();
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed config entry {kv}")))?;
        let num = || v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: {v}")));
        match k {
            "channels_in" => cfg.channels_in = num()?,
            "widths" => {
                cfg.widths = v
                    .split(',')
                    .map(|p| p.parse().map_err(|_| bad(format!("bad width {p}"))))
                    .collect::<Result<_, _>>()?
            }
            "stem_kernel" => cfg.stem_kernel = num()?,
            "kernel" => cfg.kernel = num()?,
            "embedding_dim" => cfg.embedding_dim = num()?,
            "projection_dim" => cfg.projection_dim = num()?,
            "classes" => cfg.classes = num()?,
            _ => return Err(bad(format!("unknown config key {k}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a checkpoint written by [`save_checkpoint`], validating the header,
/// the manifest and the value count.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<EncoderParams<S>, EncoderError> {
    let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
    let manifest = fs::read_to_string(manifest_path(path))?;
    let mut lines = manifest.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let config_line = lines.next().ok_or_else(|| bad("manifest has no config line"))?;
    if !config_line.starts_with("config ") {
        return Err(bad("manifest must start with a config line"));
    }
    let config = parse_config(config_line)?;
    let mut expected: Vec<(String, Vec<usize>)> = config.layout();
    for (name, c) in config.norm_layers() {
        expected.push((format!("{name}.running_mean"), vec![c]));
        expected.push((format!("{name}.running_var"), vec![c]));
    }
    let listed: Vec<(String, Vec<usize>)> = lines
        .map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 3 || !(parts[0] == "param" || parts[0] == "buffer") {
                return Err(EncoderError::Checkpoint(format!("malformed manifest line: {l}")));
            }
            let shape = parts[2]
                .split(',')
                .map(|p| {
                    p.parse()
                        .map_err(|_| EncoderError::Checkpoint(format!("bad shape in: {l}")))
                })
                .collect::<Result<Vec<usize>, _>>()?;
            Ok((parts[1].to_string(), shape))
        })
        .collect::<Result<_, _>>()?;
    if listed != expected {
        return Err(bad("manifest entries do not match the configured layout"));
    }

    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing LEAV header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if count != total || bytes.len() != 16 + 8 * count {
        return Err(EncoderError::Checkpoint(format!(
            "expected {total} values, header says {count}, file holds {}",
            (bytes.len().saturating_sub(16)) / 8
        )));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())));
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<S>>();
    let tensors = config
        .layout()
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, take(n)).map_err(EncoderError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let running = config
        .norm_layers()
        .into_iter()
        .map(|(_, c)| RunningStats {
            mean: take(c),
            var: take(c),
        })
        .collect();
    Ok(EncoderParams {
        config,
        tensors,
        running,
    })
}
