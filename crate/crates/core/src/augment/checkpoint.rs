use std::fs;
use std::path::Path;

use crate::encoder::{manifest_path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::scalar::Scalar;

use super::params::{AugmentBounds, AugmentParams, PARAM_NAMES};
use super::AugmentError;

/// Writes the raw parameters with the same binary header as encoder
/// checkpoints, plus a manifest recording the bounds and tensor sizes.
pub fn save_augment_checkpoint<S: Scalar>(params: &AugmentParams<S>, path: &Path) -> Result<(), AugmentError> {
    let tensors = params.to_tensors();
    let values: Vec<f64> = tensors.iter().flat_map(|t| t.to_f64_vec()).collect();
    let mut bytes = Vec::with_capacity(16 + 8 * values.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in &values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;

    let b = &params.bounds;
    let mut m = String::from("# leaves augmentation checkpoint manifest v1\n");
    m.push_str(&format!(
        "bounds eta={} max_segments={} components={} knots={} temperature={}\n",
        b.eta, b.max_segments, b.components, b.knots, b.temperature
    ));
    for (name, t) in PARAM_NAMES.iter().zip(&tensors) {
        m.push_str(&format!("param {name} {}\n", t.len()));
    }
    fs::write(manifest_path(path), m)?;
    Ok(())
}

fn parse_bounds(line: &str) -> Result<AugmentBounds, AugmentError> {
    let bad = |m: String| AugmentError::Checkpoint(m);
    let mut b = AugmentBounds::default();
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed bounds entry {kv}")))?;
        let float = || v.parse::<f64>().map_err(|_| bad(format!("bad value for {k}: {v}")));
        let int = || v.parse::<usize>().map_err(|_| bad(format!("bad value for {k}: {v}")));
        match k {
            "eta" => b.eta = float()?,
            "max_segments" => b.max_segments = int()?,
            "components" => b.components = int()?,
            "knots" => b.knots = int()?,
            "temperature" => b.temperature = float()?,
            _ => return Err(bad(format!("unknown bounds key {k}"))),
        }
    }
    b.validate()?;
    Ok(b)
}

pub fn load_augment_checkpoint<S: Scalar>(path: &Path) -> Result<AugmentParams<S>, AugmentError> {
    let bad = |m: &str| AugmentError::Checkpoint(m.to_string());
    let manifest = fs::read_to_string(manifest_path(path))?;
    let mut lines = manifest.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let first = lines.next().ok_or_else(|| bad("manifest is empty"))?;
    if !first.starts_with("bounds ") {
        return Err(bad("manifest must start with a bounds line"));
    }
    let bounds = parse_bounds(first)?;
    let m = bounds.components;
    let expected: Vec<String> = PARAM_NAMES
        .iter()
        .zip([1, 1, 1, 1, m, m, m])
        .map(|(n, k)| format!("param {n} {k}"))
        .collect();
    let listed: Vec<String> = lines
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    if listed != expected {
        return Err(bad("manifest entries do not match the bounds"));
    }

    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing LEAV header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(AugmentError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let total = 4 + 3 * m;
    if count != total || bytes.len() != 16 + 8 * count {
        return Err(AugmentError::Checkpoint(format!(
            "expected {total} values, header says {count}"
        )));
    }
    let values: Vec<S> = bytes[16..]
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let mut params = AugmentParams::new(bounds)?;
    params.raw_sigma_jitter = values[0];
    params.raw_sigma_scale = values[1];
    params.raw_sigma_magw = values[2];
    params.raw_perm = values[3];
    params.gmm_weights_raw = values[4..4 + m].to_vec();
    params.gmm_means_raw = values[4 + m..4 + 2 * m].to_vec();
    params.gmm_scales_raw = values[4 + 2 * m..].to_vec();
    Ok(params)
}
