use std::io::Write;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::AugmentError;

/// Distortion of a view relative to its source.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Faithfulness {
    pub rmse: f64,
    /// Pearson correlation per `(sample, channel)` row. `NaN` when either
    /// row is constant.
    pub correlation: Vec<f64>,
}

impl Faithfulness {
    /// Mean of the defined correlations, or `NaN` when none are.
    pub fn mean_correlation(&self) -> f64 {
        let ok: Vec<f64> = self.correlation.iter().copied().filter(|v| v.is_finite()).collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }
}

pub fn faithfulness_proxy<S: Scalar>(x: &Tensor<S>, view: &Tensor<S>) -> Result<Faithfulness, AugmentError> {
    if x.shape() != view.shape() {
        return Err(AugmentError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: view.shape().to_vec(),
        });
    }
    if x.is_empty() {
        return Err(AugmentError::InputShape(x.shape().to_vec()));
    }
    let a = x.to_f64_vec();
    let b = view.to_f64_vec();
    let rmse = (a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    let l = x.shape().last().copied().unwrap_or(1).max(1);
    let correlation = a.chunks(l).zip(b.chunks(l)).map(|(p, q)| pearson(p, q)).collect();
    Ok(Faithfulness { rmse, correlation })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (p, q) in a.iter().zip(b) {
        cov += (p - ma) * (q - mb);
        va += (p - ma).powi(2);
        vb += (q - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Writes one sample `(C, L)` of a view as CSV with header `channel,t0,t1,...`
/// and one row per channel.
pub fn write_preview_csv<S: Scalar, W: Write>(out: W, view: &Tensor<S>, sample: usize) -> Result<(), AugmentError> {
    let (c, l) = match view.shape() {
        &[n, c, l] if sample < n => (c, l),
        other => return Err(AugmentError::InputShape(other.to_vec())),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["channel".to_string()];
    header.extend((0..l).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for ch in 0..c {
        let start = (sample * c + ch) * l;
        let mut row = vec![ch.to_string()];
        row.extend(view.data()[start..start + l].iter().map(|v| v.as_f64().to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
