use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{label_subsample, Dataset};
use crate::scalar::Scalar;

use super::finetune::finetune;
use super::pretrain::pretrain_fixed;
use super::{TrainConfig, TrainError};

pub const DEFAULT_GRID_SIGMAS: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];
pub const GRID_HEADER: &str = "sigma,accuracy,macro_f1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub sigma: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Fixed-intensity contrastive pretraining on `train` for every sigma,
/// fine-tuning on the configured label fraction and scoring on `test`.
pub fn baseline_grid<S: Scalar>(
    train: &Dataset<S>,
    test: &Dataset<S>,
    config: &TrainConfig,
    sigmas: &[f64],
) -> Result<Vec<GridRow>, TrainError> {
    if sigmas.is_empty() {
        return Err(TrainError::Config("empty sigma list".into()));
    }
    let labelled = label_subsample(train, config.label_fraction, config.seed)?;
    sigmas
        .iter()
        .map(|&sigma| {
            let (enc, _) = pretrain_fixed(train, config, sigma, None)?;
            let (_, m) = finetune(&enc, &labelled, test, config)?;
            log::info!("sigma {sigma}: accuracy {:.4} macro-F1 {:.4}", m.accuracy, m.macro_f1);
            Ok(GridRow {
                sigma,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
            })
        })
        .collect()
}

pub fn write_grid_csv<W: Write>(out: W, rows: &[GridRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRID_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.sigma.to_string(), r.accuracy.to_string(), r.macro_f1.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One `accuracy/macro_f1` cell per sigma, four decimals.
pub fn write_grid_table<W: Write>(mut out: W, rows: &[GridRow]) -> Result<(), TrainError> {
    writeln!(out, "sigma,acc/f1")?;
    for r in rows {
        writeln!(out, "{},{:.4}/{:.4}", r.sigma, r.accuracy, r.macro_f1)?;
    }
    Ok(())
}
