use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use leaves::augment::{
    augment_view, faithfulness_proxy, load_augment_checkpoint, noise_shape, save_augment_checkpoint, write_preview_csv,
    GradientFault, NoiseBundle,
};
use leaves::data::{label_subsample, write_manifest};
use leaves::encoder::{load_checkpoint, save_checkpoint};
use leaves::gradsuite::{check_names, run_gradient_suite, SuiteOptions};
use leaves::trainer::{
    baseline_grid, finetune, pretrain_adversarial, pretrain_fixed, train_supervised, write_grid_csv, write_grid_table,
    FinetuneMode, RunLog, TrainMode,
};
use leaves::{AugmentParams, EncoderParams, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_FAILURE, EXIT_OK};

pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const AUGMENT_CKPT: &str = "augment.ckpt";
pub const RUNLOG: &str = "runlog.jsonl";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const METRICS: &str = "metrics.json";
pub const GRID_CSV: &str = "grid.csv";
pub const GRID_TABLE: &str = "grid.txt";
pub const FAITHFULNESS: &str = "faithfulness.csv";

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn create_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

/// A checkpoint argument may name the file itself or the run directory
/// holding it.
fn checkpoint_file(arg: &Path, name: &str) -> PathBuf {
    if arg.is_dir() {
        arg.join(name)
    } else {
        arg.to_path_buf()
    }
}

fn write_log(log: &RunLog, out: &Path) -> Result<(), CliError> {
    log.write_jsonl(create_file(&out.join(RUNLOG))?)?;
    log.write_trajectories(create_file(&out.join(TRAJECTORIES))?)?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let data = cfg.load_data()?;
    let eval = if cfg.eval_knn()? { Some(&data.test) } else { None };
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    write_manifest(&out.join(DATASET_MANIFEST), &data.manifest)?;
    let log = match tc.mode {
        TrainMode::Leaves => {
            let o = pretrain_adversarial(&data.train, &tc, eval)?;
            save_checkpoint(&o.encoder, &out.join(ENCODER_CKPT))?;
            save_augment_checkpoint(&o.augment, &out.join(AUGMENT_CKPT))?;
            let e = o.augment.effective();
            println!(
                "learned intensities: jitter {:.4} scale {:.4} magnitude-warp {:.4} segments {}",
                e.sigma_jitter, e.sigma_scale, e.sigma_magw, e.segments
            );
            o.log
        }
        TrainMode::FixedSigma => {
            let (enc, log) = pretrain_fixed(&data.train, &tc, tc.fixed_sigma, eval)?;
            save_checkpoint(&enc, &out.join(ENCODER_CKPT))?;
            log
        }
        TrainMode::Supervised => {
            return Err(CliError::usage(
                "mode=supervised has no pretraining; run `finetune` without --checkpoint",
            ))
        }
    };
    write_log(&log, out)?;
    match log.steps().next_back() {
        Some(last) => println!("pretrained {} steps, final loss {:.6}", last.step + 1, last.loss),
        None => println!("pretrained 0 steps"),
    }
    Ok(())
}

pub fn finetune_cmd(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let data = cfg.load_data()?;
    let labelled = label_subsample(&data.train, tc.label_fraction, tc.seed)?;
    let (params, metrics) = match checkpoint {
        Some(arg) => {
            let path = checkpoint_file(arg, ENCODER_CKPT);
            let enc: EncoderParams =
                load_checkpoint(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let c = &enc.config;
            if c.channels_in != data.train.channels() || c.classes != data.train.classes {
                return Err(CliError::data(format!(
                    "{}: encoder expects {} channels and {} classes, data has {} and {}",
                    path.display(),
                    c.channels_in,
                    c.classes,
                    data.train.channels(),
                    data.train.classes
                )));
            }
            finetune(&enc, &labelled, &data.test, &tc)?
        }
        None => {
            if tc.finetune_mode == FinetuneMode::ProbeOnly {
                return Err(CliError::usage("probe-only fine-tuning needs --checkpoint"));
            }
            train_supervised(&labelled, &data.test, &tc)?
        }
    };
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    write_manifest(&out.join(DATASET_MANIFEST), &data.manifest)?;
    save_checkpoint(&params, &out.join(ENCODER_CKPT))?;
    let mut json = serde_json::to_value(&metrics).map_err(|e| CliError::failure(e.to_string()))?;
    let obj = json.as_object_mut().expect("metrics serialize to an object");
    obj.insert("labelled_train".into(), labelled.len().into());
    obj.insert("train".into(), data.train.len().into());
    obj.insert("test".into(), data.test.len().into());
    let text = serde_json::to_string_pretty(&json).map_err(|e| CliError::failure(e.to_string()))? + "\n";
    let path = out.join(METRICS);
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

pub fn grid(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let sigmas = cfg.grid_sigmas()?;
    let data = cfg.load_data()?;
    create_dir(out)?;
    cfg.write_snapshot(out)?;
    write_manifest(&out.join(DATASET_MANIFEST), &data.manifest)?;
    let rows = baseline_grid(&data.train, &data.test, &tc, &sigmas)?;
    write_grid_csv(create_file(&out.join(GRID_CSV))?, &rows)?;
    write_grid_table(create_file(&out.join(GRID_TABLE))?, &rows)?;
    write_grid_table(std::io::stdout().lock(), &rows)?;
    Ok(())
}

pub fn preview(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, samples: Option<usize>) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let n = match samples {
        Some(n) => n,
        None => cfg.preview_samples()?,
    };
    let data = cfg.load_data()?;
    let src = &data.train;
    if n == 0 || n > src.len() {
        return Err(CliError::usage(format!(
            "sample count must be in [1, {}], got {n}",
            src.len()
        )));
    }
    let params: AugmentParams = match checkpoint {
        Some(arg) => {
            let path = checkpoint_file(arg, AUGMENT_CKPT);
            load_augment_checkpoint(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        }
        None => AugmentParams::new(tc.bounds.clone())?,
    };
    let idx: Vec<usize> = (0..n).collect();
    let x = src.gather(&idx);
    let noise = NoiseBundle::generate(tc.seed, noise_shape(n, src.channels(), src.length(), &params.bounds));
    let view = augment_view(&x, &params, &noise, tc.mag_warp_mode)?;

    create_dir(out)?;
    cfg.write_snapshot(out)?;
    let mut report = String::from("sample,label,rmse,correlation\n");
    for i in 0..n {
        write_preview_csv(create_file(&out.join(format!("original_{i}.csv")))?, &x, i)?;
        write_preview_csv(create_file(&out.join(format!("view_{i}.csv")))?, &view, i)?;
        let f = faithfulness_proxy(&sample(&x, i)?, &sample(&view, i)?)?;
        report.push_str(&format!("{i},{},{},{}\n", src.labels[i], f.rmse, f.mean_correlation()));
    }
    let path = out.join(FAITHFULNESS);
    fs::write(&path, &report).map_err(|e| CliError::io(&path, e))?;
    print!("{report}");
    Ok(())
}

fn sample(batch: &Tensor, i: usize) -> Result<Tensor, CliError> {
    let (c, l) = (batch.shape()[1], batch.shape()[2]);
    let data = batch.data()[i * c * l..(i + 1) * c * l].to_vec();
    Tensor::new(vec![1, c, l], data).map_err(|e| CliError::failure(e.to_string()))
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub tolerance: Option<f64>,
    pub seeds: Option<u64>,
    pub only: Vec<String>,
    pub fault: Option<GradientFault>,
}

/// Runs the finite-difference suite and returns the exit code: 0 when every
/// check is within tolerance, 1 otherwise.
pub fn gradcheck(args: &GradcheckArgs) -> Result<u8, CliError> {
    let names = check_names();
    if let Some(bad) = args.only.iter().find(|o| !names.contains(&o.as_str())) {
        return Err(CliError::usage(format!(
            "unknown check {bad:?}; known: {}",
            names.join(", ")
        )));
    }
    if let Some(t) = args.tolerance {
        if !(t.is_finite() && t > 0.0) {
            return Err(CliError::usage("tolerance must be positive"));
        }
    }
    let defaults = SuiteOptions::default();
    let opts = SuiteOptions {
        seeds: args.seeds.unwrap_or(defaults.seeds),
        tolerance_override: args.tolerance,
        fault: args.fault,
        only: args.only.clone(),
        ..defaults
    };
    if opts.seeds == 0 {
        return Err(CliError::usage("seeds must be positive"));
    }
    let report = run_gradient_suite(&opts)?;
    let mut stdout = std::io::stdout().lock();
    for (name, err, tol) in report.per_check() {
        let status = if err < tol { "ok" } else { "FAIL" };
        let _ = writeln!(
            stdout,
            "{name:<20} max_rel_error {err:.3e}  tolerance {tol:.0e}  {status}"
        );
    }
    if let Some(w) = report.worst() {
        let _ = writeln!(
            stdout,
            "worst: {} (seed {}) max_rel_error {:.3e}, {:.3} of tolerance",
            w.name,
            w.seed,
            w.report.max_rel_error,
            w.ratio()
        );
    }
    if report.passed() {
        let _ = writeln!(
            stdout,
            "all {} checks passed over {} seeds",
            report.per_check().len(),
            opts.seeds
        );
        return Ok(EXIT_OK);
    }
    for (name, err, tol) in report.per_check().into_iter().filter(|(_, e, t)| e >= t) {
        eprintln!("gradient check failed: {name} max_rel_error {err:.3e} exceeds tolerance {tol:.0e}");
    }
    Ok(EXIT_FAILURE)
}
