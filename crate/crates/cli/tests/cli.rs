use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leaves::augment::{save_augment_checkpoint, AugmentBounds};
use leaves::encoder::load_checkpoint;
use leaves::{AugmentParams, EncoderParams};

const TINY: &str = "\
# small enough to train in well under a second
samples_per_class = 8
length = 64
widths = 4,8
embedding_dim = 8
projection_dim = 4
batch_size = 4
pretrain_epochs = 1
finetune_epochs = 2
label_fraction = 0.5
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(env.path("tiny.cfg"), TINY).unwrap();
        env
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_leaves"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("LEAVES_SEED")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn assert_same_dirs(a: &Path, b: &Path) {
    assert_eq!(files(a), files(b));
    for f in files(a) {
        assert_eq!(
            fs::read(a.join(&f)).unwrap(),
            fs::read(b.join(&f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn pretrain_writes_the_run_directory() {
    let env = Env::new();
    let o = env.run(&["pretrain", "--config", "tiny.cfg", "--out", "run1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names = files(&env.path("run1"));
    for f in [
        "encoder.ckpt",
        "augment.ckpt",
        "runlog.jsonl",
        "trajectories.csv",
        "config.resolved",
    ] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    let traj = fs::read_to_string(env.path("run1/trajectories.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 4);
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let env = Env::new();
    let o = env.run(&["pretrain", "--config", "nowhere.cfg", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let env = Env::new();
    fs::write(env.path("typo.cfg"), format!("{TINY}pretrain_epoch = 3\n")).unwrap();
    let o = env.run(&["pretrain", "--config", "typo.cfg", "--out", "run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("pretrain_epoch"));
}

#[test]
fn bad_usage_exits_2() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["pretrain"])), 2);
    assert_eq!(code(&env.run(&["frobnicate"])), 2);
    let o = env.run(&[
        "pretrain",
        "--config",
        "tiny.cfg",
        "--out",
        "r",
        "--set",
        "mode=supervised",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn same_seed_gives_byte_identical_pretraining() {
    let env = Env::new();
    for out in ["a", "b"] {
        let o = env.run(&["pretrain", "--config", "tiny.cfg", "--out", out, "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_same_dirs(&env.path("a"), &env.path("b"));
    let o = env.run(&["pretrain", "--config", "tiny.cfg", "--out", "c", "--seed", "8"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(env.path("a/encoder.ckpt")).unwrap(),
        fs::read(env.path("c/encoder.ckpt")).unwrap()
    );
}

#[test]
fn seed_sources_are_layered() {
    let env = Env::new();
    fs::write(env.path("seeded.cfg"), format!("{TINY}seed = 5\n")).unwrap();
    let seed_of = |dir: &str| {
        let snap = fs::read_to_string(env.path(dir).join("config.resolved")).unwrap();
        snap.lines().find(|l| l.starts_with("seed=")).unwrap().to_string()
    };
    let run_env = |cfg: &str, out: &str, extra: &[&str]| {
        let mut args = vec!["pretrain", "--config", cfg, "--out", out, "--set", "max_steps=1"];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_leaves"))
            .args(&args)
            .current_dir(env.dir.path())
            .env("LEAVES_SEED", "11")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run_env("tiny.cfg", "env", &[]);
    run_env("seeded.cfg", "file", &[]);
    run_env("seeded.cfg", "flag", &["--seed", "3"]);
    assert_eq!(seed_of("env"), "seed=11");
    assert_eq!(seed_of("file"), "seed=5");
    assert_eq!(seed_of("flag"), "seed=3");
}

#[test]
fn probe_only_finetune_leaves_the_encoder_unchanged() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["pretrain", "--config", "tiny.cfg", "--out", "pre"])), 0);
    let o = env.run(&[
        "finetune",
        "--config",
        "tiny.cfg",
        "--out",
        "ft",
        "--checkpoint",
        "pre",
        "--probe-only",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before: EncoderParams = load_checkpoint(&env.path("pre/encoder.ckpt")).unwrap();
    let after: EncoderParams = load_checkpoint(&env.path("ft/encoder.ckpt")).unwrap();
    let probe = before.probe_indices();
    assert_eq!(before.running, after.running);
    for (i, (b, a)) in before.tensors.iter().zip(&after.tensors).enumerate() {
        if probe.contains(&i) {
            assert_ne!(b, a, "probe tensor {i} was not trained");
        } else {
            assert_eq!(b, a, "encoder tensor {i} changed");
        }
    }
}

#[test]
fn binary_metrics_have_all_five_keys() {
    let env = Env::new();
    let o = env.run(&[
        "finetune",
        "--config",
        "tiny.cfg",
        "--out",
        "bin",
        "--set",
        "classes=2",
        "--set",
        "base_frequencies=3,5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(env.path("bin/metrics.json")).unwrap()).unwrap();
    for k in ["accuracy", "macro_f1", "sensitivity", "specificity", "auc"] {
        let v = m[k].as_f64().unwrap_or_else(|| panic!("missing {k}"));
        assert!((0.0..=1.0).contains(&v), "{k} = {v}");
    }
}

#[test]
fn label_fraction_sets_the_labelled_count() {
    let env = Env::new();
    let o = env.run(&[
        "finetune",
        "--config",
        "tiny.cfg",
        "--out",
        "lf",
        "--set",
        "samples_per_class=30",
        "--set",
        "label_fraction=0.1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("lf/metrics.json")).unwrap()).unwrap();
    let train = m["train"].as_f64().unwrap();
    let labelled = m["labelled_train"].as_f64().unwrap();
    assert!((labelled - 0.1 * train).abs() <= 1.0, "{labelled} of {train}");
}

#[test]
fn incompatible_checkpoint_exits_3() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["pretrain", "--config", "tiny.cfg", "--out", "pre"])), 0);
    let ckpt = env.path("pre/encoder.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&ckpt, bytes).unwrap();
    let o = env.run(&["finetune", "--config", "tiny.cfg", "--out", "ft", "--checkpoint", "pre"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn checkpoint_for_other_data_exits_3() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["pretrain", "--config", "tiny.cfg", "--out", "pre"])), 0);
    let o = env.run(&[
        "finetune",
        "--config",
        "tiny.cfg",
        "--out",
        "ft",
        "--checkpoint",
        "pre",
        "--set",
        "classes=2",
        "--set",
        "base_frequencies=3,5",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn malformed_csv_data_exits_3() {
    let env = Env::new();
    fs::write(env.path("bad.csv"), "label,c0_t0\n0,1.0\n1,abc\n").unwrap();
    let o = env.run(&[
        "finetune",
        "--config",
        "tiny.cfg",
        "--out",
        "ft",
        "--set",
        "data=bad.csv",
        "--set",
        "length=1",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn grid_emits_five_rows_reproducibly() {
    let env = Env::new();
    for out in ["g1", "g2"] {
        let o = env.run(&["grid", "--config", "tiny.cfg", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = fs::read_to_string(env.path("g1/grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma,accuracy,macro_f1");
    assert_eq!(lines.len(), 6);
    let sigmas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sigmas, ["0.01", "0.02", "0.03", "0.04", "0.05"]);
    assert_same_dirs(&env.path("g1"), &env.path("g2"));
    let table = fs::read_to_string(env.path("g1/grid.txt")).unwrap();
    assert_eq!(table.lines().next(), Some("sigma,acc/f1"));
}

#[test]
fn preview_at_zero_intensity_reproduces_the_input() {
    let env = Env::new();
    let zero = AugmentParams::identity_limit(AugmentBounds::default()).unwrap();
    save_augment_checkpoint(&zero, &env.path("zero.ckpt")).unwrap();
    let o = env.run(&[
        "preview",
        "--config",
        "tiny.cfg",
        "--out",
        "p",
        "--checkpoint",
        "zero.ckpt",
        "--samples",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 0..3 {
        let orig = fs::read_to_string(env.path(&format!("p/original_{i}.csv"))).unwrap();
        let view = fs::read_to_string(env.path(&format!("p/view_{i}.csv"))).unwrap();
        assert_eq!(orig, view, "sample {i}");
    }
    assert!(!env.path("p/view_3.csv").exists());
}

#[test]
fn preview_report_is_well_formed() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["pretrain", "--config", "tiny.cfg", "--out", "pre"])), 0);
    let o = env.run(&[
        "preview",
        "--config",
        "tiny.cfg",
        "--out",
        "p",
        "--checkpoint",
        "pre",
        "--samples",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let views = files(&env.path("p")).iter().filter(|f| f.starts_with("view_")).count();
    assert_eq!(views, 5);
    let report = fs::read_to_string(env.path("p/faithfulness.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let f: Vec<f64> = row.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!(f[0] >= 0.0, "{row}");
        assert!(f[1].abs() <= 1.0, "{row}");
    }
}

#[test]
fn gradcheck_passes_by_default() {
    let env = Env::new();
    let o = env.run(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("worst:"));
}

#[test]
fn gradcheck_names_a_faulty_jitter_backward() {
    let env = Env::new();
    let o = env.run(&["gradcheck", "--fault", "flip-jitter-sign", "--seeds", "3"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("jitter"), "{err}");
    assert!(err.contains("max_rel_error"), "{err}");
}

#[test]
fn gradcheck_fails_below_float_noise() {
    let env = Env::new();
    let o = env.run(&["gradcheck", "--tolerance", "1e-12", "--seeds", "2"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_rejects_unknown_check_names() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["gradcheck", "--only", "nope"])), 2);
}
