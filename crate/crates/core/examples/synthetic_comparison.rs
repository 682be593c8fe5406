//! LEAVES pretraining plus fine-tuning against a supervised-from-scratch
//! baseline on the default synthetic task.
//!
//! Usage: `cargo run --release --example synthetic_comparison [PRETRAIN_EPOCHS]`

use std::time::Instant;

use leaves::data::{gen_synthetic, label_subsample, normalize, split, Normalization, SyntheticSpec};
use leaves::trainer::{finetune, pretrain_adversarial, train_supervised, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    if let Some(epochs) = std::env::args().nth(1) {
        cfg.pretrain_epochs = epochs.parse()?;
    }
    let ds = gen_synthetic::<f64>(&SyntheticSpec::default())?;
    let (train, test) = split(&ds, (2.0 / 3.0, 1.0 / 3.0), cfg.seed)?;
    let (train, test, _) = normalize(&train, &test, Normalization::ZscorePerChannel);
    let labelled = label_subsample(&train, cfg.label_fraction, cfg.seed)?;
    println!(
        "train {} / test {} / labelled {}",
        train.len(),
        test.len(),
        labelled.len()
    );

    let t = Instant::now();
    let (_, sup) = train_supervised(&labelled, &test, &cfg)?;
    println!(
        "supervised: accuracy {:.4} macro-F1 {:.4} ({:.1?})",
        sup.accuracy,
        sup.macro_f1,
        t.elapsed()
    );

    let t = Instant::now();
    let out = pretrain_adversarial(&train, &cfg, Some(&test))?;
    for e in out.log.epochs() {
        println!(
            "  epoch {:>2} loss {:.4} 1-NN {:?}",
            e.epoch, e.mean_loss, e.knn_accuracy
        );
    }
    let eff = out.augment.effective();
    println!(
        "  learned sigma: jitter {:.4} scale {:.4} magnitude-warp {:.4}, segments {}",
        eff.sigma_jitter, eff.sigma_scale, eff.sigma_magw, eff.segments
    );
    let (_, m) = finetune(&out.encoder, &labelled, &test, &cfg)?;
    println!(
        "LEAVES: accuracy {:.4} macro-F1 {:.4} ({:.1?})",
        m.accuracy,
        m.macro_f1,
        t.elapsed()
    );
    Ok(())
}
