#![allow(dead_code)]

use leaves::data::{gen_synthetic, Dataset, SyntheticSpec};
use leaves::encoder::EncoderConfig;
use leaves::scalar::Scalar;
use leaves::trainer::TrainConfig;

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        pretrain_epochs: 2,
        finetune_epochs: 3,
        encoder: EncoderConfig {
            widths: vec![4, 8],
            embedding_dim: 8,
            projection_dim: 4,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn tiny_data<S: Scalar>(classes: usize, seed: u64) -> Dataset<S> {
    gen_synthetic(&SyntheticSpec {
        classes,
        samples_per_class: 6,
        length: 32,
        base_frequencies: (0..classes).map(|c| 1.0 + 2.0 * c as f64).collect(),
        noise: 0.1,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}
