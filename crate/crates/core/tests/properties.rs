mod common;

use proptest::prelude::*;

use leaves::augment::{augment_view, noise_shape, AugmentBounds, MagWarpMode, NoiseBundle};
use leaves::autodiff::Tape;
use leaves::data::{batches, parse_csv, write_csv, CsvSchema, Dataset, LastBatch};
use leaves::encoder::{encoder_forward, EncoderConfig, Mode};
use leaves::trainer::{pretrain_adversarial, TrainConfig, TRAJECTORY_HEADER};
use leaves::{AugmentParams, EncoderParams, Tensor};

use common::{tiny_config, tiny_data};

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_gradient_sums_over_the_stretched_axis(
        rows in 1usize..5,
        cols in 1usize..6,
        w in prop::collection::vec(-2.0f64..2.0, 30),
    ) {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![rows, cols]));
        let b = tape.param(Tensor::zeros(vec![cols]));
        let weights = Tensor::new(vec![rows, cols], w[..rows * cols].to_vec()).unwrap();
        let loss = a.add(b).unwrap().mul(tape.constant(weights.clone())).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let gb = g.wrt(b);
        for c in 0..cols {
            let column: f64 = (0..rows).map(|r| weights.data()[r * cols + c]).sum();
            prop_assert!((gb.data()[c] - column).abs() < 1e-12);
        }
        prop_assert_eq!(bits(&g.wrt(a)), bits(&weights));
    }

    #[test]
    fn views_are_bitwise_deterministic(
        raw in prop::collection::vec(-4.0f64..4.0, 22),
        seed in any::<u64>(),
        len in 4usize..40,
    ) {
        let mut p = AugmentParams::new(AugmentBounds::default()).unwrap();
        let mut t = p.to_tensors();
        let mut it = raw.iter();
        for x in &mut t {
            for v in x.data_mut() {
                *v = *it.next().unwrap();
            }
        }
        p.set_from_tensors(&t).unwrap();
        let x = Tensor::new(vec![2, 1, len], (0..2 * len).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let noise = NoiseBundle::generate(seed, noise_shape(2, 1, len, &p.bounds));
        let a = augment_view(&x, &p, &noise, MagWarpMode::Multiplicative).unwrap();
        let b = augment_view(&x, &p, &noise.clone(), MagWarpMode::Multiplicative).unwrap();
        prop_assert_eq!(a.shape(), x.shape());
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn csv_roundtrip_keeps_fifteen_significant_digits(
        values in prop::collection::vec(-1e6f64..1e6, 12),
        labels in prop::collection::vec(0usize..3, 3),
    ) {
        let signals = Tensor::new(vec![3, 2, 2], values.clone()).unwrap();
        let ds = Dataset::new(signals, labels.clone(), 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &ds).unwrap();
        let back: Dataset<f64> = parse_csv(
            std::str::from_utf8(&buf).unwrap(),
            &CsvSchema { channels: 2, length: 2, classes: 3 },
        )
        .unwrap();
        prop_assert_eq!(&back.labels, &labels);
        for (a, b) in values.iter().zip(back.signals.data()) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch(
        n in 1usize..80,
        bs in 1usize..16,
        seed in any::<u64>(),
        epoch in 0u64..50,
    ) {
        let a = batches(n, bs, Some((seed, epoch)), LastBatch::Keep);
        let b = batches(n, bs, Some((seed, epoch)), LastBatch::Keep);
        prop_assert_eq!(&a, &b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for batch in batches(n, bs, Some((seed, epoch)), LastBatch::Drop) {
            prop_assert_eq!(batch.len(), bs);
        }
    }

    #[test]
    fn encoder_forward_is_deterministic(seed in 0u64..1000, train in any::<bool>()) {
        let cfg = tiny_config().encoder_for(1, 2);
        let params = EncoderParams::init(cfg, seed).unwrap();
        let x = Tensor::new(vec![3, 1, 32], (0..96).map(|i| ((i as f64) * 0.21 + seed as f64).cos()).collect()).unwrap();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let run = || {
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let out = encoder_forward(tape.constant(x.clone()), &params, &vars, mode).unwrap();
            (*out.embedding.value()).clone()
        };
        prop_assert_eq!(bits(&run()), bits(&run()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bounds_hold_after_every_pretraining_step(seed in 0u64..1000) {
        // Wide enough that a sample's projection cannot collapse to exactly zero,
        // which the loss rejects.
        let base = tiny_config();
        let cfg = TrainConfig {
            seed,
            leaves_lr: 0.05,
            encoder: EncoderConfig { widths: vec![8, 16], embedding_dim: 16, projection_dim: 8, ..base.encoder.clone() },
            ..base
        };
        let data = tiny_data::<f64>(2, seed);
        let out = pretrain_adversarial(&data, &cfg, None).unwrap();
        let eta = cfg.bounds.eta;
        let k = cfg.bounds.max_segments;
        let steps: Vec<_> = out.log.steps().collect();
        prop_assert!(!steps.is_empty());
        for (i, s) in steps.iter().enumerate() {
            prop_assert_eq!(s.step, i as u64);
            for sigma in [s.sigma_jitter, s.sigma_scale, s.sigma_magw] {
                prop_assert!(sigma > 0.0 && sigma <= eta, "sigma {} at step {}", sigma, i);
            }
            prop_assert!((1..=k).contains(&s.segments));
        }
        let mut csv = Vec::new();
        out.log.write_trajectories(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        prop_assert_eq!(lines[0], TRAJECTORY_HEADER);
        prop_assert_eq!(lines.len(), steps.len() + 1);
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            prop_assert_eq!(fields.len(), TRAJECTORY_HEADER.split(',').count());
            prop_assert_eq!(fields[0].parse::<usize>().unwrap(), i);
            prop_assert!(fields.iter().all(|f| !f.is_empty()));
        }
    }
}
