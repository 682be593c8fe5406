//! NT-Xent contrastive objective over interleaved view pairs.
//!
//! Rows `2k` and `2k + 1` (0-indexed) of an embedding batch are the two views
//! of sample `k`. For each row `i` with positive partner `j`,
//! `ℓ(i, j) = −log(exp(s(i, j)/τ) / Σ_{k≠i} exp(s(i, k)/τ))` with cosine
//! similarity `s`; the loss is the mean of `ℓ` over all rows.

use std::rc::Rc;

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::scalar::Scalar;

/// Temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("embedding row {row} has zero norm (collapsed embedding)")]
    ZeroNorm { row: usize },
    #[error("embedding batch needs an even number of rows, at least 2; got {rows}")]
    RowCount { rows: usize },
    #[error("temperature must be positive")]
    NonPositiveTemperature,
    #[error("view batches have shapes {left:?} and {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

/// `dot(a, b) / (‖a‖·‖b‖)` for two vectors.
pub fn cosine_similarity<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Result<Var<'t, S>, ContrastiveError> {
    if a.shape().len() != 1 || a.shape() != b.shape() {
        return Err(ContrastiveError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    for (row, v) in [a, b].iter().enumerate() {
        if v.value().data().iter().all(|&x| x == S::zero()) {
            return Err(ContrastiveError::ZeroNorm { row });
        }
    }
    let dot = a.mul(b)?.sum();
    let na = a.square().sum().sqrt()?;
    let nb = b.square().sum().sqrt()?;
    Ok(dot.div(na.mul(nb)?)?)
}

/// Interleaved view embeddings `(2N, D)` and the loss temperature.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingBatch<'t, S: Scalar> {
    pub embeddings: Var<'t, S>,
    pub temperature: f64,
}

impl<'t, S: Scalar> EmbeddingBatch<'t, S> {
    pub fn new(embeddings: Var<'t, S>, temperature: f64) -> Result<Self, ContrastiveError> {
        let shape = embeddings.shape();
        if shape.len() != 2 {
            return Err(AutodiffError::Rank {
                op: "embedding batch",
                expected: 2,
                shape,
            }
            .into());
        }
        if shape[0] < 2 || !shape[0].is_multiple_of(2) {
            return Err(ContrastiveError::RowCount { rows: shape[0] });
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(ContrastiveError::NonPositiveTemperature);
        }
        Ok(Self {
            embeddings,
            temperature,
        })
    }

    pub fn pairs(&self) -> usize {
        self.embeddings.shape()[0] / 2
    }
}

/// Interleaves two `(N, D)` view batches into rows `A1, B1, A2, B2, ...`.
pub fn interleave_views<'t, S: Scalar>(
    a: Var<'t, S>,
    b: Var<'t, S>,
    temperature: f64,
) -> Result<EmbeddingBatch<'t, S>, ContrastiveError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(ContrastiveError::ShapeMismatch { left: sa, right: sb });
    }
    let n = sa[0];
    let stacked = a.tape().concat_rows(&[a, b])?;
    let order: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
    EmbeddingBatch::new(stacked.select_rows(Rc::new(order))?, temperature)
}

/// Splits an interleaved batch back into its two `(N, D)` view batches.
pub fn deinterleave<'t, S: Scalar>(
    batch: &EmbeddingBatch<'t, S>,
) -> Result<(Var<'t, S>, Var<'t, S>), ContrastiveError> {
    let n = batch.pairs();
    let z = batch.embeddings;
    let a = z.select_rows(Rc::new((0..n).map(|k| 2 * k).collect()))?;
    let b = z.select_rows(Rc::new((0..n).map(|k| 2 * k + 1).collect()))?;
    Ok((a, b))
}

/// Mean NT-Xent loss over the batch.
///
/// The largest off-diagonal logit of each row is subtracted before
/// exponentiation.
pub fn nt_xent<'t, S: Scalar>(batch: &EmbeddingBatch<'t, S>) -> Result<Var<'t, S>, ContrastiveError> {
    let z = batch.embeddings;
    let tape = z.tape();
    let rows = z.shape()[0];
    let zv = z.value();
    let d = zv.shape()[1];
    for r in 0..rows {
        if zv.data()[r * d..(r + 1) * d].iter().all(|&x| x == S::zero()) {
            return Err(ContrastiveError::ZeroNorm { row: r });
        }
    }
    let norms = z.square().sum_axis(1, true)?.sqrt()?;
    let unit = z.div(norms)?;
    let logits = unit
        .matmul(unit.transpose()?)?
        .mul_scalar(S::lit(1.0 / batch.temperature));

    let lv = logits.value();
    let mut shift = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &lv.data()[i * rows..(i + 1) * rows];
        let m = (0..rows)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(S::neg_infinity(), S::max);
        shift.push(m);
    }
    let shift = tape.constant(Tensor::new(vec![rows, 1], shift)?);
    let mut mask = vec![S::one(); rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = S::zero();
    }
    let mask = tape.constant(Tensor::new(vec![rows, rows], mask)?);

    let shifted = logits.sub(shift)?;
    let denom = shifted.exp().mul(mask)?.sum_axis(1, true)?.log()?;
    let partner: Vec<usize> = (0..rows).map(|i| i ^ 1).collect();
    let positive = shifted.gather_last(Rc::new(partner), 1)?;
    Ok(denom.sub(positive)?.mean())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check_inputs, GradCheckOptions, Tape};

    fn random(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct double loop over the pairwise definition.
    fn brute_force(z: &Tensor<f64>, tau: f64) -> f64 {
        let rows = z.shape()[0];
        let d = z.shape()[1];
        let row = |i: usize| &z.data()[i * d..(i + 1) * d];
        let sim = |i: usize, k: usize| {
            let (a, b) = (row(i), row(k));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let ell = |i: usize, j: usize| {
            let num = (sim(i, j) / tau).exp();
            let den: f64 = (0..rows).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
            -(num / den).ln()
        };
        let n = rows / 2;
        let mut total = 0.0;
        for k in 0..n {
            total += ell(2 * k, 2 * k + 1) + ell(2 * k + 1, 2 * k);
        }
        total / (2 * n) as f64
    }

    fn loss(z: &Tensor<f64>, tau: f64) -> f64 {
        let tape = Tape::new();
        let b = EmbeddingBatch::new(tape.constant(z.clone()), tau).unwrap();
        nt_xent(&b).unwrap().value().data()[0]
    }

    #[test]
    fn cosine_examples() {
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(Tensor::vector(d.to_vec()));
        let s = |a: &[f64], b: &[f64]| cosine_similarity(v(a), v(b)).unwrap().value().data()[0];
        assert!((s(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(s(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((s(&[1.0, 0.0], &[-1.0, 0.0]) + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(v(&[0.0, 0.0]), v(&[1.0, 0.0])),
            Err(ContrastiveError::ZeroNorm { row: 0 })
        ));
    }

    #[test]
    fn cosine_gradcheck() {
        let report = grad_check_inputs(
            |_, v| cosine_similarity(v[0], v[1]),
            &[
                Tensor::vector(vec![0.3, -1.2, 0.8]),
                Tensor::vector(vec![1.1, 0.4, -0.2]),
            ],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let z = random(2, 5, 1);
        assert_eq!(loss(&z, 0.05), 0.0);
    }

    #[test]
    fn identical_embeddings_give_log_three() {
        let z = Tensor::new(vec![4, 3], [0.2, -0.4, 0.9].repeat(4)).unwrap();
        assert!((loss(&z, 0.05) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_the_double_loop_oracle() {
        for seed in 0..20 {
            let z = random(8, 8, seed);
            for tau in [0.05, 0.5, 1.0] {
                let a = loss(&z, tau);
                let b = brute_force(&z, tau);
                assert!((a - b).abs() < 1e-12, "seed {seed} τ {tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gradcheck_on_four_pairs() {
        let report = grad_check_inputs(
            |_, v| nt_xent(&EmbeddingBatch::new(v[0], 0.05)?),
            &[random(8, 8, 42)],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn interleave_layout_and_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![10.0, 10.0, 20.0, 20.0]).unwrap());
        let batch = interleave_views(a, b, 0.05).unwrap();
        assert_eq!(
            batch.embeddings.value().data(),
            &[1.0, 1.0, 10.0, 10.0, 2.0, 2.0, 20.0, 20.0]
        );
        let (ra, rb) = deinterleave(&batch).unwrap();
        assert_eq!(ra.value(), a.value());
        assert_eq!(rb.value(), b.value());

        let one = interleave_views(
            a.select_rows(Rc::new(vec![0])).unwrap(),
            b.select_rows(Rc::new(vec![0])).unwrap(),
            0.05,
        )
        .unwrap();
        assert_eq!(one.embeddings.value().data(), &[1.0, 1.0, 10.0, 10.0]);
        let c = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            interleave_views(a, c, 0.05),
            Err(ContrastiveError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let tape = Tape::new();
        assert!(matches!(
            EmbeddingBatch::new(tape.constant(random(3, 2, 0)), 0.05),
            Err(ContrastiveError::RowCount { rows: 3 })
        ));
        assert!(matches!(
            EmbeddingBatch::new(tape.constant(random(4, 2, 0)), 0.0),
            Err(ContrastiveError::NonPositiveTemperature)
        ));
        let mut z = random(4, 2, 0);
        z.data_mut()[4] = 0.0;
        z.data_mut()[5] = 0.0;
        let b = EmbeddingBatch::new(tape.constant(z), 0.05).unwrap();
        assert!(matches!(nt_xent(&b), Err(ContrastiveError::ZeroNorm { row: 2 })));
    }

    fn swap_views(z: &Tensor<f64>) -> Tensor<f64> {
        let (rows, d) = (z.shape()[0], z.shape()[1]);
        let mut out = Vec::with_capacity(z.len());
        for i in 0..rows {
            let j = i ^ 1;
            out.extend_from_slice(&z.data()[j * d..(j + 1) * d]);
        }
        Tensor::new(vec![rows, d], out).unwrap()
    }

    proptest! {
        #[test]
        fn loss_invariants(pairs in 2usize..6, d in 1usize..6, seed in any::<u64>(), k in 0.01f64..100.0) {
            let z = random(2 * pairs, d, seed);
            prop_assume!(z.data().chunks(d).all(|r| r.iter().any(|&v| v.abs() > 1e-3)));
            let base = loss(&z, 0.05);
            // with d = 1 every similarity is ±1 and exp(−2/τ) can vanish against 1
            prop_assert!(base >= 0.0);
            if d > 1 {
                prop_assert!(base > 0.0);
            }
            prop_assert!((base - brute_force(&z, 0.05)).abs() < 1e-12);
            prop_assert!((loss(&swap_views(&z), 0.05) - base).abs() < 1e-10);
            prop_assert!((loss(&z.map(|v| v * k), 0.05) - base).abs() < 1e-10);
        }
    }
}
