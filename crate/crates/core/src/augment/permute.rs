use std::rc::Rc;

use crate::autodiff::{Tensor, Var};
use crate::scalar::Scalar;

use super::params::hard_segments;
use super::transforms::dims;
use super::AugmentError;

/// Boundaries `floor(i·L/n)` for `i = 0..=n`.
pub fn segment_bounds(length: usize, segments: usize) -> Vec<usize> {
    (0..=segments).map(|i| i * length / segments).collect()
}

/// Order of the shuffled segments: the argsort of the first `segments` ranks.
pub fn segment_order(ranks: &[f64], segments: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..segments).collect();
    order.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]));
    order
}

/// Source index of every output step after concatenating the segments in `order`.
pub fn permutation_index(length: usize, order: &[usize]) -> Vec<usize> {
    let bounds = segment_bounds(length, order.len());
    order.iter().flat_map(|&s| bounds[s]..bounds[s + 1]).collect()
}

/// Fixes the segment count and linearizes around a relaxed value, so finite
/// differences see the same surrogate the straight-through estimator uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentAnchor {
    pub count: usize,
    pub relaxed: f64,
}

#[derive(Clone, Debug)]
pub struct PermuteOutput<'t, S: Scalar> {
    pub view: Var<'t, S>,
    pub segments: usize,
}

/// Rearranges each sample by per-sample segment counts; channels of a sample
/// share one shuffle. `ranks` holds `max_segments` values per sample.
pub fn permute_with_counts<'t, S: Scalar>(
    x: Var<'t, S>,
    counts: &[usize],
    ranks: &[f64],
    max_segments: usize,
) -> Result<Var<'t, S>, AugmentError> {
    let (n, c, l) = dims(&x)?;
    if counts.len() != n {
        return Err(AugmentError::NoiseLength {
            expected: n,
            got: counts.len(),
        });
    }
    if ranks.len() != n * max_segments {
        return Err(AugmentError::NoiseLength {
            expected: n * max_segments,
            got: ranks.len(),
        });
    }
    if counts.iter().any(|&k| k == 0 || k > max_segments) {
        return Err(AugmentError::InvalidBounds(
            "segment count outside [1, max_segments]".into(),
        ));
    }
    let mut index = Vec::with_capacity(n * c * l);
    for (sample, &k) in counts.iter().enumerate() {
        let order = segment_order(&ranks[sample * max_segments..], k);
        let row = permutation_index(l, &order);
        for _ in 0..c {
            index.extend_from_slice(&row);
        }
    }
    Ok(x.gather_last(Rc::new(index), l)?)
}

/// Segment permutation driven by a relaxed (rank-0) segment count.
///
/// The forward pass rounds the relaxed count. The backward pass treats the
/// output as if it moved linearly with the relaxed count along the difference
/// between neighbouring counts' outputs (straight-through estimator).
pub fn permute<'t, S: Scalar>(
    x: Var<'t, S>,
    relaxed: Var<'t, S>,
    max_segments: usize,
    ranks: &[f64],
    anchor: Option<SegmentAnchor>,
) -> Result<PermuteOutput<'t, S>, AugmentError> {
    let (n, _, _) = dims(&x)?;
    let r = relaxed
        .value()
        .item()
        .ok_or(AugmentError::InputShape(relaxed.shape()))?
        .as_f64();
    let k = match anchor {
        Some(a) => a.count,
        None => hard_segments(r, max_segments),
    };
    let at = |count: usize| permute_with_counts(x.detach(), &vec![count; n], ranks, max_segments);
    let out = permute_with_counts(x, &vec![k; n], ranks, max_segments)?;
    let direction: Tensor<S> = if max_segments == 1 {
        Tensor::zeros(out.shape())
    } else {
        let (lo, hi) = if k < max_segments { (k, k + 1) } else { (k - 1, k) };
        let (a, b) = (at(lo)?.value(), at(hi)?.value());
        Tensor::new(
            a.shape().to_vec(),
            b.data().iter().zip(a.data()).map(|(&p, &q)| p - q).collect(),
        )?
    };
    let view = match anchor {
        None => out.straight_through(relaxed, direction)?,
        Some(a) => {
            let shift = relaxed.add_scalar(S::lit(-a.relaxed));
            out.add(shift.mul(x.tape().constant(direction))?)?
        }
    };
    Ok(PermuteOutput { view, segments: k })
}
