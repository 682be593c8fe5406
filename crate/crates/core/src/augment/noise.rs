use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dimensions a [`NoiseBundle`] is generated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseShape {
    pub batch: usize,
    pub channels: usize,
    pub length: usize,
    pub components: usize,
    pub knots: usize,
    pub max_segments: usize,
}

impl NoiseShape {
    pub fn rows(&self) -> usize {
        self.batch * self.channels
    }

    pub fn elements(&self) -> usize {
        self.rows() * self.length
    }
}

/// All randomness consumed by one augmentation pass, drawn up front so the
/// augmented view is a deterministic function of the parameters.
///
/// Every value is uniform on the open interval (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub shape: NoiseShape,
    /// Per element, `(N, C, L)`.
    pub jitter: Vec<f64>,
    /// Per `(sample, channel)`.
    pub scale: Vec<f64>,
    /// Per `(sample, channel, knot)`.
    pub magw_knots: Vec<f64>,
    /// Per `(sample, channel, step, component)`: relaxed component selection.
    pub gmm_select: Vec<f64>,
    /// Per `(sample, channel, step, component)`: component draws.
    pub gmm_normal: Vec<f64>,
    /// Per `(sample, segment slot)`: ranks that order the shuffled segments.
    pub perm_order: Vec<f64>,
    /// Per `(sample, channel, knot)`: time-warp knots (fixed-intensity baseline only).
    pub timew_knots: Vec<f64>,
    /// Per sample: segment-count draw (fixed-intensity baseline only).
    pub perm_count: Vec<f64>,
}

impl NoiseBundle {
    pub fn generate(seed: u64, shape: NoiseShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(Open01)).collect() };
        let rows = shape.rows();
        let mix = shape.elements() * shape.components;
        let jitter = draw(shape.elements());
        let scale = draw(rows);
        let magw_knots = draw(rows * shape.knots);
        let gmm_select = draw(mix);
        let gmm_normal = draw(mix);
        let perm_order = draw(shape.batch * shape.max_segments);
        let timew_knots = draw(rows * shape.knots);
        let perm_count = draw(shape.batch);
        Self {
            seed,
            shape,
            jitter,
            scale,
            magw_knots,
            gmm_select,
            gmm_normal,
            perm_order,
            timew_knots,
            perm_count,
        }
    }

    /// Iterates over every stored uniform.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.jitter
            .iter()
            .chain(&self.scale)
            .chain(&self.magw_knots)
            .chain(&self.gmm_select)
            .chain(&self.gmm_normal)
            .chain(&self.perm_order)
            .chain(&self.timew_knots)
            .chain(&self.perm_count)
            .copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> NoiseShape {
        NoiseShape {
            batch: 3,
            channels: 2,
            length: 17,
            components: 4,
            knots: 8,
            max_segments: 5,
        }
    }

    #[test]
    fn values_lie_in_the_open_unit_interval() {
        for seed in 0..20 {
            let b = NoiseBundle::generate(seed, shape());
            assert!(b.values().all(|u| u > 0.0 && u < 1.0));
        }
    }

    #[test]
    fn regenerating_from_the_seed_reproduces_the_bundle() {
        let a = NoiseBundle::generate(42, shape());
        let b = NoiseBundle::generate(a.seed, a.shape);
        assert_eq!(a, b);
        assert_ne!(a, NoiseBundle::generate(43, shape()));
    }

    #[test]
    fn array_sizes_follow_the_shape() {
        let s = shape();
        let b = NoiseBundle::generate(0, s);
        assert_eq!(b.jitter.len(), 3 * 2 * 17);
        assert_eq!(b.scale.len(), 6);
        assert_eq!(b.magw_knots.len(), 48);
        assert_eq!(b.gmm_select.len(), 3 * 2 * 17 * 4);
        assert_eq!(b.perm_order.len(), 15);
        assert_eq!(b.perm_count.len(), 3);
    }
}
