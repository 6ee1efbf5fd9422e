use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Scalar;

/// Seed-determined keep-masks for every dropout site of a forward pass.
///
/// The mask for a site is regenerated on demand from `(seed, site)`, so two
/// passes with the same mask see identical dropout patterns regardless of the
/// scalar type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutMask {
    rate: f64,
    seed: u64,
}

pub(crate) enum Site {
    Embedding,
    Attention { layer: usize, head: usize },
    FeedForward { layer: usize },
}

impl Site {
    fn id(&self) -> u64 {
        match *self {
            Site::Embedding => 1,
            Site::Attention { layer, head } => 0x1000 + ((layer as u64) << 8) + head as u64,
            Site::FeedForward { layer } => 0x100_0000 + layer as u64,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DropoutMask {
    /// The all-keep mask used at inference.
    pub fn none() -> Self {
        DropoutMask { rate: 0.0, seed: 0 }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        DropoutMask { rate, seed }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0
    }

    /// An independent mask for sub-stream `stream` (e.g. one per sentence).
    pub fn derive(&self, stream: u64) -> Self {
        DropoutMask {
            rate: self.rate,
            seed: splitmix(self.seed ^ splitmix(stream.wrapping_add(0x5DEE_CE66))),
        }
    }

    /// Multiplier matrix (0 or 1/(1-rate)) for one site, `None` when inactive.
    pub(crate) fn site<F: Scalar>(&self, site: Site, rows: usize, cols: usize) -> Option<Array2<F>> {
        if !self.is_active() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ splitmix(site.id())));
        let keep = 1.0 - self.rate;
        let scale = F::lit(1.0 / keep);
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.gen_bool(keep) {
                scale
            } else {
                F::zero()
            }
        }))
    }
}
