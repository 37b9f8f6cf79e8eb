use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A splittable seed.
///
/// Every consumer of randomness (a layer's initialiser, one epoch's shuffle,
/// one mini-batch's routing draws) derives its own substream with
/// [`SeedStream::split`], so draws never depend on how much randomness some
/// other component consumed before it. ChaCha is counter based and keyed by
/// the 64-bit seed; the derived stream id selects the substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
    stream: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Child stream identified by `label`. Order of splits matters.
    #[must_use]
    pub fn split(self, label: u64) -> Self {
        let stream = splitmix64(self.stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ splitmix64(label));
        Self {
            seed: self.seed,
            stream,
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    pub fn seed(self) -> u64 {
        self.seed
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit)
        .collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

pub fn shuffle<T>(rng: &mut impl Rng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
