//! Counter-based Gaussian noise for reproducible, order-independent ensembles.
//!
//! Every trajectory gets a ChaCha key derived from `(seed, trajectory_index)`; each
//! monitored channel reads its own ChaCha stream under that key. The draws for a
//! given `(seed, trajectory, channel, step)` are therefore fixed regardless of how
//! trajectories are scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream used by jump unravellings for their jump decisions and center draws.
pub const JUMP_STREAM: u64 = 1 << 40;
/// Stream used by bootstrap resampling.
pub const BOOTSTRAP_STREAM: u64 = 1 << 41;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trajectory seed: a hash of the run seed and the trajectory index.
pub fn trajectory_seed(seed: u64, trajectory_index: u64) -> u64 {
    let mut s = seed ^ 0x6a09_e667_f3bc_c908;
    let a = splitmix64(&mut s);
    let mut t = a ^ trajectory_index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    splitmix64(&mut t)
}

/// An independent random stream for `(seed, trajectory_index, stream_id)`.
pub fn stream(seed: u64, trajectory_index: u64, stream_id: u64) -> ChaCha8Rng {
    let mut s = trajectory_seed(seed, trajectory_index);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream_id);
    rng
}

/// Streaming Wiener increments `dW_k ~ N(0, dt)`, one stream per channel.
#[derive(Debug, Clone)]
pub struct WienerIncrements {
    streams: Vec<ChaCha8Rng>,
    sqrt_dt: f64,
}

impl WienerIncrements {
    pub fn new(seed: u64, trajectory_index: u64, channels: usize, dt: f64) -> Self {
        Self {
            streams: (0..channels as u64)
                .map(|k| stream(seed, trajectory_index, k))
                .collect(),
            sqrt_dt: dt.sqrt(),
        }
    }

    #[inline]
    pub fn fill(&mut self, dw: &mut [f64]) {
        for (d, rng) in dw.iter_mut().zip(self.streams.iter_mut()) {
            let z: f64 = StandardNormal.sample(rng);
            *d = z * self.sqrt_dt;
        }
    }
}

/// A fully materialized noise path: `increments[step][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub seed: u64,
    pub trajectory_index: u64,
    pub increments: Vec<Vec<f64>>,
}

impl NoiseRealization {
    pub fn generate(seed: u64, trajectory_index: u64, steps: usize, channels: usize, dt: f64) -> Self {
        let mut gen = WienerIncrements::new(seed, trajectory_index, channels, dt);
        let increments = (0..steps)
            .map(|_| {
                let mut dw = vec![0.0; channels];
                gen.fill(&mut dw);
                dw
            })
            .collect();
        Self {
            seed,
            trajectory_index,
            increments,
        }
    }
}
