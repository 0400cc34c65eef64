//! Counter-based deterministic random number streams.
//!
//! Every random decision in the simulator draws from a stream keyed by
//! `(seed, purpose, a, b, c)` where the meaning of `a/b/c` depends on the
//! purpose (typically client id, round, step). Streams are created at the
//! point of use, never shared, and never depend on draw order elsewhere in
//! the program, so parallel execution cannot change any result.

/// What a stream is used for. Part of the stream key, so two purposes with
/// identical `(seed, a, b, c)` still produce unrelated sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Class-mean directions of the synthetic generator.
    SyntheticDirections,
    /// Per-class sample noise of the synthetic generator.
    SyntheticNoise,
    /// IID portion draws in the alpha partitioner.
    PartitionIid,
    /// Dominant-class draws in the alpha partitioner.
    PartitionDominant,
    /// Shard shuffles and class choices in the shard partitioner.
    PartitionShard,
    /// Per-client train/test split shuffles.
    SplitShuffle,
    /// Peer selection during similarity scoring.
    PeerSelection,
    /// Random pairing of leftover clients in group formation.
    RandomPairing,
    /// The random-grouping ablation partition.
    RandomGrouping,
    /// Per-group per-round client subsampling.
    ClientSubsample,
    /// Per-client per-round per-step data subsampling.
    DataSubsample,
    /// Gaussian noise of the DP mechanism.
    DpNoise,
    /// Byzantine-random attack noise.
    ByzRandom,
    /// Selection of malicious client ids.
    MaliciousSelect,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::SyntheticDirections => 0x01,
            Purpose::SyntheticNoise => 0x02,
            Purpose::PartitionIid => 0x03,
            Purpose::PartitionDominant => 0x04,
            Purpose::PartitionShard => 0x05,
            Purpose::SplitShuffle => 0x06,
            Purpose::PeerSelection => 0x07,
            Purpose::RandomPairing => 0x08,
            Purpose::RandomGrouping => 0x09,
            Purpose::ClientSubsample => 0x0a,
            Purpose::DataSubsample => 0x0b,
            Purpose::DpNoise => 0x0c,
            Purpose::ByzRandom => 0x0d,
            Purpose::MaliciousSelect => 0x0e,
        }
    }
}

/// Round index reserved for the phase-1 warm-up epoch, so warm-up streams
/// never collide with co-training rounds `0..T`.
pub const WARMUP_ROUND: u64 = u64::MAX;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

// splitmix64 finalizer; also used to fold key fields together.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic stream of pseudo-random values.
///
/// Internally a splitmix64 sequence whose start state is a hash of the key
/// fields. Not cryptographically secure; statistical quality is sufficient
/// for simulation.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

impl RngStream {
    /// Creates the stream for `(seed, purpose, a, b, c)`.
    pub fn new(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> Self {
        let mut h = mix(seed ^ GAMMA);
        h = mix(h ^ purpose.tag().wrapping_mul(GAMMA));
        h = mix(h ^ a.wrapping_add(GAMMA));
        h = mix(h ^ b.wrapping_add(GAMMA.wrapping_mul(2)));
        h = mix(h ^ c.wrapping_add(GAMMA.wrapping_mul(3)));
        Self { state: h }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, bound)`. High-bits multiply; bias is negligible for
    /// simulation bounds.
    pub fn next_usize(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. One value per call; the sine half is
    /// discarded to keep the stream stateless beyond its counter.
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_usize(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in selection order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_usize(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
