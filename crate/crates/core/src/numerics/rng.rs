use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

pub type Rng64 = Pcg64Mcg;

/// Deterministic generator for `seed`, decorrelated per `stream` label.
pub fn seeded(seed: u64, stream: &str) -> Rng64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng64::seed_from_u64(seed ^ h.rotate_left(17))
}

/// A child seed for `label`, stable across runs. Kept below 2^63 so it
/// survives TOML manifests, which store signed 64-bit integers.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    seeded(seed, label).next_u64() >> 1
}
