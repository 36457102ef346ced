//! 64-bit FNV-1a hashing with a stable definition, so hashes written into
//! artifacts stay comparable across runs, platforms and compiler versions
//! (std's `DefaultHasher` makes no such promise).

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher.
#[derive(Debug, Clone)]
pub struct Fnv1a {
    state: u64,
}

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a {
            state: OFFSET_BASIS,
        }
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(PRIME);
        }
    }

    pub fn write_u64(&mut self, value: u64) {
        self.write_bytes(&value.to_le_bytes());
    }

    pub fn write_str(&mut self, value: &str) {
        // Length prefix keeps concatenated strings unambiguous.
        self.write_u64(value.len() as u64);
        self.write_bytes(value.as_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a::new()
    }
}

/// One-shot hash of a byte slice.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_bytes(bytes);
    h.finish()
}

/// Stable per-stage seed derivation: every consumer of randomness hashes the
/// root seed with its own label, so stages can re-run independently without
/// sharing RNG state.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(root);
    h.write_str(label);
    h.finish()
}
