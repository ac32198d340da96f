//! Named seed streams derived from one master seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `SHA-256(master_le ‖ name)`.
pub fn stream_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// The streams a training run draws from. Changing one name's consumer
/// leaves the others untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SeedStreams {
    pub master: u64,
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
    pub val_sampler: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            data: stream_seed(master, "data"),
            init: stream_seed(master, "init"),
            shuffle: stream_seed(master, "shuffle"),
            val_sampler: stream_seed(master, "val-sampler"),
        }
    }
}
