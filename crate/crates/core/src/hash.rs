use sha2::{Digest, Sha256};

/// Domain-separated SHA-256 truncated to 64 bits.
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Sha256::new();
        h.update((domain.len() as u32).to_le_bytes());
        h.update(domain.as_bytes());
        Self(h)
    }

    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> u64 {
        let digest = self.0.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(out)
    }
}

pub fn hash_str(domain: &str, s: &str) -> u64 {
    let mut h = ContentHasher::new(domain);
    h.update(s.as_bytes());
    h.finish()
}
