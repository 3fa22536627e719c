use sha2::{Digest, Sha256};

/// Anything that owns named float arrays.
pub trait ParamVisitor {
    /// Visits every stored float array, including non-trainable state such as
    /// running statistics, in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&str, &[f32]));

    /// Number of trainable scalars.
    fn param_count(&self) -> usize;
}

/// SHA-256 over the little-endian bytes of every visited array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub [u8; 32]);

impl std::fmt::Display for Checksum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&hex::encode(&self.0[..16]))
    }
}

pub fn checksum(item: &dyn ParamVisitor) -> Checksum {
    let mut hasher = Sha256::new();
    item.visit(&mut |name, data| {
        hasher.update(name.as_bytes());
        hasher.update((data.len() as u64).to_le_bytes());
        for v in data {
            hasher.update(v.to_le_bytes());
        }
    });
    let mut out = [0u8; 32];
    out.copy_from_slice(&hasher.finalize());
    Checksum(out)
}
