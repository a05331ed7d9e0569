use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub const EMBED_DIM: usize = 256;

/// Deterministic text → vector map used for similarity clustering.
pub trait Embedder {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Character 3-grams of the lower-cased, `#`-padded text, hashed (FNV-1a)
/// into [`EMBED_DIM`] count buckets and L2-normalized. Entries are
/// non-negative, so cosine similarities lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrigramEmbedder;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for TrigramEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut padded = String::from("#");
        padded.push_str(&text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase());
        padded.push('#');
        let chars: Vec<char> = padded.chars().collect();
        let mut v = vec![0.0; EMBED_DIM];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            v[(fnv1a(&buf[..n]) % EMBED_DIM as u64) as usize] += 1.0;
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = TrigramEmbedder;
        let a = e.embed("Heart Failure");
        assert_eq!(a, e.embed("Heart Failure"));
        assert_eq!(a, e.embed("  heart   failure "));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x >= 0.0));
    }
}
