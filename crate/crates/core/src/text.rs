//! Shared text normalization.
//!
//! The hash embedder, the polarity mapper and the n-gram metrics all see the
//! same token stream: lowercase, split on every character that is neither
//! alphanumeric nor an apostrophe.

/// Lowercases `text` and splits it into word tokens. Apostrophes stay inside
/// tokens so contractions like `don't` survive as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|ch: char| !(ch.is_alphanumeric() || ch == '\''))
        .filter(|tok| !tok.is_empty() && !tok.chars().all(|c| c == '\''))
        .map(str::to_owned)
        .collect()
}

/// Lowercase plus whitespace collapse; the key used to detect duplicate
/// corpus queries.
pub fn normalize_query(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// 64-bit FNV-1a over the bytes of `text`, keyed by `seed`.
///
/// Stable across platforms and releases, unlike `DefaultHasher`.
pub fn seeded_hash(text: &str, seed: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    for byte in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(PRIME);
    }
    // final avalanche so low bits depend on every input byte
    hash ^= hash >> 33;
    hash = hash.wrapping_mul(0xff51_afd7_ed55_8ccd);
    hash ^= hash >> 33;
    hash
}
