use super::SparseVector;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// All 3-character windows of the `#`-padded, lowercased words, in text order.
pub fn triletter_grams(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut grams = Vec::new();
    for word in lower.split_whitespace() {
        let padded: Vec<char> = std::iter::once('#')
            .chain(word.chars())
            .chain(std::iter::once('#'))
            .collect();
        grams.extend(padded.windows(3).map(|w| w.iter().collect::<String>()));
    }
    grams
}

/// Hashes tri-letter grams into a multi-hot vector of width `dim`.
/// Collisions merge their counts.
pub fn triletter_featurize(text: &str, dim: usize) -> SparseVector {
    assert!(dim >= 1, "dim must be positive");
    SparseVector::accumulate(
        triletter_grams(text)
            .iter()
            .map(|g| ((fnv1a(g.as_bytes()) % dim as u64) as u32, 1.0)),
    )
}
