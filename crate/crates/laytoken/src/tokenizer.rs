//! Deterministic byte-level tokenizer.
//!
//! One token per UTF-8 byte, so token counts are exactly reproducible and
//! independent of any learned vocabulary. IDs 0..=255 are the raw byte
//! values; four reserved specials sit above them.

/// Padding (reserved, unused in sequences).
pub const PAD: u32 = 256;
/// Beginning-of-sequence marker.
pub const BOS: u32 = 257;
/// Separator between document, question, and answer.
pub const SEP: u32 = 258;
/// Reserved placeholder for layout positions in token-id space.
pub const LAY: u32 = 259;

/// 256 byte values plus the four specials.
pub const VOCAB_SIZE: usize = 260;

/// One token id per UTF-8 byte of `text`.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Token count of `text` under the byte tokenizer.
pub fn token_count(text: &str) -> usize {
    text.len()
}

/// Inverse of [`tokenize`]. Special ids (>= 256) are dropped; invalid UTF-8
/// byte runs are replaced with U+FFFD.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_map_to_identity_ids() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
    }

    #[test]
    fn empty_string_is_empty() {
        assert_eq!(tokenize(""), Vec::<u32>::new());
    }

    #[test]
    fn specials_sit_above_bytes() {
        assert_eq!(PAD, 256);
        assert_eq!(LAY, 259);
        assert_eq!(VOCAB_SIZE, 260);
    }

    #[test]
    fn multibyte_text_counts_bytes_not_chars() {
        let s = "é€"; // 2 + 3 bytes
        assert_eq!(tokenize(s).len(), 5);
        assert_eq!(token_count(s), 5);
    }

    proptest! {
        #[test]
        fn roundtrip_any_utf8(s in "\\PC*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
