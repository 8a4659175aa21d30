//! Tokenization interface shared by corpus chunking and the training backend.
//!
//! Token counts stored on chunks are defined by whatever tokenizer the
//! training backend uses, so both sides take the same [`Tokenizer`] trait.
//! The shipped implementation segments text losslessly (the concatenation
//! of segments reproduces the input byte for byte) and hashes each segment
//! into a bounded vocabulary, which keeps the tiny backend's embedding
//! table small without a learned vocab.

pub const PAD_TOKEN: u32 = 0;
pub const BOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
pub const NUM_SPECIAL_TOKENS: u32 = 3;

pub trait Tokenizer: Send + Sync {
    /// Token ids for a text, one per segment, without BOS/EOS.
    fn encode(&self, text: &str) -> Vec<u32>;

    /// Lossless segmentation: concatenating the returned slices yields
    /// `text` exactly, and there is one segment per encoded token.
    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.segment(text).len()
    }

    fn vocab_size(&self) -> u32;
}

/// Segments text into maximal alphanumeric runs and single non-alphanumeric
/// characters, then maps each segment to `NUM_SPECIAL_TOKENS..vocab` by a
/// stable FNV-1a hash.
#[derive(Debug, Clone)]
pub struct HashSegmentTokenizer {
    vocab: u32,
}

impl HashSegmentTokenizer {
    pub fn new(vocab: u32) -> Self {
        assert!(
            vocab > NUM_SPECIAL_TOKENS,
            "vocab must exceed the {NUM_SPECIAL_TOKENS} reserved special tokens"
        );
        Self { vocab }
    }

    fn segment_id(&self, segment: &str) -> u32 {
        let slots = self.vocab - NUM_SPECIAL_TOKENS;
        NUM_SPECIAL_TOKENS + (fnv1a64(segment.as_bytes()) % u64::from(slots)) as u32
    }
}

impl Tokenizer for HashSegmentTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        self.segment(text)
            .into_iter()
            .map(|s| self.segment_id(s))
            .collect()
    }

    fn segment<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut run_start: Option<usize> = None;
        for (i, ch) in text.char_indices() {
            if ch.is_alphanumeric() {
                if run_start.is_none() {
                    run_start = Some(i);
                }
            } else {
                if let Some(s) = run_start.take() {
                    out.push(&text[s..i]);
                }
                out.push(&text[i..i + ch.len_utf8()]);
            }
        }
        if let Some(s) = run_start {
            out.push(&text[s..]);
        }
        out
    }

    fn vocab_size(&self) -> u32 {
        self.vocab
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> HashSegmentTokenizer {
        HashSegmentTokenizer::new(256)
    }

    #[test]
    fn segmentation_is_lossless() {
        let t = tok();
        let text = "Hello, wörld! 42\n  done";
        assert_eq!(t.segment(text).concat(), text);
    }

    #[test]
    fn words_are_single_tokens_and_punctuation_separate() {
        let t = tok();
        let segs = t.segment("ab cd.");
        assert_eq!(segs, vec!["ab", " ", "cd", "."]);
        assert_eq!(t.count("ab cd."), 4);
    }

    #[test]
    fn identical_text_encodes_identically() {
        let t = tok();
        assert_eq!(t.encode("same text"), t.encode("same text"));
    }

    #[test]
    fn ids_stay_in_vocab_and_off_specials() {
        let t = tok();
        for id in t.encode("a b c d e f g 1 2 3 . , !") {
            assert!(id >= NUM_SPECIAL_TOKENS && id < t.vocab_size());
        }
    }

    proptest! {
        #[test]
        fn segments_always_reassemble(text in "\\PC{0,200}") {
            let t = tok();
            prop_assert_eq!(t.segment(&text).concat(), text.clone());
            prop_assert_eq!(t.encode(&text).len(), t.count(&text));
        }
    }
}
