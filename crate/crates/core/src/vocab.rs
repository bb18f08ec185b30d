//! Word-level vocabulary with the two reserved specials.
//!
//! Ids are dense: `[START]` is 0, `[PAD]` is 1, and every other surface string
//! follows in lexicographic order. Random words (the absorbing state of the
//! noising process) are drawn uniformly from the non-special ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const START: TokenId = 0;
pub const PAD: TokenId = 1;
pub const START_STR: &str = "[START]";
pub const PAD_STR: &str = "[PAD]";
const NUM_SPECIALS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from arbitrary surface strings. Duplicates collapse
    /// and the specials are always present, so `["cat", "a"]` yields
    /// `[START], [PAD], a, cat`.
    pub fn build<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| w != START_STR && w != PAD_STR)
            .collect();
        if set.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut tokens = Vec::with_capacity(set.len() + NUM_SPECIALS);
        tokens.push(START_STR.to_string());
        tokens.push(PAD_STR.to_string());
        tokens.extend(set);
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary size K, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and maps every word to its id.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Draws a word uniformly from the non-special ids.
    pub fn sample_random_word<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TokenId> {
        if self.len() <= NUM_SPECIALS {
            return Err(Error::NoSampleableTokens);
        }
        Ok(rng.gen_range(NUM_SPECIALS..self.len()) as TokenId)
    }

    /// Stable content hash, used to detect checkpoint/vocabulary mismatches.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the newline-joined tokens.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIALS || tokens[0] != START_STR || tokens[1] != PAD_STR {
            return Err(Error::Format(
                "vocabulary file must start with [START] and [PAD]".into(),
            ));
        }
        let rest = &tokens[NUM_SPECIALS..];
        if rest.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        if rest.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format(
                "vocabulary entries must be sorted and distinct".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_ids_after_specials() {
        let v = Vocabulary::build(["cat", "a"]).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id(START_STR), Some(0));
        assert_eq!(v.id(PAD_STR), Some(1));
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("cat"), Some(3));
    }

    #[test]
    fn duplicates_collapse() {
        assert_eq!(Vocabulary::build(["a", "a"]).unwrap().len(), 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            Vocabulary::build(empty),
            Err(Error::EmptyVocabulary)
        ));
        assert!(matches!(
            Vocabulary::build([START_STR, PAD_STR]),
            Err(Error::EmptyVocabulary)
        ));
    }

    #[test]
    fn encode_decode_ids() {
        let v = Vocabulary::build(["x", "y", "z"]).unwrap();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.word(id).unwrap()), Some(id));
        }
        assert_eq!(v.decode(&v.encode("z x").unwrap()), "z x");
        assert!(v.encode("nope").is_err());
    }

    #[test]
    fn single_non_special_is_always_drawn() {
        let v = Vocabulary::build(["only"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(v.sample_random_word(&mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn specials_only_cannot_sample() {
        let v = Vocabulary::from_tokens(vec![START_STR.into(), PAD_STR.into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            v.sample_random_word(&mut rng),
            Err(Error::NoSampleableTokens)
        ));
    }

    #[test]
    fn same_seed_same_draws() {
        let v = Vocabulary::build((0..50).map(|i| format!("w{i}"))).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64)
                .map(|_| v.sample_random_word(&mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["b", "a", "c"]).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("[START]\n[PAD]\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("[START]\n[PAD]\nb\na\n").is_err());
    }
}
