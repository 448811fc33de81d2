//! Vocabulary, caption encoding and masked-language-model corruption.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[MASK]", "[BOS]", "[EOS]", "[UNK]"];

pub fn is_special(id: usize) -> bool {
    id < SPECIALS.len()
}

/// Lowercase whitespace tokenization shared by captions and metrics.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words with frequency ≥ `min_freq`, ordered by descending frequency
    /// then lexicographically, after the five specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in tokenize(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(
                "vocabulary must start with the five special tokens".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `word`, or [`UNK`] when absent.
    pub fn lookup(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Words of a generated id sequence. `[PAD]`, `[MASK]`, `[BOS]` and
    /// `[EOS]` are dropped; `[UNK]` is kept as its literal token.
    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !is_special(id) || id == UNK)
            .filter_map(|&id| self.decode(id).map(str::to_string))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Fixed-length `[BOS] w… [EOS] [PAD]…` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
    /// Count of real tokens including `[BOS]` and `[EOS]`.
    pub length: usize,
}

impl CaptionTokens {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Positions holding words (not `[BOS]`, `[EOS]`, `[PAD]` or `[UNK]`).
    pub fn word_positions(&self) -> Vec<usize> {
        (1..self.length.saturating_sub(1))
            .filter(|&i| !is_special(self.ids[i]))
            .collect()
    }
}

pub fn encode_caption(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<CaptionTokens> {
    if max_len < 3 {
        return Err(Error::Config(format!("caption length {max_len} < 3")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 2)
            .map(|w| vocab.lookup(w)),
    );
    ids.push(EOS);
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(CaptionTokens { ids, length })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmSample {
    pub corrupted: CaptionTokens,
    pub supervised: Vec<bool>,
    /// Original ids; only meaningful where `supervised` is set.
    pub targets: Vec<usize>,
}

/// Replaces exactly `round(ratio · k)` of the `k` word positions with
/// `[MASK]`, chosen uniformly from the seeded stream.
pub fn apply_mlm_mask(tokens: &CaptionTokens, ratio: f64, seed: u64) -> Result<MlmSample> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let positions = tokens.word_positions();
    let count = (ratio * positions.len() as f64).round() as usize;
    let mut corrupted = tokens.clone();
    let mut supervised = vec![false; tokens.ids.len()];
    for pick in Rng::new(seed).choose_indices(positions.len(), count) {
        let p = positions[pick];
        corrupted.ids[p] = MASK;
        supervised[p] = true;
    }
    Ok(MlmSample {
        corrupted,
        supervised,
        targets: tokens.ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["a red square moves left", "a blue circle moves up"], 1).unwrap()
    }

    #[test]
    fn build_vocab_examples() {
        let v = Vocabulary::build(&["a red square moves left"], 1).unwrap();
        assert_eq!(v.len(), 10);
        assert_eq!(
            v,
            Vocabulary::build(&["a red square moves left"], 1).unwrap()
        );

        let v = Vocabulary::build(&["a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));

        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = vocab();
        assert_eq!(&v.tokens()[5..7], &["a", "moves"]);
        assert_eq!(
            &v.tokens()[7..],
            &["blue", "circle", "left", "red", "square", "up"]
        );
        for id in 0..v.len() {
            assert_eq!(v.lookup(v.decode(id).unwrap()), id);
        }
    }

    #[test]
    fn encode_caption_examples() {
        let v = vocab();
        let c = encode_caption("a red square", &v, 8).unwrap();
        let a = v.lookup("a");
        let r = v.lookup("red");
        let s = v.lookup("square");
        assert_eq!(c.ids, vec![BOS, a, r, s, EOS, PAD, PAD, PAD]);
        assert_eq!(c.length, 5);

        let c = encode_caption("zzz", &v, 4).unwrap();
        assert_eq!(c.ids, vec![BOS, UNK, EOS, PAD]);

        let c = encode_caption("a b c d e f g h i j", &v, 6).unwrap();
        assert_eq!(c.ids.len(), 6);
        assert_eq!(c.ids[5], EOS);
        assert_eq!(c.length, 6);

        assert!(encode_caption("a", &v, 2).is_err());
    }

    #[test]
    fn mlm_examples() {
        let v = Vocabulary::build(&["a b c d e f"], 1).unwrap();
        let c = encode_caption("a b c d e f", &v, 10).unwrap();

        let s = apply_mlm_mask(&c, 0.0, 3).unwrap();
        assert_eq!(s.corrupted, c);
        assert!(s.supervised.iter().all(|&b| !b));

        let s = apply_mlm_mask(&c, 1.0, 3).unwrap();
        assert!((1..7).all(|i| s.corrupted.ids[i] == MASK));
        assert_eq!(s.corrupted.ids[0], BOS);
        assert_eq!(s.corrupted.ids[7], EOS);

        // k = 6, ratio 0.15 → round(0.9) = 1. Enumerate the selection
        // directly from the stream: first draw picks slot below(6).
        let s = apply_mlm_mask(&c, 0.15, 42).unwrap();
        let expected = 1 + (crate::rng::Rng::new(42).next_u64() % 6) as usize;
        let masked: Vec<usize> = (0..10).filter(|&i| s.supervised[i]).collect();
        assert_eq!(masked, vec![expected]);
        assert_eq!(s, apply_mlm_mask(&c, 0.15, 42).unwrap());
    }

    proptest! {
        #[test]
        fn mlm_never_touches_specials(words in prop::collection::vec("[a-e]", 0..12),
                                      ratio in 0.0f64..=1.0, seed: u64) {
            let v = Vocabulary::build(&["a b c d e"], 1).unwrap();
            let c = encode_caption(&words.join(" "), &v, 10).unwrap();
            let s = apply_mlm_mask(&c, ratio, seed).unwrap();
            let k = c.word_positions().len();
            prop_assert_eq!(s.supervised.iter().filter(|&&b| b).count(),
                            (ratio * k as f64).round() as usize);
            for i in 0..c.ids.len() {
                if s.supervised[i] {
                    prop_assert!(!is_special(c.ids[i]));
                    prop_assert_eq!(s.corrupted.ids[i], MASK);
                    prop_assert_eq!(s.targets[i], c.ids[i]);
                } else {
                    prop_assert_eq!(s.corrupted.ids[i], c.ids[i]);
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(words in prop::collection::vec("[a-e]", 0..12), n in 3usize..16) {
            let v = Vocabulary::build(&["a b c d e"], 1).unwrap();
            let text = words.join(" ").to_uppercase();
            let c = encode_caption(&text, &v, n).unwrap();
            let expect: Vec<String> = tokenize(&text).into_iter().take(n - 2).collect();
            prop_assert_eq!(v.words(&c.ids), expect);
            let eos = c.ids.iter().position(|&i| i == EOS).unwrap();
            prop_assert!(c.ids[..eos].iter().all(|&i| i != PAD));
        }
    }
}
