use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DataError;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = [PAD, UNK, BOS, EOS];

/// Bijective token↔id map with per-token corpus frequencies.
///
/// Ids 0..4 are always `<pad>`, `<unk>`, `<bos>`, `<eos>`. Immutable after
/// construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    itos: Vec<String>,
    stoi: HashMap<String, usize>,
    freq: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    freq: Vec<u64>,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabRepr {
            tokens: self.itos.clone(),
            freq: self.freq.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = VocabRepr::deserialize(d)?;
        Vocabulary::from_parts(r.tokens, r.freq).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    /// Counts tokens over `streams` and keeps the `max_size - 4` most
    /// frequent with count ≥ `min_freq`, ordered by (count desc, token asc).
    pub fn build<'a, I, S>(streams: I, max_size: usize, min_freq: u64) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        if max_size < NUM_RESERVED {
            return Err(DataError::InvalidArgument(format!(
                "max_size must be at least {NUM_RESERVED}, got {max_size}"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for stream in streams {
            for tok in stream.as_ref() {
                if !RESERVED.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);

        let mut itos: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_RESERVED];
        for (tok, c) in ranked {
            itos.push(tok.to_string());
            freq.push(c);
        }
        Self::from_parts(itos, freq)
    }

    pub fn from_parts(itos: Vec<String>, freq: Vec<u64>) -> Result<Self, DataError> {
        if itos.len() != freq.len() {
            return Err(DataError::DimensionMismatch {
                expected: itos.len(),
                found: freq.len(),
            });
        }
        if itos.len() < NUM_RESERVED || itos[..NUM_RESERVED] != RESERVED {
            return Err(DataError::InvalidArgument(
                "vocabulary must start with <pad>, <unk>, <bos>, <eos>".into(),
            ));
        }
        let mut stoi = HashMap::with_capacity(itos.len());
        for (i, t) in itos.iter().enumerate() {
            if stoi.insert(t.clone(), i).is_some() {
                return Err(DataError::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { itos, stoi, freq })
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.stoi.get(token).copied()
    }

    /// Id of `token`, or the `<unk>` id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(1)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.itos.get(id).map(String::as_str)
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freq.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.itos
    }

    pub fn numericalize<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn denumericalize(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build([&toks("a a b")], 10, 1).unwrap();
        assert_eq!(v.tokens()[..4], RESERVED);
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
        assert_eq!(v.freq(4), 2);
    }

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build([&toks("a a b")], 10, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), v.unk_id());
    }

    #[test]
    fn lexicographic_tiebreak() {
        let v = Vocabulary::build([&toks("b b a a")], 10, 1).unwrap();
        assert_eq!(v.get("a"), Some(4));
        assert_eq!(v.get("b"), Some(5));
    }

    #[test]
    fn cap_includes_reserved() {
        let v = Vocabulary::build([&toks("a a a b b c")], 6, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.get("c"), None);
        assert!(Vocabulary::build([&toks("a")], 3, 1).is_err());
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocabulary::build([&toks("x y y z")], 10, 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn numericalize_inverts_on_known_tokens(words in proptest::collection::vec("[a-e]{1,3}", 1..40)) {
            let v = Vocabulary::build([&words], 1000, 1).unwrap();
            let ids = v.numericalize(&words);
            let back = v.denumericalize(&ids);
            prop_assert_eq!(back, words.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }
}
