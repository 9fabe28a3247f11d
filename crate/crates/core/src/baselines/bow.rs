use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::text::Vocabulary;

/// Token counts over vocabulary ids; indices strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseVector {
    dim: usize,
    entries: Vec<(usize, u32)>,
}

impl SparseVector {
    /// Builds from arbitrary `(index, count)` pairs, merging duplicates and
    /// dropping zeros.
    pub fn from_counts(dim: usize, pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut map = BTreeMap::new();
        for (i, c) in pairs {
            assert!(i < dim, "index {i} outside dimension {dim}");
            *map.entry(i).or_insert(0) += c;
        }
        Self {
            dim,
            entries: map.into_iter().filter(|&(_, c)| c > 0).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn get(&self, index: usize) -> u32 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0, |k| self.entries[k].1)
    }
}

/// Bag-of-words counts; out-of-vocabulary tokens count towards `<unk>`.
pub fn bow_featurize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> SparseVector {
    SparseVector::from_counts(
        vocab.len(),
        tokens.iter().map(|t| (vocab.id(t.as_ref()), 1)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::UNK;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        let toks: Vec<String> = ["a", "a", "b"].map(String::from).to_vec();
        Vocabulary::build([&toks], 10, 1).unwrap()
    }

    #[test]
    fn counts_in_vocab_tokens() {
        let v = bow_featurize(&["a", "a", "b"], &vocab());
        assert_eq!(v.entries(), &[(4, 2), (5, 1)]);
        assert_eq!(v.dim(), 6);
    }

    #[test]
    fn empty_and_oov() {
        let v = vocab();
        assert_eq!(bow_featurize::<&str>(&[], &v).nnz(), 0);
        let o = bow_featurize(&["zz", "yy", "xx"], &v);
        assert_eq!(o.entries(), &[(v.id(UNK), 3)]);
    }

    proptest! {
        #[test]
        fn total_equals_token_count(words in proptest::collection::vec("[a-d]{1,2}", 0..40)) {
            let v = vocab();
            let s = bow_featurize(&words, &v);
            prop_assert_eq!(s.total(), words.len() as u64);
            prop_assert!(s.entries().windows(2).all(|w| w[0].0 < w[1].0));
        }
    }
}
