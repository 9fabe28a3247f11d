use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Vocabulary};

/// Row-major matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMatrix {
    rows: usize,
    cols: usize,
    data: Vec<usize>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Self {
        assert_eq!(rows * cols, data.len(), "id matrix size");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged id rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Ids at time step `c` for every row.
    pub fn column(&self, c: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> IdMatrix {
        let data = (0..self.rows)
            .flat_map(|r| self.row(r)[start..end].iter().copied())
            .collect();
        IdMatrix::new(self.rows, end - start, data)
    }
}

/// One BPTT window: `target[r][t] == input[r][t+1]` within each lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmBatch {
    pub input: IdMatrix,
    pub target: IdMatrix,
}

/// Splits a token stream into `batch_size` contiguous lanes and walks them
/// in windows of `bptt_len` steps.
#[derive(Clone, Debug)]
pub struct LmBatchStream {
    lanes: IdMatrix,
    bptt_len: usize,
    pos: usize,
}

impl LmBatchStream {
    pub fn batch_size(&self) -> usize {
        self.lanes.rows()
    }

    pub fn bptt_len(&self) -> usize {
        self.bptt_len
    }

    pub fn lane_len(&self) -> usize {
        self.lanes.cols()
    }

    /// Number of windows a full pass yields.
    pub fn num_batches(&self) -> usize {
        (self.lane_len() - 1).div_ceil(self.bptt_len)
    }
}

impl Iterator for LmBatchStream {
    type Item = LmBatch;

    fn next(&mut self) -> Option<LmBatch> {
        let last = self.lanes.cols() - 1;
        if self.pos >= last {
            return None;
        }
        let len = self.bptt_len.min(last - self.pos);
        let input = self.lanes.columns(self.pos, self.pos + len);
        let target = self.lanes.columns(self.pos + 1, self.pos + len + 1);
        self.pos += len;
        Some(LmBatch { input, target })
    }
}

/// Language-model batches over `ids`. The remainder that does not fill a
/// whole lane is dropped.
pub fn lm_batches(
    ids: &[usize],
    batch_size: usize,
    bptt_len: usize,
) -> Result<LmBatchStream, DataError> {
    if batch_size == 0 || bptt_len == 0 {
        return Err(DataError::InvalidArgument(
            "batch_size and bptt_len must be positive".into(),
        ));
    }
    if ids.len() <= batch_size * 2 {
        return Err(DataError::SequenceTooShort {
            len: ids.len(),
            batch_size,
        });
    }
    let lane_len = ids.len() / batch_size;
    let lanes = IdMatrix::new(batch_size, lane_len, ids[..batch_size * lane_len].to_vec());
    Ok(LmBatchStream {
        lanes,
        bptt_len,
        pos: 0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Left,
    Right,
}

/// Supervision attached to a task example before label encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskTarget {
    Class(String),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub tokens: Vec<String>,
    pub target: TaskTarget,
}

/// Encoded supervision: a class index or a real-valued score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetValue {
    Class(usize),
    Score(f64),
}

/// Declared, ordered set of class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(DataError::InvalidArgument("empty label set".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(DataError::InvalidArgument("duplicate labels".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, label: &str) -> Result<usize, DataError> {
        self.names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| DataError::UnknownLabel {
                label: label.to_string(),
                declared: self.names.clone(),
            })
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }
}

/// Padded batch of variable-length sequences.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub ids: IdMatrix,
    pub lengths: Vec<usize>,
    pub targets: Vec<TargetValue>,
    pub pad: PadPolicy,
    /// Position of each row in the input example list.
    pub source_index: Vec<usize>,
}

impl SeqBatch {
    /// `valid[t][row]`: whether step `t` of `row` holds a real token.
    pub fn valid_mask(&self) -> Vec<Vec<bool>> {
        let width = self.ids.cols();
        (0..width)
            .map(|t| {
                self.lengths
                    .iter()
                    .map(|&len| match self.pad {
                        PadPolicy::Left => t >= width - len,
                        PadPolicy::Right => t < len,
                    })
                    .collect()
            })
            .collect()
    }
}

fn encode_target(t: &TaskTarget, labels: Option<&LabelSet>) -> Result<TargetValue, DataError> {
    match (t, labels) {
        (TaskTarget::Class(name), Some(ls)) => Ok(TargetValue::Class(ls.index(name)?)),
        (TaskTarget::Class(name), None) => Err(DataError::InvalidArgument(format!(
            "class label {name:?} given but no label set declared"
        ))),
        (TaskTarget::Score(s), _) => Ok(TargetValue::Score(*s)),
    }
}

const BUCKET_BATCHES: usize = 8;

/// Numericalizes and pads examples into batches.
///
/// With an `rng` the examples are shuffled, grouped into buckets of a few
/// batches, and sorted by length (longest first) inside each bucket so that
/// batches carry little padding; batch order is then shuffled. Without one the
/// input order is kept.
pub fn classification_batches<R: Rng + ?Sized>(
    examples: &[TaskExample],
    vocab: &Vocabulary,
    labels: Option<&LabelSet>,
    batch_size: usize,
    pad: PadPolicy,
    rng: Option<&mut R>,
) -> Result<Vec<SeqBatch>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidArgument(
            "batch_size must be positive".into(),
        ));
    }
    let mut encoded = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.tokens.is_empty() {
            return Err(DataError::invalid(i, "example has no tokens"));
        }
        encoded.push((
            vocab.numericalize(&ex.tokens),
            encode_target(&ex.target, labels)?,
        ));
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    match rng {
        Some(rng) => {
            order.shuffle(rng);
            for bucket in order.chunks_mut(batch_size * BUCKET_BATCHES) {
                bucket.sort_by_key(|&i| std::cmp::Reverse(encoded[i].0.len()));
                chunks.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
            }
            chunks.shuffle(rng);
        }
        None => chunks.extend(order.chunks(batch_size).map(<[usize]>::to_vec)),
    }

    Ok(chunks
        .into_iter()
        .map(|idx| {
            let width = idx.iter().map(|&i| encoded[i].0.len()).max().unwrap_or(0);
            let mut data = Vec::with_capacity(idx.len() * width);
            for &i in &idx {
                let ids = &encoded[i].0;
                let padding = std::iter::repeat_n(vocab.pad_id(), width - ids.len());
                match pad {
                    PadPolicy::Left => data.extend(padding.chain(ids.iter().copied())),
                    PadPolicy::Right => data.extend(ids.iter().copied().chain(padding)),
                }
            }
            SeqBatch {
                ids: IdMatrix::new(idx.len(), width, data),
                lengths: idx.iter().map(|&i| encoded[i].0.len()).collect(),
                targets: idx.iter().map(|&i| encoded[i].1).collect(),
                pad,
                source_index: idx,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lane_partition_example() {
        let ids: Vec<usize> = (1..=12).collect();
        let mut s = lm_batches(&ids, 2, 3).unwrap();
        let b = s.next().unwrap();
        assert_eq!(b.input.row(0), &[1, 2, 3]);
        assert_eq!(b.input.row(1), &[7, 8, 9]);
        assert_eq!(b.target.row(0), &[2, 3, 4]);
        assert_eq!(b.target.row(1), &[8, 9, 10]);
        let b = s.next().unwrap();
        assert_eq!(b.input.row(0), &[4, 5]);
        assert_eq!(b.target.row(1), &[11, 12]);
        assert!(s.next().is_none());
    }

    #[test]
    fn single_lane_whole_stream() {
        let ids: Vec<usize> = (0..10).collect();
        let batches: Vec<_> = lm_batches(&ids, 1, 9).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].input.row(0), &ids[..9]);
        assert_eq!(batches[0].target.row(0), &ids[1..]);
    }

    #[test]
    fn too_short_stream() {
        assert!(matches!(
            lm_batches(&[1, 2, 3, 4], 2, 2),
            Err(DataError::SequenceTooShort { .. })
        ));
    }

    proptest! {
        #[test]
        fn targets_are_next_tokens(len in 5usize..300, bs in 1usize..6, bptt in 1usize..20) {
            prop_assume!(len > bs * 2);
            let ids: Vec<usize> = (0..len).map(|i| i * 7 % 101).collect();
            let stream = lm_batches(&ids, bs, bptt).unwrap();
            let lane_len = stream.lane_len();
            let expected = stream.num_batches();
            let mut seen = 0;
            let mut col = 0;
            for b in stream {
                for r in 0..bs {
                    for t in 0..b.input.cols() {
                        let pos = r * lane_len + col + t;
                        prop_assert_eq!(b.input.at(r, t), ids[pos]);
                        prop_assert_eq!(b.target.at(r, t), ids[pos + 1]);
                    }
                }
                col += b.input.cols();
                seen += 1;
            }
            prop_assert_eq!(seen, expected);
            prop_assert_eq!(col, lane_len - 1);
        }
    }

    fn ex(words: &str, label: &str) -> TaskExample {
        TaskExample {
            tokens: words.split_whitespace().map(String::from).collect(),
            target: TaskTarget::Class(label.into()),
        }
    }

    fn vocab() -> Vocabulary {
        let toks: Vec<String> = "a b c d".split(' ').map(String::from).collect();
        Vocabulary::build([&toks], 100, 1).unwrap()
    }

    #[test]
    fn left_padding() {
        let labels = LabelSet::new(["x", "y"]).unwrap();
        let exs = [ex("a b", "x"), ex("a b c d", "y")];
        let b = classification_batches::<ChaCha8Rng>(
            &exs,
            &vocab(),
            Some(&labels),
            2,
            PadPolicy::Left,
            None,
        )
        .unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].ids.cols(), 4);
        assert_eq!(&b[0].ids.row(0)[..2], &[0, 0]);
        assert_eq!(b[0].lengths, vec![2, 4]);
        let valid = b[0].valid_mask();
        let row0: Vec<bool> = valid.iter().map(|v| v[0]).collect();
        assert_eq!(row0, vec![false, false, true, true]);
    }

    #[test]
    fn identical_lengths_need_no_padding() {
        let labels = LabelSet::new(["x"]).unwrap();
        let exs = [ex("a b c", "x"), ex("c b a", "x")];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = classification_batches(
            &exs,
            &vocab(),
            Some(&labels),
            2,
            PadPolicy::Left,
            Some(&mut rng),
        )
        .unwrap();
        assert!(b[0]
            .ids
            .row(0)
            .iter()
            .chain(b[0].ids.row(1))
            .all(|&i| i != 0));
    }

    #[test]
    fn unknown_label_lists_declared_set() {
        let labels = LabelSet::new(["x", "y"]).unwrap();
        let err = classification_batches::<ChaCha8Rng>(
            &[ex("a", "z")],
            &vocab(),
            Some(&labels),
            1,
            PadPolicy::Left,
            None,
        )
        .unwrap_err();
        match err {
            DataError::UnknownLabel { label, declared } => {
                assert_eq!(label, "z");
                assert_eq!(declared, vec!["x", "y"]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn buckets_are_sorted_longest_first() {
        let labels = LabelSet::new(["x"]).unwrap();
        let exs: Vec<TaskExample> = (1..=8).map(|n| ex(&vec!["a"; n].join(" "), "x")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = classification_batches(
            &exs,
            &vocab(),
            Some(&labels),
            2,
            PadPolicy::Left,
            Some(&mut rng),
        )
        .unwrap();
        let mut all: Vec<usize> = batches
            .iter()
            .flat_map(|b| b.source_index.clone())
            .collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.lengths[0] >= b.lengths[1]);
            assert_eq!(b.lengths[0] - b.lengths[1], 1);
        }
    }
}
