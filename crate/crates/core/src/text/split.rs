use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Index partition of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

fn allocate(
    mut idx: Vec<usize>,
    valid_frac: f64,
    test_frac: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Split,
) {
    idx.shuffle(rng);
    let n = idx.len() as f64;
    let n_valid = (n * valid_frac).round() as usize;
    let n_test = ((n * test_frac).round() as usize).min(idx.len() - n_valid.min(idx.len()));
    let n_valid = n_valid.min(idx.len());
    out.valid.extend(&idx[..n_valid]);
    out.test.extend(&idx[n_valid..n_valid + n_test]);
    out.train.extend(&idx[n_valid + n_test..]);
}

/// Per-class shuffled split; each class contributes `round(n·frac)` items to
/// validation and test and the rest to train. Output indices are sorted.
pub fn stratified_split<K: Ord>(keys: &[K], valid_frac: f64, test_frac: f64, seed: u64) -> Split {
    let mut by_class: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        by_class.entry(k).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split::default();
    for (_, idx) in by_class {
        allocate(idx, valid_frac, test_frac, &mut rng, &mut out);
    }
    out.train.sort_unstable();
    out.valid.sort_unstable();
    out.test.sort_unstable();
    out
}

pub fn random_split(n: usize, valid_frac: f64, test_frac: f64, seed: u64) -> Split {
    let keys = vec![(); n];
    stratified_split(&keys, valid_frac, test_frac, seed)
}
