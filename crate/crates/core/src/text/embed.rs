use super::{DataError, Vocabulary, NUM_RESERVED};
use crate::autodiff::Tensor;

/// Re-indexes a per-token table (`[V, E]` matrix or `[V]` vector) from
/// `src_vocab` to `dst_vocab`.
///
/// Tokens known to both vocabularies keep their source row bit for bit.
/// Tokens only in the destination get the mean of the source rows, where the
/// mean skips the reserved special tokens whenever the source has any other
/// rows.
pub fn transfer_embeddings(
    src_vocab: &Vocabulary,
    src: &Tensor,
    dst_vocab: &Vocabulary,
) -> Result<Tensor, DataError> {
    let rows = src.shape()[0];
    if rows != src_vocab.len() {
        return Err(DataError::DimensionMismatch {
            expected: src_vocab.len(),
            found: rows,
        });
    }
    let width = src.numel() / rows;
    let data = src.data();

    let first = if rows > NUM_RESERVED { NUM_RESERVED } else { 0 };
    let mut mean = vec![0.0; width];
    for r in first..rows {
        for (m, v) in mean.iter_mut().zip(&data[r * width..(r + 1) * width]) {
            *m += v;
        }
    }
    let count = (rows - first) as f64;
    mean.iter_mut().for_each(|m| *m /= count);

    let mut out = Vec::with_capacity(dst_vocab.len() * width);
    for tok in dst_vocab.tokens() {
        match src_vocab.get(tok) {
            Some(r) => out.extend_from_slice(&data[r * width..(r + 1) * width]),
            None => out.extend_from_slice(&mean),
        }
    }
    let mut shape = src.shape().to_vec();
    shape[0] = dst_vocab.len();
    Tensor::new(shape, out).map_err(|e| DataError::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        let toks: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        Vocabulary::build([&toks], 100, 1).unwrap()
    }

    #[test]
    fn identity_transfer_is_bit_exact() {
        let v = vocab(&["price", "rate", "rate"]);
        let m = Tensor::new(vec![6, 2], (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let out = transfer_embeddings(&v, &m, &v).unwrap();
        assert!(out.bit_eq(&m));
    }

    #[test]
    fn shared_rows_copied_and_oov_gets_mean() {
        let src = vocab(&["a", "b", "b"]); // b -> 4, a -> 5
        let mut data = vec![9.0; 8];
        data.extend([3.0, 3.0, 1.0, 1.0]);
        let m = Tensor::new(vec![6, 2], data).unwrap();
        let dst = vocab(&["a", "zeta", "zeta"]); // zeta -> 4, a -> 5
        let out = transfer_embeddings(&src, &m, &dst).unwrap();
        assert_eq!(out.row(dst.get("a").unwrap()), &[1.0, 1.0]);
        assert_eq!(out.row(dst.get("zeta").unwrap()), &[2.0, 2.0]);
        assert_eq!(out.row(0), &[9.0, 9.0]);
    }

    #[test]
    fn vectors_transfer_too() {
        let src = vocab(&["a"]);
        let bias = Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 5.0]);
        let dst = vocab(&["q"]);
        let out = transfer_embeddings(&src, &bias, &dst).unwrap();
        assert_eq!(out.shape(), &[5]);
        assert_eq!(out.data()[4], 5.0);
    }

    #[test]
    fn row_count_must_match() {
        let v = vocab(&["a"]);
        let m = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            transfer_embeddings(&v, &m, &v),
            Err(DataError::DimensionMismatch { .. })
        ));
    }
}
