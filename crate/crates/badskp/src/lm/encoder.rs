//! Lightweight text encoder: a frozen random embedding table whose encoding
//! of a token sequence is the mean of the token rows. The map is linear in
//! the table (each row enters with weight count/len), which keeps node
//! features cheap and the whole graph-prompt path differentiable.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::lm::tokenizer::{TokenId, Tokenizer};
use crate::scalar::{cast, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct TextEncoder<T> {
    table: Mat<T>,
}

impl<T: Scalar> TextEncoder<T> {
    /// Gaussian table with standard deviation 1/sqrt(dim), seeded.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        TextEncoder {
            table: Mat::randn(vocab_size, dim, std, &mut rng),
        }
    }

    pub fn from_table(table: Mat<T>) -> Self {
        TextEncoder { table }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn table(&self) -> &Mat<T> {
        &self.table
    }

    /// Mean of the rows selected by `ids`. Empty input is an error: a node
    /// with no text has no feature.
    pub fn encode_ids(&self, ids: &[TokenId]) -> Result<Vec<T>> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence to encode"));
        }
        let mut out = vec![T::zero(); self.dim()];
        for &id in ids {
            if id >= self.vocab_size() {
                return Err(Error::UnknownTokenId(id));
            }
            let row = self.table.row(id);
            for (o, &r) in out.iter_mut().zip(row.iter()) {
                *o += r;
            }
        }
        let inv = cast::<T>(1.0) / cast::<T>(ids.len() as f64);
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        Ok(out)
    }

    pub fn encode_text(&self, tokenizer: &Tokenizer, text: &str) -> Result<Vec<T>> {
        self.encode_ids(&tokenizer.tokenize(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn encoding_is_the_mean_of_token_rows() {
        // Hand-computed oracle on a 3-token text over a tiny table.
        let table = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 2.0],
            vec![3.0, 3.0],
            vec![-1.0, 5.0],
        ]);
        let enc = TextEncoder::from_table(table);
        let got = enc.encode_ids(&[1, 3, 3]).unwrap();
        // mean of rows 1, 3, 3 = ((0,2) + (-1,5) + (-1,5)) / 3
        assert_relative_eq!(got[0], -2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(got[1], 4.0, max_relative = 1e-12);
    }

    #[test]
    fn single_token_encoding_equals_its_row() {
        let enc = TextEncoder::<f64>::random(10, 4, 7);
        let got = enc.encode_ids(&[5]).unwrap();
        assert_eq!(got.as_slice(), enc.table().row(5));
    }

    #[test]
    fn empty_input_is_an_error() {
        let enc = TextEncoder::<f64>::random(10, 4, 7);
        assert!(enc.encode_ids(&[]).is_err());
    }

    #[test]
    fn same_seed_gives_identical_tables() {
        let a = TextEncoder::<f64>::random(10, 4, 42);
        let b = TextEncoder::<f64>::random(10, 4, 42);
        assert_eq!(a.table().data(), b.table().data());
    }
}
