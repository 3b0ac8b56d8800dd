use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::nn::EMBEDDING_INIT_RANGE;
use crate::tensor::Tensor;

/// A `[vocab, dim]` embedding matrix assembled from a pretrained text file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedEmbeddings {
    pub matrix: Tensor,
    /// Vocabulary entries (excluding padding and unknown) found in the file.
    pub found: usize,
    /// `found` over the number of non-reserved vocabulary entries.
    pub coverage: f64,
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<LoadedEmbeddings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path, vocab, dim, seed)
}

/// Reads `token v1 .. vd` lines (an optional `count dim` header is
/// skipped). Tokens absent from the file get uniform random vectors
/// from `seed`; the padding row stays zero.
pub fn parse_embeddings(text: &str, origin: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<LoadedEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = Tensor::zeros(&[vocab.len(), dim]);
    for id in 0..vocab.len() {
        if id != PAD_ID {
            for v in matrix.row_mut(id) {
                *v = rng.random_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE);
            }
        }
    }

    let mut seen = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::ParseLine {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected {dim} values for `{token}`, found {}", values.len()),
            });
        }
        let Some(id) = vocab.get(token) else { continue };
        if id == PAD_ID || seen[id] {
            continue;
        }
        let row = matrix.row_mut(id);
        for (slot, raw) in row.iter_mut().zip(&values) {
            *slot = raw.parse().map_err(|_| Error::ParseLine {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("`{raw}` is not a number"),
            })?;
        }
        seen[id] = true;
    }

    let found = seen.iter().skip(2).filter(|&&s| s).count();
    let denom = vocab.len().saturating_sub(2);
    Ok(LoadedEmbeddings {
        matrix,
        found,
        coverage: if denom == 0 { 0.0 } else { found as f64 / denom as f64 },
    })
}
