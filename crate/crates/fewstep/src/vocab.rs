//! Vocabulary management and the trainable embedding codebook.
//!
//! The codebook maps token ids to rows of a V x H matrix; rounding maps a
//! continuous latent back to the nearest row. Rounding and the
//! reconstruction loss share the same squared-distance geometry: the
//! per-position scores are the negated squared distances, so the argmax of
//! the scores always agrees with nearest-neighbour rounding.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with four fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabSerde", into = "VocabSerde")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabSerde {
    tokens: Vec<String>,
}

impl From<VocabSerde> for Vocabulary {
    fn from(v: VocabSerde) -> Self {
        let mut out = Vocabulary {
            tokens: v.tokens,
            index: HashMap::new(),
        };
        out.rebuild_index();
        out
    }
}

impl From<Vocabulary> for VocabSerde {
    fn from(v: Vocabulary) -> Self {
        VocabSerde { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Build from content tokens; reserved tokens are prepended.
    pub fn from_content_tokens<I: IntoIterator<Item = String>>(content: I) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in content {
            if tokens.contains(&t) {
                return Err(Error::Config(format!("duplicate token {t:?} in vocabulary")));
            }
            tokens.push(t);
        }
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }

    /// Vocabulary whose content tokens are the decimal names of their ids.
    /// Used by the synthetic task generators.
    pub fn numeric(size: usize) -> Self {
        let content = (RESERVED.len()..size).map(|i| i.to_string());
        Vocabulary::from_content_tokens(content).expect("numeric tokens are distinct")
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.tokens.len(),
            })
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.token(id)).collect();
        Ok(words?.join(" "))
    }

    /// One content token per line; line number + 4 reserved ids = token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Vocabulary::from_content_tokens(text.lines().map(|l| l.to_string()))
    }
}

/// Trainable V x H embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCodebook {
    table: Tensor,
}

impl EmbeddingCodebook {
    /// Gaussian initialization with standard deviation 1/sqrt(H), keeping
    /// initial row norms near 1 so the noise scale is comparable.
    pub fn init(vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let table = Tensor::from_fn(vocab, dim, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            g * std
        });
        EmbeddingCodebook { table }
    }

    pub fn from_table(table: Tensor) -> Self {
        EmbeddingCodebook { table }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Deterministic row lookup: output row l equals the table row for id l.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::zeros(ids.len(), self.dim());
        for (l, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.vocab_size(),
                });
            }
            out.row_mut(l).copy_from_slice(self.table.row(id));
        }
        Ok(out)
    }

    /// Nearest codebook row per position in Euclidean distance; ties break
    /// toward the lowest id.
    pub fn round_to_tokens(&self, z: &Tensor) -> Result<Vec<usize>> {
        z.check_finite("latent passed to rounding")?;
        if z.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent width {} vs codebook dim {}",
                z.cols(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(z.rows());
        for l in 0..z.rows() {
            let row = z.row(l);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for m in 0..self.vocab_size() {
                let e = self.table.row(m);
                let mut d = 0.0;
                for h in 0..self.dim() {
                    let v = row[h] - e[h];
                    d += v * v;
                }
                if d < best_d {
                    best_d = d;
                    best = m;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Per-position scores over the vocabulary: score_m = -||z_l - e_m||^2.
    /// Softmax of a row is the rounding distribution p(x_l | z_l).
    pub fn rounding_logits(&self, z: &Tensor) -> Result<Tensor> {
        z.check_finite("latent passed to rounding logits")?;
        if z.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent width {} vs codebook dim {}",
                z.cols(),
                self.dim()
            )));
        }
        let mut out = Tensor::zeros(z.rows(), self.vocab_size());
        for l in 0..z.rows() {
            let row = z.row(l);
            for m in 0..self.vocab_size() {
                let e = self.table.row(m);
                let mut d = 0.0;
                for h in 0..self.dim() {
                    let v = row[h] - e[h];
                    d += v * v;
                }
                out.set(l, m, -d);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis_codebook(v: usize, h: usize) -> EmbeddingCodebook {
        EmbeddingCodebook::from_table(Tensor::from_fn(v, h, |r, c| {
            if r % h == c {
                1.0 + r as f64
            } else {
                0.0
            }
        }))
    }

    #[test]
    fn embed_is_row_lookup() {
        let cb = basis_codebook(6, 4);
        let z = cb.embed(&[3]).unwrap();
        assert_eq!(z.row(0), cb.table().row(3));
        assert!(matches!(
            cb.embed(&[6]),
            Err(Error::TokenOutOfRange { id: 6, vocab: 6 })
        ));
    }

    #[test]
    fn round_inverts_embed_for_distinct_rows() {
        let cb = basis_codebook(6, 4);
        let ids = vec![0, 5, 2, 2, 4];
        let z = cb.embed(&ids).unwrap();
        assert_eq!(cb.round_to_tokens(&z).unwrap(), ids);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        // Rows 1 and 3 are identical; a 4-token codebook exercises every case.
        let mut table = Tensor::zeros(4, 2);
        table.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        table.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        table.row_mut(2).copy_from_slice(&[-1.0, 0.0]);
        table.row_mut(3).copy_from_slice(&[0.0, 1.0]);
        let cb = EmbeddingCodebook::from_table(table);
        let z = Tensor::from_vec(1, 2, vec![0.0, 1.0]);
        assert_eq!(cb.round_to_tokens(&z).unwrap(), vec![1]);
        // Equidistant between rows 0 and 2: lowest id wins.
        let mid = Tensor::from_vec(1, 2, vec![0.0, 0.0]);
        let ids = cb.round_to_tokens(&mid).unwrap();
        // 0, 1, 2, 3 are all at distance 1 from the origin here.
        assert_eq!(ids, vec![0]);
    }

    #[test]
    fn round_rejects_non_finite() {
        let cb = basis_codebook(4, 2);
        let z = Tensor::from_vec(1, 2, vec![f64::NAN, 0.0]);
        assert!(cb.round_to_tokens(&z).is_err());
    }

    #[test]
    fn logits_zero_at_exact_row() {
        let cb = basis_codebook(8, 4);
        let z = cb.embed(&[5]).unwrap();
        let logits = cb.rounding_logits(&z).unwrap();
        assert_eq!(logits.get(0, 5), 0.0);
        for m in 0..8 {
            if m != 5 {
                assert!(logits.get(0, m) < 0.0);
            }
        }
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let cb = basis_codebook(8, 4);
        let z = Tensor::from_vec(1, 4, vec![0.3, -0.7, 0.1, 0.9]);
        let logits = cb.rounding_logits(&z).unwrap();
        let max = logits.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.row(0).iter().map(|v| (v - max).exp()).sum();
        let total: f64 = logits.row(0).iter().map(|v| (v - max).exp() / sum).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocabulary_roundtrip_on_disk() {
        let v = Vocabulary::from_content_tokens(["alpha", "beta", "gamma"].map(String::from))
            .unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("alpha"), Some(4));
        assert_eq!(v.id_or_unk("missing"), UNK);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    proptest! {
        /// The brute-force scan is the definition; the implementation must
        /// agree everywhere, including the argmax of the rounding scores.
        #[test]
        fn rounding_agrees_with_brute_force(
            seed in 0u64..500,
            rows in 1usize..5,
        ) {
            let mut rng = crate::rng::stream(seed, &[42]);
            let cb = EmbeddingCodebook::init(8, 4, &mut rng);
            let z = Tensor::from_fn(rows, 4, |_, _| rng.random_range(-2.0..2.0));
            let ids = cb.round_to_tokens(&z).unwrap();
            let logits = cb.rounding_logits(&z).unwrap();
            for l in 0..rows {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for m in 0..8 {
                    let d: f64 = (0..4)
                        .map(|h| (z.get(l, h) - cb.table().get(m, h)).powi(2))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = m;
                    }
                }
                prop_assert_eq!(ids[l], best);
                let arg = logits
                    .row(l)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                prop_assert_eq!(arg, ids[l]);
            }
        }
    }
}
