//! The fixed anchor space: frozen word embeddings, their vocabulary and the
//! empirical word marginal that bounds how much assignment mass each word
//! can receive.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Error, Result};
use crate::io;

/// Added to every raw word probability before renormalizing, so no word has
/// an exactly-zero row marginal.
pub const MARGINAL_FLOOR: f64 = 1e-8;

/// Per-token occurrence counts of a caption corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenCounts(BTreeMap<String, u64>);

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut c = Self::new();
        for (tok, n) in pairs {
            c.add(tok, n);
        }
        c
    }

    pub fn add(&mut self, token: impl Into<String>, n: u64) {
        *self.0.entry(token.into()).or_insert(0) += n;
    }

    pub fn get(&self, token: &str) -> u64 {
        self.0.get(token).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Estimates the word marginal `mu(k) = N_k / sum N` restricted to `vocab`,
/// then floors every entry by [`MARGINAL_FLOOR`] and renormalizes.
///
/// Tokens missing from `counts` count as zero; tokens outside `vocab` are ignored.
pub fn estimate_marginal(counts: &TokenCounts, vocab: &[String]) -> Result<DVector<f64>> {
    if vocab.is_empty() {
        return Err(Error::Empty("vocabulary"));
    }
    let raw: Vec<u64> = vocab.iter().map(|t| counts.get(t)).collect();
    marginal_from_counts(&raw)
}

pub(crate) fn marginal_from_counts(raw: &[u64]) -> Result<DVector<f64>> {
    let total: u64 = raw.iter().sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let k = raw.len() as f64;
    let denom = 1.0 + k * MARGINAL_FLOOR;
    Ok(DVector::from_iterator(raw.len(), raw.iter().map(|&n| (n as f64 / total as f64 + MARGINAL_FLOOR) / denom)))
}

/// Frozen word embeddings `W` (one row per vocabulary entry) with the word
/// marginal used as the row constraint of every transport problem.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WordAnchorSpace {
    weights: DMatrix<f64>,
    vocab: Vec<String>,
    counts: Vec<u64>,
    mu: DVector<f64>,
    normalized: bool,
}

impl WordAnchorSpace {
    /// Builds a space from anchor rows, vocabulary and per-row counts.
    ///
    /// With `normalize`, every row is scaled to unit L2 norm and pooled
    /// vectors are normalized as well whenever they are scored against it.
    pub fn new(weights: DMatrix<f64>, vocab: Vec<String>, counts: Vec<u64>, normalize: bool) -> Result<Self> {
        let k = weights.nrows();
        if k == 0 || weights.ncols() == 0 {
            return Err(Error::Empty("anchor matrix"));
        }
        if vocab.len() != k {
            return Err(dim_mismatch(format!("{} vocabulary entries for {} anchor rows", vocab.len(), k)));
        }
        if counts.len() != k {
            return Err(dim_mismatch(format!("{} counts for {} anchor rows", counts.len(), k)));
        }
        let mut seen = HashMap::with_capacity(k);
        for (i, tok) in vocab.iter().enumerate() {
            if let Some(j) = seen.insert(tok.as_str(), i) {
                return Err(Error::InvalidValue(format!("duplicate vocabulary token `{tok}` at rows {j} and {i}")));
            }
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("anchor matrix has non-finite entries".into()));
        }
        let mut weights = weights;
        if normalize {
            normalize_rows(&mut weights)?;
        }
        let mu = marginal_from_counts(&counts)?;
        Ok(Self { weights, vocab, counts, mu, normalized: normalize })
    }

    /// Like [`WordAnchorSpace::new`], looking up counts by token.
    pub fn from_token_counts(
        weights: DMatrix<f64>,
        vocab: Vec<String>,
        counts: &TokenCounts,
        normalize: bool,
    ) -> Result<Self> {
        let raw = vocab.iter().map(|t| counts.get(t)).collect();
        Self::new(weights, vocab, raw, normalize)
    }

    /// K x d anchor matrix.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }
}

pub(crate) fn normalize_rows(m: &mut DMatrix<f64>) -> Result<()> {
    for (r, mut row) in m.row_iter_mut().enumerate() {
        let n = row.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNormRow { row: r });
        }
        row /= n;
    }
    Ok(())
}

/// Loads an anchor space from an embedding matrix file, a vocabulary file and
/// a counts file.
pub fn load_anchor_space(
    embeddings_path: &Path,
    vocab_path: &Path,
    counts_path: &Path,
    normalize: bool,
) -> Result<WordAnchorSpace> {
    let weights = io::read_matrix(embeddings_path)?;
    let vocab = io::read_vocab(vocab_path)?;
    if vocab.len() != weights.nrows() {
        return Err(dim_mismatch(format!(
            "{} has {} rows but {} has {} tokens",
            embeddings_path.display(),
            weights.nrows(),
            vocab_path.display(),
            vocab.len()
        )));
    }
    let counts = TokenCounts::from_pairs(io::read_counts(counts_path)?);
    WordAnchorSpace::from_token_counts(weights, vocab, &counts, normalize)
}

/// Writes the three files read by [`load_anchor_space`]. Counts are written
/// in vocabulary order, including zeros.
pub fn write_anchor_space(
    space: &WordAnchorSpace,
    embeddings_path: &Path,
    vocab_path: &Path,
    counts_path: &Path,
) -> Result<()> {
    io::write_matrix(embeddings_path, &space.weights)?;
    io::write_vocab(vocab_path, &space.vocab)?;
    let pairs: Vec<(String, u64)> = space.vocab.iter().cloned().zip(space.counts.iter().copied()).collect();
    io::write_counts(counts_path, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(toks: &[&str]) -> Vec<String> {
        toks.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn marginal_is_count_ratio() {
        let c = TokenCounts::from_pairs([("a", 2), ("b", 1), ("c", 1)]);
        let mu = estimate_marginal(&c, &vocab(&["a", "b", "c"])).unwrap();
        for (got, want) in mu.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        let c = TokenCounts::from_pairs([("a", 5), ("b", 5)]);
        let mu = estimate_marginal(&c, &vocab(&["a", "b"])).unwrap();
        assert_eq!(mu[0], mu[1]);
        assert!((mu.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_count_word_gets_the_floor() {
        // Floor f is added to each raw probability, then divided by 1 + K f:
        // raw [1, 0], K = 2 -> [(1 + f) / (1 + 2f), f / (1 + 2f)].
        let f = 1e-8_f64;
        let delta = f / (1.0 + 2.0 * f);
        let c = TokenCounts::from_pairs([("a", 1)]);
        let mu = estimate_marginal(&c, &vocab(&["a", "b"])).unwrap();
        assert!((mu[1] - delta).abs() < 1e-22);
        assert!((mu[0] - (1.0 - delta)).abs() < 1e-15);
        assert!(mu[1] > 0.0);
        assert!((mu.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let c = TokenCounts::from_pairs([("zzz", 4)]);
        assert!(matches!(estimate_marginal(&c, &vocab(&["a", "b"])), Err(Error::EmptyCorpus)));
        assert!(estimate_marginal(&c, &[]).is_err());
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let err = WordAnchorSpace::new(w, vocab(&["a", "b"]), vec![1, 1], true).unwrap_err();
        assert!(matches!(err, Error::ZeroNormRow { row: 1 }));
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let w = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, -2.0]);
        let s = WordAnchorSpace::new(w, vocab(&["a", "b"]), vec![1, 3], true).unwrap();
        assert!(s.is_normalized());
        assert!((s.weights().row(0).norm() - 1.0).abs() < 1e-15);
        assert_eq!(s.weights()[(0, 0)], 0.6);
        assert_eq!(s.token_id("b"), Some(1));
    }

    #[test]
    fn duplicate_tokens_are_rejected() {
        let w = DMatrix::from_element(2, 2, 1.0);
        assert!(WordAnchorSpace::new(w, vocab(&["a", "a"]), vec![1, 1], false).is_err());
    }
}
