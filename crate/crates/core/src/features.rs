//! Engagement featurization: TF-IDF comment vectors and L2-normalized
//! reaction distributions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Reaction buttons in canonical order.
pub const REACTION_NAMES: [&str; 5] = ["haha", "sorry", "angry", "wow", "love"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngagementKind {
    Comment,
    Reaction,
}

/// A fixed-dimension numeric representation of one engagement signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementVector {
    pub kind: EngagementKind,
    pub values: Vec<f64>,
}

impl EngagementVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Reaction counts in the order haha, sorry, angry, wow, love.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionCounts {
    pub haha: u64,
    pub sorry: u64,
    pub angry: u64,
    pub wow: u64,
    pub love: u64,
}

impl ReactionCounts {
    pub fn from_array(c: [u64; 5]) -> Self {
        ReactionCounts {
            haha: c[0],
            sorry: c[1],
            angry: c[2],
            wow: c[3],
            love: c[4],
        }
    }

    pub fn as_array(&self) -> [u64; 5] {
        [self.haha, self.sorry, self.angry, self.wow, self.love]
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|c| *c == 0)
    }
}

/// L2-normalize reaction counts; `None` when every count is zero.
pub fn normalize_reactions(counts: &ReactionCounts) -> Option<EngagementVector> {
    let raw = counts.as_array().map(|c| c as f64);
    normalize_reaction_values(&raw)
}

/// L2-normalize an arbitrary non-negative 5-vector (used to check idempotence).
pub fn normalize_reaction_values(raw: &[f64; 5]) -> Option<EngagementVector> {
    let norm = l2_norm(raw);
    if norm == 0.0 {
        return None;
    }
    Some(EngagementVector {
        kind: EngagementKind::Reaction,
        values: raw.iter().map(|c| c / norm).collect(),
    })
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    // Scale by the max magnitude first so large counts cannot overflow.
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    max * v.iter().map(|x| (x / max) * (x / max)).sum::<f64>().sqrt()
}

/// Tokenizer and vocabulary settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Tokens shorter than this (in chars) are dropped.
    pub min_token_len: usize,
    /// Minimum document frequency for a term to be retained.
    pub min_df: usize,
    /// Keep at most this many terms, highest document frequency first.
    pub max_vocab: usize,
    /// Optional dense random projection applied after TF-IDF weighting.
    pub projection: Option<ProjectionConfig>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            min_token_len: 2,
            min_df: 1,
            max_vocab: 50_000,
            projection: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub dim: usize,
    pub seed: u64,
}

/// Lowercase, split on runs of non-alphanumeric characters, drop short tokens.
pub fn tokenize(text: &str, min_token_len: usize) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| t.chars().count() >= min_token_len)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEntry {
    pub term: String,
    pub index: usize,
    pub df: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    config: VocabConfig,
    terms: Vec<TermEntry>,
    corpus_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fit_ids: Option<Vec<String>>,
}

/// A fitted bag-of-words basis with document frequencies.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    config: VocabConfig,
    terms: Vec<TermEntry>,
    lookup: HashMap<String, usize>,
    corpus_size: usize,
    projection: Option<Vec<f64>>,
    fit_ids: Option<Vec<String>>,
}

/// A comment embedding plus whether it had any in-vocabulary support.
#[derive(Debug, Clone, PartialEq)]
pub struct CommentEmbedding {
    pub vector: EngagementVector,
    /// Set when no token of the comment was in the vocabulary; labeling skips these.
    pub skip: bool,
}

impl Vocabulary {
    /// Fit a vocabulary over `corpus`, one document per comment string.
    pub fn fit<S: AsRef<str>>(corpus: &[S], config: &VocabConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config(
                "cannot fit a vocabulary on an empty corpus".into(),
            ));
        }
        if config.max_vocab == 0 {
            return Err(Error::Config("max_vocab must be positive".into()));
        }
        if let Some(p) = &config.projection {
            if p.dim == 0 {
                return Err(Error::Config("projection dim must be positive".into()));
            }
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut seen = tokenize(doc.as_ref(), config.min_token_len);
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = df
            .into_iter()
            .filter(|(_, d)| *d >= config.min_df.max(1))
            .collect();
        if kept.len() > config.max_vocab {
            // Highest df first; lexicographic among equal df.
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            kept.truncate(config.max_vocab);
            kept.sort_by(|a, b| a.0.cmp(&b.0));
        }
        if kept.is_empty() {
            return Err(Error::Config(
                "no term survives tokenization and min_df; vocabulary would be empty".into(),
            ));
        }
        let terms = kept
            .into_iter()
            .enumerate()
            .map(|(index, (term, df))| TermEntry { term, index, df })
            .collect();
        Ok(Self::from_parts(config.clone(), terms, corpus.len(), None))
    }

    fn from_parts(
        config: VocabConfig,
        terms: Vec<TermEntry>,
        corpus_size: usize,
        fit_ids: Option<Vec<String>>,
    ) -> Self {
        let lookup = terms.iter().map(|t| (t.term.clone(), t.index)).collect();
        let projection = config.projection.map(|p| projection_matrix(p, terms.len()));
        Vocabulary {
            config,
            terms,
            lookup,
            corpus_size,
            projection,
            fit_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn terms(&self) -> &[TermEntry] {
        &self.terms
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.lookup.get(term).copied()
    }

    pub fn df(&self, term: &str) -> Option<usize> {
        self.index_of(term).map(|i| self.terms[i].df)
    }

    /// Smoothed inverse document frequency `ln((1+N)/(1+df)) + 1`.
    pub fn idf_for(&self, df: usize) -> f64 {
        smoothed_idf(self.corpus_size, df)
    }

    /// Dimension of the embeddings this vocabulary produces.
    pub fn output_dim(&self) -> usize {
        self.config.projection.map_or(self.terms.len(), |p| p.dim)
    }

    /// Ids of the posts this vocabulary was fitted on, when recorded.
    pub fn fit_ids(&self) -> Option<&[String]> {
        self.fit_ids.as_deref()
    }

    pub fn with_fit_ids(mut self, ids: Vec<String>) -> Self {
        self.fit_ids = Some(ids);
        self
    }

    /// TF-IDF weights before normalization or projection.
    pub fn tfidf(&self, comment: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.terms.len()];
        for tok in tokenize(comment, self.config.min_token_len) {
            if let Some(&i) = self.lookup.get(&tok) {
                v[i] += 1.0;
            }
        }
        for (i, x) in v.iter_mut().enumerate() {
            if *x != 0.0 {
                *x *= self.idf_for(self.terms[i].df);
            }
        }
        v
    }

    /// Embed one comment: TF-IDF, optional projection, then L2 normalization.
    pub fn embed_comment(&self, comment: &str) -> CommentEmbedding {
        let raw = self.tfidf(comment);
        let skip = raw.iter().all(|x| *x == 0.0);
        let mut values = match &self.projection {
            Some(m) if !skip => {
                let vocab = self.terms.len();
                m.chunks_exact(vocab)
                    .map(|row| row.iter().zip(&raw).map(|(a, b)| a * b).sum())
                    .collect()
            }
            Some(_) => vec![0.0; self.output_dim()],
            None => raw,
        };
        let norm = l2_norm(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|x| *x /= norm);
        }
        CommentEmbedding {
            vector: EngagementVector {
                kind: EngagementKind::Comment,
                values,
            },
            skip,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            config: self.config.clone(),
            terms: self.terms.clone(),
            corpus_size: self.corpus_size,
            fit_ids: self.fit_ids.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported vocabulary version {}",
                file.version
            )));
        }
        if file.corpus_size == 0 {
            return Err(Error::Input(
                "vocabulary corpus_size must be positive".into(),
            ));
        }
        for (i, t) in file.terms.iter().enumerate() {
            if t.index != i {
                return Err(Error::Input(format!(
                    "vocabulary indices are not contiguous at term {:?}",
                    t.term
                )));
            }
            if t.df == 0 || t.df > file.corpus_size {
                return Err(Error::Input(format!(
                    "document frequency {} of {:?} outside [1, {}]",
                    t.df, t.term, file.corpus_size
                )));
            }
        }
        Ok(Self::from_parts(
            file.config,
            file.terms,
            file.corpus_size,
            file.fit_ids,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_string(path)?)
    }
}

/// Smoothed inverse document frequency for a corpus of `n` documents.
pub fn smoothed_idf(n: usize, df: usize) -> f64 {
    ((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn projection_matrix(p: ProjectionConfig, vocab: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(p.seed, "projection"));
    let normal = Normal::new(0.0, 1.0 / (p.dim as f64).sqrt()).expect("valid std");
    (0..p.dim * vocab)
        .map(|_| normal.sample(&mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_doc() -> Vocabulary {
        Vocabulary::fit(&["dog cute dog", "cat cute"], &VocabConfig::default()).unwrap()
    }

    #[test]
    fn fit_counts_document_frequency() {
        let v = two_doc();
        assert_eq!(v.len(), 3);
        assert_eq!(v.corpus_size(), 2);
        assert_eq!(v.df("dog"), Some(1));
        assert_eq!(v.df("cute"), Some(2));
        assert_eq!(v.df("cat"), Some(1));
        let idx: Vec<usize> = v.terms().iter().map(|t| t.index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn single_char_corpus_with_short_tokens_allowed() {
        let cfg = VocabConfig {
            min_token_len: 1,
            ..Default::default()
        };
        let v = Vocabulary::fit(&["a"], &cfg).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.corpus_size(), 1);
        assert_eq!(v.df("a"), Some(1));
        // The default tokenizer drops it, leaving nothing to fit.
        assert!(matches!(
            Vocabulary::fit(&["a"], &VocabConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn min_df_filters_terms() {
        let cfg = VocabConfig {
            min_token_len: 1,
            min_df: 2,
            ..Default::default()
        };
        let v = Vocabulary::fit(&["x y", "y z"], &cfg).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.df("y"), Some(2));
    }

    #[test]
    fn max_vocab_keeps_highest_df() {
        let cfg = VocabConfig {
            max_vocab: 2,
            ..Default::default()
        };
        let v = Vocabulary::fit(&["aa bb cc", "bb cc", "cc"], &cfg).unwrap();
        let terms: Vec<&str> = v.terms().iter().map(|t| t.term.as_str()).collect();
        assert_eq!(terms, vec!["bb", "cc"]);
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            Vocabulary::fit(&empty, &VocabConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Hello, WORLD!! a-bc x", 2),
            vec!["hello", "world", "bc"]
        );
    }

    #[test]
    fn embed_matches_hand_tfidf() {
        let v = two_doc();
        let dog = 2.0 * ((3.0f64 / 2.0).ln() + 1.0);
        let cute = 1.0;
        assert!((dog - 2.810_930_216_216_329).abs() < 1e-12);
        let norm = (dog * dog + cute * cute).sqrt();
        let e = v.embed_comment("dog cute dog");
        assert!(!e.skip);
        let (i_dog, i_cute, i_cat) = (
            v.index_of("dog").unwrap(),
            v.index_of("cute").unwrap(),
            v.index_of("cat").unwrap(),
        );
        assert!((e.vector.values[i_dog] - dog / norm).abs() < 1e-12);
        assert!((e.vector.values[i_cute] - cute / norm).abs() < 1e-12);
        assert_eq!(e.vector.values[i_cat], 0.0);
    }

    #[test]
    fn oov_comment_is_flagged_zero() {
        let e = two_doc().embed_comment("zebra");
        assert!(e.skip);
        assert!(e.vector.is_zero());
        assert_eq!(e.vector.kind, EngagementKind::Comment);
    }

    #[test]
    fn single_term_is_one_hot() {
        let v = two_doc();
        let e = v.embed_comment("cute");
        let i = v.index_of("cute").unwrap();
        for (j, x) in e.vector.values.iter().enumerate() {
            assert_eq!(*x, if j == i { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn reaction_examples() {
        let r = normalize_reactions(&ReactionCounts::from_array([3, 4, 0, 0, 0])).unwrap();
        assert_eq!(r.kind, EngagementKind::Reaction);
        assert!((r.values[0] - 0.6).abs() < 1e-15);
        assert!((r.values[1] - 0.8).abs() < 1e-15);
        let r = normalize_reactions(&ReactionCounts::from_array([0, 0, 0, 0, 5])).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(normalize_reactions(&ReactionCounts::default()).is_none());
    }

    #[test]
    fn projection_changes_dim_and_stays_normalized() {
        let cfg = VocabConfig {
            projection: Some(ProjectionConfig { dim: 4, seed: 11 }),
            ..Default::default()
        };
        let v = Vocabulary::fit(&["dog cute dog", "cat cute"], &cfg).unwrap();
        let e = v.embed_comment("dog cat");
        assert_eq!(e.vector.dim(), 4);
        assert!((l2_norm(&e.vector.values) - 1.0).abs() < 1e-12);
        let z = v.embed_comment("nothing here");
        assert!(z.skip && z.vector.dim() == 4 && z.vector.is_zero());
    }

    #[test]
    fn json_roundtrip_preserves_embeddings() {
        let v = two_doc().with_fit_ids(vec!["p1".into()]);
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back.terms(), v.terms());
        assert_eq!(back.fit_ids(), Some(&["p1".to_string()][..]));
        assert_eq!(back.embed_comment("dog cute"), v.embed_comment("dog cute"));
    }

    #[test]
    fn json_rejects_bad_df() {
        let bad =
            r#"{"version":1,"config":{},"terms":[{"term":"x","index":0,"df":3}],"corpus_size":2}"#;
        assert!(matches!(Vocabulary::from_json(bad), Err(Error::Input(_))));
    }
}
