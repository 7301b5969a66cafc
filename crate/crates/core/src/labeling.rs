//! Pseudo-label construction: split the corpus, sample comments, and map each
//! training post's engagement onto cluster indices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::features::{normalize_reactions, EngagementKind, ReactionCounts, Vocabulary};
use crate::{io, par, seed};

/// The image side of a post: a raster in `[0, 1]` (row-major h x w x c) or a
/// precomputed feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageInput {
    Raster {
        pixels: Vec<f64>,
        h: usize,
        w: usize,
        c: usize,
    },
    Features {
        features: Vec<f64>,
    },
}

impl ImageInput {
    pub fn validate(&self) -> Result<()> {
        match self {
            ImageInput::Raster { pixels, h, w, c } => {
                if *h == 0 || *w == 0 || *c == 0 || pixels.len() != h * w * c {
                    return Err(Error::Input(format!(
                        "raster {h}x{w}x{c} holds {} values",
                        pixels.len()
                    )));
                }
                if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Input("raster pixels must lie in [0, 1]".into()));
                }
            }
            ImageInput::Features { features } => {
                if features.is_empty() || features.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Input(
                        "feature vectors must be non-empty and finite".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One ingested social post.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub image: ImageInput,
    #[serde(default)]
    pub comments: Vec<String>,
    #[serde(default)]
    pub reactions: ReactionCounts,
}

/// Read and validate a JSON-lines corpus; ids must be unique.
pub fn load_corpus(path: &Path) -> Result<Vec<Post>> {
    let posts: Vec<Post> = io::read_jsonl(path)?;
    validate_corpus(&posts)?;
    Ok(posts)
}

pub fn validate_corpus(posts: &[Post]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for p in posts {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Input(format!("duplicate post id {:?}", p.id)));
        }
        p.image
            .validate()
            .map_err(|e| Error::Input(format!("post {:?}: {e}", p.id)))?;
    }
    Ok(())
}

/// Sparse soft target over comment clusters.
pub type SoftTarget = BTreeMap<usize, f64>;

/// Supervised targets for one post.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub comment_target: Option<SoftTarget>,
    pub reaction_label: Option<usize>,
}

impl PseudoLabels {
    pub fn is_empty(&self) -> bool {
        self.comment_target.is_none() && self.reaction_label.is_none()
    }
}

/// Disjoint cluster-fitting holdout and training ids, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub cluster_fit_ids: Vec<String>,
    pub train_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingConfig {
    pub holdout_fraction: f64,
    pub max_comments: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            holdout_fraction: 0.1,
            max_comments: 100,
        }
    }
}

/// Seeded uniform split with `round(fraction * n)` posts held out for cluster fitting.
pub fn split_corpus(
    corpus: &[Post],
    holdout_fraction: f64,
    seed_value: u64,
) -> Result<CorpusSplit> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".into()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let n = corpus.len();
    let holdout = (holdout_fraction * n as f64).round() as usize;
    if holdout == 0 || holdout >= n {
        return Err(Error::Config(format!(
            "holdout fraction {holdout_fraction} leaves an empty side for {n} posts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, "split")));
    let mut cluster_fit_ids: Vec<String> = order[..holdout]
        .iter()
        .map(|&i| corpus[i].id.clone())
        .collect();
    let mut train_ids: Vec<String> = order[holdout..]
        .iter()
        .map(|&i| corpus[i].id.clone())
        .collect();
    cluster_fit_ids.sort();
    train_ids.sort();
    Ok(CorpusSplit {
        cluster_fit_ids,
        train_ids,
    })
}

/// All comments when there are at most `max_n`, else a seeded sample of
/// `max_n` without replacement. Original order is kept either way.
pub fn sample_comments(comments: &[String], max_n: usize, seed_value: u64) -> Vec<String> {
    if comments.len() <= max_n {
        return comments.to_vec();
    }
    let mut picks = index::sample(&mut seed::rng(seed_value), comments.len(), max_n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| comments[i].clone()).collect()
}

pub(crate) fn comment_seed(seed_value: u64, post_id: &str) -> u64 {
    seed::derive(seed_value, &format!("comments/{post_id}"))
}

/// Everything `create_labels` needs, checked for consistency once.
pub struct Labeler<'a> {
    vocab: &'a Vocabulary,
    comment_model: &'a ClusterModel,
    reaction_model: &'a ClusterModel,
    max_comments: usize,
    seed: u64,
}

impl<'a> Labeler<'a> {
    pub fn new(
        vocab: &'a Vocabulary,
        comment_model: &'a ClusterModel,
        reaction_model: &'a ClusterModel,
        max_comments: usize,
        seed_value: u64,
    ) -> Result<Self> {
        if comment_model.kind != EngagementKind::Comment {
            return Err(Error::State(
                "comment model was fitted on reaction features".into(),
            ));
        }
        if reaction_model.kind != EngagementKind::Reaction || reaction_model.dim != 5 {
            return Err(Error::State(
                "reaction model must be fitted on 5-dimensional reaction features".into(),
            ));
        }
        if comment_model.dim != vocab.output_dim() {
            return Err(Error::State(format!(
                "comment model dimension {} does not match vocabulary output {}",
                comment_model.dim,
                vocab.output_dim()
            )));
        }
        Ok(Labeler {
            vocab,
            comment_model,
            reaction_model,
            max_comments,
            seed: seed_value,
        })
    }

    pub fn label(&self, post: &Post) -> Result<PseudoLabels> {
        let sampled = sample_comments(
            &post.comments,
            self.max_comments,
            comment_seed(self.seed, &post.id),
        );
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut total = 0usize;
        for c in &sampled {
            let e = self.vocab.embed_comment(c);
            if e.skip {
                continue;
            }
            *counts
                .entry(self.comment_model.assign(&e.vector)?)
                .or_insert(0) += 1;
            total += 1;
        }
        let comment_target = (total > 0).then(|| {
            counts
                .into_iter()
                .map(|(c, n)| (c, n as f64 / total as f64))
                .collect()
        });
        let reaction_label = match normalize_reactions(&post.reactions) {
            Some(v) => Some(self.reaction_model.assign(&v)?),
            None => None,
        };
        Ok(PseudoLabels {
            comment_target,
            reaction_label,
        })
    }
}

/// Pseudo-labels for a single post.
pub fn create_labels(
    post: &Post,
    comment_model: &ClusterModel,
    reaction_model: &ClusterModel,
    vocab: &Vocabulary,
    seed_value: u64,
    max_comments: usize,
) -> Result<PseudoLabels> {
    Labeler::new(
        vocab,
        comment_model,
        reaction_model,
        max_comments,
        seed_value,
    )?
    .label(post)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub image: ImageInput,
    pub labels: PseudoLabels,
}

/// One line of the labeled-dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub comment_target: Option<SoftTarget>,
    pub reaction_label: Option<usize>,
}

/// Labeled training set in post-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub records: Vec<LabeledRecord>,
}

impl LabeledDataset {
    /// Records that carry at least one target, plus how many were dropped.
    pub fn trainable(&self) -> (Vec<LabeledRecord>, usize) {
        let kept: Vec<LabeledRecord> = self
            .records
            .iter()
            .filter(|r| !r.labels.is_empty())
            .cloned()
            .collect();
        let dropped = self.records.len() - kept.len();
        (kept, dropped)
    }

    pub fn rows(&self) -> Vec<LabelRow> {
        self.records
            .iter()
            .map(|r| LabelRow {
                id: r.id.clone(),
                comment_target: r.labels.comment_target.clone(),
                reaction_label: r.labels.reaction_label,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.rows())
    }

    /// Re-attach labels read from disk to the corpus images.
    pub fn from_rows(rows: Vec<LabelRow>, corpus: &[Post]) -> Result<Self> {
        let by_id: HashMap<&str, &Post> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
        let records = rows
            .into_iter()
            .map(|row| {
                let post = by_id.get(row.id.as_str()).ok_or_else(|| {
                    Error::Input(format!("labeled id {:?} is not in the corpus", row.id))
                })?;
                Ok(LabeledRecord {
                    id: row.id,
                    image: post.image.clone(),
                    labels: PseudoLabels {
                        comment_target: row.comment_target,
                        reaction_label: row.reaction_label,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset { records })
    }
}

fn check_provenance(what: &str, fit_ids: Option<&[String]>, train: &BTreeSet<&str>) -> Result<()> {
    if let Some(ids) = fit_ids {
        if let Some(bad) = ids.iter().find(|id| train.contains(id.as_str())) {
            return Err(Error::Integrity(format!(
                "{what} was fitted on training post {bad:?}"
            )));
        }
    }
    Ok(())
}

/// Label every training post. Holdout posts never appear in the output.
pub fn build_dataset(
    corpus: &[Post],
    split: &CorpusSplit,
    comment_model: &ClusterModel,
    reaction_model: &ClusterModel,
    vocab: &Vocabulary,
    seed_value: u64,
    max_comments: usize,
) -> Result<LabeledDataset> {
    let train: BTreeSet<&str> = split.train_ids.iter().map(String::as_str).collect();
    if split
        .cluster_fit_ids
        .iter()
        .any(|id| train.contains(id.as_str()))
    {
        return Err(Error::Integrity("holdout and training ids overlap".into()));
    }
    check_provenance("vocabulary", vocab.fit_ids(), &train)?;
    check_provenance(
        "comment cluster model",
        comment_model.fit_ids.as_deref(),
        &train,
    )?;
    check_provenance(
        "reaction cluster model",
        reaction_model.fit_ids.as_deref(),
        &train,
    )?;

    let labeler = Labeler::new(
        vocab,
        comment_model,
        reaction_model,
        max_comments,
        seed_value,
    )?;
    let by_id: HashMap<&str, &Post> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    let posts = train
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Input(format!("training id {id:?} is not in the corpus")))
        })
        .collect::<Result<Vec<&Post>>>()?;
    let records = par::map(&posts, |p| {
        labeler.label(p).map(|labels| LabeledRecord {
            id: p.id.clone(),
            image: p.image.clone(),
            labels,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::CLUSTER_FORMAT_VERSION;
    use crate::features::VocabConfig;

    fn post(id: &str, comments: &[&str], reactions: [u64; 5]) -> Post {
        Post {
            id: id.into(),
            image: ImageInput::Features {
                features: vec![0.0, 1.0],
            },
            comments: comments.iter().map(|s| s.to_string()).collect(),
            reactions: ReactionCounts::from_array(reactions),
        }
    }

    fn corpus(n: usize) -> Vec<Post> {
        (0..n)
            .map(|i| post(&format!("p{i:03}"), &["hi there"], [1, 0, 0, 0, 0]))
            .collect()
    }

    fn model(kind: EngagementKind, centroids: Vec<Vec<f64>>) -> ClusterModel {
        ClusterModel {
            version: CLUSTER_FORMAT_VERSION,
            kind,
            k: centroids.len(),
            dim: centroids[0].len(),
            seed: 0,
            centroids: centroids.concat(),
            inertia: 0.0,
            iterations_run: 1,
            fit_ids: None,
        }
    }

    /// Vocabulary over {cat, dog, owl}; comment cluster j sits on term j.
    fn fixtures() -> (Vocabulary, ClusterModel, ClusterModel) {
        let vocab = Vocabulary::fit(&["cat dog owl"], &VocabConfig::default()).unwrap();
        let cm = model(
            EngagementKind::Comment,
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        let rm = model(
            EngagementKind::Reaction,
            vec![vec![1.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0, 1.0]],
        );
        (vocab, cm, rm)
    }

    #[test]
    fn split_sizes_and_determinism() {
        let c = corpus(100);
        let s = split_corpus(&c, 0.1, 7).unwrap();
        assert_eq!(s.cluster_fit_ids.len(), 10);
        assert_eq!(s.train_ids.len(), 90);
        let a: BTreeSet<_> = s.cluster_fit_ids.iter().collect();
        assert!(s.train_ids.iter().all(|id| !a.contains(id)));
        assert_eq!(s, split_corpus(&c, 0.1, 7).unwrap());
        assert_eq!(
            split_corpus(&corpus(270), 0.074, 1)
                .unwrap()
                .cluster_fit_ids
                .len(),
            20
        );
    }

    #[test]
    fn degenerate_split_fractions() {
        let c = corpus(5);
        for f in [0.0, 1.0, 0.05, 0.95, f64::NAN] {
            assert!(
                matches!(split_corpus(&c, f, 1), Err(Error::Config(_))),
                "{f}"
            );
        }
        assert!(matches!(split_corpus(&[], 0.5, 1), Err(Error::Config(_))));
    }

    #[test]
    fn comment_sampling_caps() {
        let three: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        assert_eq!(sample_comments(&three, 100, 1), three);
        let many: Vec<String> = (0..250).map(|i| format!("c{i}")).collect();
        let s = sample_comments(&many, 100, 1);
        assert_eq!(s.len(), 100);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 100);
        assert_eq!(s, sample_comments(&many, 100, 1));
        assert!(sample_comments(&many, 0, 1).is_empty());
    }

    #[test]
    fn multiplicity_soft_target() {
        let (v, cm, rm) = fixtures();
        let p = post("a", &["owl", "owl!", "dog", "zzz unknown"], [0, 0, 0, 0, 3]);
        let l = create_labels(&p, &cm, &rm, &v, 1, 100).unwrap();
        let t = l.comment_target.unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[&2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t[&1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(l.reaction_label, Some(1));
    }

    #[test]
    fn one_hot_and_empty_posts() {
        let (v, cm, rm) = fixtures();
        let l = create_labels(&post("a", &["cat"], [0; 5]), &cm, &rm, &v, 1, 100).unwrap();
        assert_eq!(l.comment_target, Some(BTreeMap::from([(0, 1.0)])));
        assert_eq!(l.reaction_label, None);
        let l = create_labels(&post("b", &[], [0; 5]), &cm, &rm, &v, 1, 100).unwrap();
        assert!(l.is_empty());
    }

    #[test]
    fn mismatched_models_are_state_errors() {
        let (v, cm, rm) = fixtures();
        let p = post("a", &["cat"], [1, 0, 0, 0, 0]);
        assert!(matches!(
            create_labels(&p, &rm, &rm, &v, 1, 100),
            Err(Error::State(_))
        ));
        assert!(matches!(
            create_labels(&p, &cm, &cm, &v, 1, 100),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn dataset_covers_train_ids_only() {
        let (v, cm, rm) = fixtures();
        let c: Vec<Post> = (0..20)
            .map(|i| post(&format!("p{i:02}"), &["cat dog"], [0, 1, 0, 0, 2]))
            .collect();
        let s = split_corpus(&c, 0.1, 3).unwrap();
        let d = build_dataset(&c, &s, &cm, &rm, &v, 3, 100).unwrap();
        assert_eq!(d.records.len(), 18);
        let ids: Vec<&String> = d.records.iter().map(|r| &r.id).collect();
        assert_eq!(ids, s.train_ids.iter().collect::<Vec<_>>());
        assert!(d.records.iter().all(|r| !s.cluster_fit_ids.contains(&r.id)));
        assert!(d
            .records
            .iter()
            .all(|r| r.labels.comment_target.is_some() && r.labels.reaction_label.is_some()));

        let leaked = v.clone().with_fit_ids(vec![s.train_ids[0].clone()]);
        assert!(matches!(
            build_dataset(&c, &s, &cm, &rm, &leaked, 3, 100),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn corpus_json_shapes() {
        let line = r#"{"id":"x","image":{"pixels":[0.0,0.5,1.0,0.25],"h":2,"w":2,"c":1},"comments":["a"],"reactions":{"haha":1,"sorry":0,"angry":0,"wow":0,"love":2}}"#;
        let p: Post = serde_json::from_str(line).unwrap();
        assert!(matches!(p.image, ImageInput::Raster { h: 2, .. }));
        let line = r#"{"id":"y","image":{"features":[1.5]},"comments":[],"reactions":{"haha":0,"sorry":0,"angry":0,"wow":0,"love":0}}"#;
        let p: Post = serde_json::from_str(line).unwrap();
        assert_eq!(
            p.image,
            ImageInput::Features {
                features: vec![1.5]
            }
        );
        let dup = vec![p.clone(), p];
        assert!(validate_corpus(&dup).is_err());
    }
}
