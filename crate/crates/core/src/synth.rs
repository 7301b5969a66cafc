//! Synthetic engagement corpus where a hidden class drives the image, the
//! comment vocabulary and the reaction profile of every post.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ReactionCounts;
use crate::labeling::{ImageInput, Post};
use crate::transfer::{Split, TaskRecord};
use crate::{io, par, seed};

const CONSONANTS: &[u8] = b"bdfgklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_posts: usize,
    pub n_classes: usize,
    /// Standard deviation of the per-coordinate image noise.
    pub noise: f64,
    /// Expected distance scale between class means.
    pub separation: f64,
    pub feature_dim: usize,
    /// Emit `size x size x 3` rasters instead of feature vectors.
    pub raster_size: Option<usize>,
    pub topic_words: usize,
    pub shared_words: usize,
    /// Probability that a comment word comes from the class topic.
    pub topic_prob: f64,
    pub max_comments: usize,
    pub mean_reactions: f64,
    /// Fraction of posts with neither comments nor reactions.
    pub zero_engagement: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_posts: 1000,
            n_classes: 5,
            noise: 1.0,
            separation: 3.0,
            feature_dim: 128,
            raster_size: None,
            topic_words: 20,
            shared_words: 60,
            topic_prob: 0.7,
            max_comments: 8,
            mean_reactions: 12.0,
            zero_engagement: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_posts == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "n_posts and n_classes must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(
                "noise must be finite and non-negative".into(),
            ));
        }
        if self.feature_dim == 0 || self.raster_size == Some(0) {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        for (name, p) in [
            ("topic_prob", self.topic_prob),
            ("zero_engagement", self.zero_engagement),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.topic_words == 0
            || (self.topic_words * self.n_classes + self.shared_words) > 75 * 75
        {
            return Err(Error::Config(
                "word counts exceed the synthetic lexicon".into(),
            ));
        }
        if !(self.mean_reactions > 0.0) {
            return Err(Error::Config("mean_reactions must be positive".into()));
        }
        Ok(())
    }

    fn image_dim(&self) -> usize {
        self.raster_size.map_or(self.feature_dim, |s| s * s * 3)
    }
}

/// Ground-truth class of a generated post.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRow {
    pub id: String,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub posts: Vec<Post>,
    pub classes: Vec<ClassRow>,
}

impl SynthCorpus {
    pub fn save(&self, corpus: &Path, classes: &Path) -> Result<()> {
        io::write_jsonl(corpus, &self.posts)?;
        io::write_jsonl(classes, &self.classes)
    }
}

/// Two-syllable pseudo-word for lexicon slot `i`.
fn word(i: usize) -> String {
    let syl = |s: usize| {
        let c = CONSONANTS[s / VOWELS.len() % CONSONANTS.len()] as char;
        let v = VOWELS[s % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    format!("{}{}", syl(i / 75), syl(i % 75))
}

/// Class-level parameters shared by the corpus and downstream tasks.
struct World {
    means: Vec<Vec<f64>>,
    reaction_profiles: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = seed::rng(seed::derive(cfg.seed, "synth/means"));
        let dim = cfg.image_dim();
        let scale = cfg.separation / (dim as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let means = (0..cfg.n_classes)
            .map(|_| (0..dim).map(|_| scale * normal.sample(&mut rng)).collect())
            .collect();
        let mut rng = seed::rng(seed::derive(cfg.seed, "synth/reactions"));
        let reaction_profiles = (0..cfg.n_classes)
            .map(|c| {
                let mut p: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..0.4)).collect();
                p[c % 5] += 2.0;
                p[rng.random_range(0..5)] += 0.5;
                p
            })
            .collect();
        World {
            means,
            reaction_profiles,
        }
    }

    fn image(&self, cfg: &SynthConfig, class: usize, rng: &mut impl Rng) -> ImageInput {
        let values: Vec<f64> = if cfg.noise == 0.0 {
            self.means[class].clone()
        } else {
            let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
            self.means[class]
                .iter()
                .map(|m| m + noise.sample(rng))
                .collect()
        };
        match cfg.raster_size {
            Some(s) => ImageInput::Raster {
                pixels: values,
                h: s,
                w: s,
                c: 3,
            },
            None => ImageInput::Features { features: values },
        }
    }
}

fn comment(cfg: &SynthConfig, class: usize, rng: &mut impl Rng) -> String {
    let n_words = rng.random_range(2..=6);
    (0..n_words)
        .map(|_| {
            if rng.random_bool(cfg.topic_prob) {
                word(class * cfg.topic_words + rng.random_range(0..cfg.topic_words))
            } else {
                word(cfg.n_classes * cfg.topic_words + rng.random_range(0..cfg.shared_words.max(1)))
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn reactions(cfg: &SynthConfig, profile: &[f64], rng: &mut impl Rng) -> ReactionCounts {
    let total = Poisson::new(cfg.mean_reactions)
        .expect("validated mean")
        .sample(rng) as usize;
    let pick = WeightedIndex::new(profile).expect("positive profile");
    let mut counts = [0u64; 5];
    for _ in 0..total {
        counts[pick.sample(rng)] += 1;
    }
    ReactionCounts::from_array(counts)
}

/// Generate a corpus; every post draws from its own derived stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let world = World::new(cfg);
    let base = seed::derive(cfg.seed, "synth/posts");
    let width = cfg.n_posts.to_string().len();
    let made = par::map_range(cfg.n_posts, |i| {
        let mut rng = seed::rng(seed::derive_indexed(base, &[i as u64]));
        let class = rng.random_range(0..cfg.n_classes);
        let image = world.image(cfg, class, &mut rng);
        let (comments, reactions) = if rng.random_bool(cfg.zero_engagement) {
            (Vec::new(), ReactionCounts::default())
        } else {
            let n = rng.random_range(0..=cfg.max_comments);
            let comments = (0..n).map(|_| comment(cfg, class, &mut rng)).collect();
            (
                comments,
                reactions(cfg, &world.reaction_profiles[class], &mut rng),
            )
        };
        let id = format!("p{i:0width$}");
        (
            Post {
                id: id.clone(),
                image,
                comments,
                reactions,
            },
            ClassRow { id, class },
        )
    });
    let (posts, classes) = made.into_iter().unzip();
    Ok(SynthCorpus { posts, classes })
}

/// Downstream classification task built from fresh draws of the same classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSynthConfig {
    pub n_samples: usize,
    /// Width of per-sample text features; `None` for an image-only task.
    pub text_dim: Option<usize>,
    /// Train and val fractions; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TaskSynthConfig {
    fn default() -> Self {
        TaskSynthConfig {
            n_samples: 1000,
            text_dim: None,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

pub fn generate_task(corpus_cfg: &SynthConfig, cfg: &TaskSynthConfig) -> Result<Vec<TaskRecord>> {
    corpus_cfg.validate()?;
    if cfg.n_samples < 3 {
        return Err(Error::Config("a task needs at least three samples".into()));
    }
    let f = (cfg.train_fraction, cfg.val_fraction);
    if !(f.0 > 0.0 && f.1 > 0.0 && f.0 + f.1 < 1.0) {
        return Err(Error::Config(
            "split fractions must be positive and leave room for test".into(),
        ));
    }
    let world = World::new(corpus_cfg);
    let text_means: Vec<Vec<f64>> = {
        let mut rng = seed::rng(seed::derive(corpus_cfg.seed, "synth/text"));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..corpus_cfg.n_classes)
            .map(|_| {
                (0..cfg.text_dim.unwrap_or(0))
                    .map(|_| normal.sample(&mut rng))
                    .collect()
            })
            .collect()
    };
    let base = seed::derive(cfg.seed, "synth/task");
    let mut records = par::map_range(cfg.n_samples, |i| {
        let mut rng = seed::rng(seed::derive_indexed(base, &[i as u64]));
        let class = rng.random_range(0..corpus_cfg.n_classes);
        let image = world.image(corpus_cfg, class, &mut rng);
        let text_features = cfg.text_dim.map(|_| {
            let noise = Normal::new(0.0, 2.0).expect("positive std");
            text_means[class]
                .iter()
                .map(|m| m + noise.sample(&mut rng))
                .collect()
        });
        TaskRecord {
            id: format!("t{i:06}"),
            split: Split::Train,
            image,
            label: class,
            text_features,
        }
    });
    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.seed, "synth/task-split")));
    let n_train = ((cfg.n_samples as f64) * f.0).round().max(1.0) as usize;
    let n_val =
        (((cfg.n_samples as f64) * f.1).round().max(1.0) as usize).min(cfg.n_samples - n_train - 1);
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::validate_corpus;

    #[test]
    fn class_counts_are_balanced() {
        let cfg = SynthConfig {
            n_posts: 1000,
            n_classes: 5,
            seed: 1,
            ..Default::default()
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.posts.len(), 1000);
        validate_corpus(&c.posts).unwrap();
        let mut counts = [0usize; 5];
        c.classes.iter().for_each(|r| counts[r.class] += 1);
        assert!(
            counts.iter().all(|&n| (150..=250).contains(&n)),
            "{counts:?}"
        );
    }

    #[test]
    fn zero_noise_gives_class_means() {
        let cfg = SynthConfig {
            n_posts: 50,
            noise: 0.0,
            seed: 3,
            ..Default::default()
        };
        let c = generate(&cfg).unwrap();
        let world = World::new(&cfg);
        for (p, r) in c.posts.iter().zip(&c.classes) {
            match &p.image {
                ImageInput::Features { features } => assert_eq!(features, &world.means[r.class]),
                other => panic!("unexpected image {other:?}"),
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_posts: 120,
            seed: 9,
            raster_size: Some(4),
            ..Default::default()
        };
        let paths: Vec<_> = (0..2)
            .map(|i| {
                let (a, b) = (
                    dir.path().join(format!("c{i}.jsonl")),
                    dir.path().join(format!("k{i}.jsonl")),
                );
                generate(&cfg).unwrap().save(&a, &b).unwrap();
                (std::fs::read(a).unwrap(), std::fs::read(b).unwrap())
            })
            .collect();
        assert_eq!(paths[0], paths[1]);
    }

    #[test]
    fn lexicon_words_are_distinct() {
        let words: std::collections::BTreeSet<String> = (0..75 * 75).map(word).collect();
        assert_eq!(words.len(), 75 * 75);
    }

    #[test]
    fn task_splits_cover_all_parts() {
        let corpus = SynthConfig::default();
        let cfg = TaskSynthConfig {
            n_samples: 200,
            text_dim: Some(3),
            ..Default::default()
        };
        let recs = generate_task(&corpus, &cfg).unwrap();
        let count = |s| recs.iter().filter(|r| r.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (140, 20, 40)
        );
        assert!(recs
            .iter()
            .all(|r| r.text_features.as_ref().map(Vec::len) == Some(3)));
    }
}
