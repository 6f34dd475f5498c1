//! Cascade corpora: JSON-lines ingestion, mention extraction, and a seeded
//! synthetic generator with community structure.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Tweet,
    Retweet,
    Reply,
    Quote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Reliable,
    Unreliable,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Reliable, Label::Unreliable];

    pub fn index(self) -> usize {
        match self {
            Label::Reliable => 0,
            Label::Unreliable => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Reliable
        } else {
            Label::Unreliable
        }
    }

    pub fn opposite(self) -> Label {
        Label::from_index(1 - self.index())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Reliable => write!(f, "reliable"),
            Label::Unreliable => write!(f, "unreliable"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    pub author: String,
    pub timestamp: i64,
    pub action: Action,
    pub text: String,
    pub mentions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub tweets: Vec<Tweet>,
}

impl Cascade {
    /// Mention tokens over all tweets, in tweet order.
    pub fn mentions(&self) -> impl Iterator<Item = &str> {
        self.tweets.iter().flat_map(|t| t.mentions.iter().map(String::as_str))
    }
}

/// A validated corpus. Cascades keep their input order; per-split index
/// lists refer into `cascades`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    cascades: Vec<Cascade>,
    splits: [Vec<usize>; 3],
}

impl Dataset {
    /// Validates the corpus invariants and stably sorts each cascade's
    /// tweets by timestamp.
    pub fn new(mut cascades: Vec<Cascade>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(cascades.len());
        let mut splits: [Vec<usize>; 3] = Default::default();
        for (i, c) in cascades.iter_mut().enumerate() {
            if !seen.insert(c.id.clone()) {
                return Err(Error::Validation(format!("duplicate cascade id {:?}", c.id)));
            }
            if c.tweets.is_empty() {
                return Err(Error::Validation(format!("cascade {:?} has no tweets", c.id)));
            }
            if let Some(t) = c.tweets.iter().find(|t| t.timestamp < 0) {
                return Err(Error::Validation(format!(
                    "tweet {:?} in cascade {:?} has negative timestamp",
                    t.id, c.id
                )));
            }
            c.tweets.sort_by_key(|t| t.timestamp);
            splits[c.split.index()].push(i);
        }
        Ok(Dataset { cascades, splits })
    }

    pub fn cascades(&self) -> &[Cascade] {
        &self.cascades
    }

    pub fn len(&self) -> usize {
        self.cascades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cascades.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        &self.splits[split.index()]
    }

    pub fn labels(&self) -> Vec<Label> {
        self.cascades.iter().map(|c| c.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.cascades.iter().map(|c| c.id.clone()).collect()
    }

    pub fn label_count(&self, label: Label) -> usize {
        self.cascades.iter().filter(|c| c.label == label).count()
    }

    /// Writes the corpus as JSON-lines with explicit mention fields.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for c in &self.cascades {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(file)
    }
}

#[derive(Deserialize)]
struct RawTweet {
    id: String,
    author: String,
    timestamp: i64,
    action: Action,
    text: String,
    #[serde(default)]
    mentions: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawCascade {
    id: String,
    label: Label,
    split: Split,
    tweets: Vec<RawTweet>,
}

pub fn parse_corpus(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_corpus(BufReader::new(file))
}

/// Parses JSON-lines cascades. Blank lines are skipped; tweets without a
/// `mentions` field get mentions derived from their text.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut cascades = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawCascade = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let tweets = raw
            .tweets
            .into_iter()
            .map(|t| {
                let mentions = t.mentions.unwrap_or_else(|| extract_mentions(&t.text));
                Tweet {
                    id: t.id,
                    author: t.author,
                    timestamp: t.timestamp,
                    action: t.action,
                    text: t.text,
                    mentions,
                }
            })
            .collect();
        cascades.push(Cascade {
            id: raw.id,
            label: raw.label,
            split: raw.split,
            tweets,
        });
    }
    Dataset::new(cascades)
}

/// Mention tokens in `text`: whitespace-delimited tokens starting with `@`,
/// lower-cased, with trailing non-alphanumeric characters removed.
pub fn extract_mentions(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|tok| {
            let handle = tok.strip_prefix('@')?;
            let handle = handle.trim_end_matches(|c: char| !c.is_alphanumeric());
            if handle.is_empty() {
                None
            } else {
                Some(format!("@{}", handle.to_lowercase()))
            }
        })
        .collect()
}

/// Non-mention word tokens of `text`, lower-cased.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .filter(|t| !t.starts_with('@'))
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_communities: usize,
    pub users_per_community: usize,
    pub n_cascades: usize,
    pub unreliable_fraction: f64,
    /// Probability that a cascade draws its users from the community pool
    /// aligned with its label.
    pub homophily: f64,
    pub tweets_per_cascade: (usize, usize),
    pub mentions_per_tweet: (usize, usize),
    /// Probability that a marker word is drawn from the union of both
    /// classes' marker sets instead of the cascade's own set.
    pub vocab_overlap: f64,
    pub split_fractions: [f64; 3],
    pub words_per_tweet: (usize, usize),
    pub text_vocab_size: usize,
    /// Marker words per class.
    pub marker_words: usize,
    /// Probability that a word is a marker rather than background.
    pub marker_rate: f64,
    /// Probability that a user draw stays inside the cascade's own community
    /// rather than the wider pool.
    pub community_locality: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_communities: 20,
            users_per_community: 40,
            n_cascades: 2000,
            unreliable_fraction: 0.3,
            homophily: 0.9,
            tweets_per_cascade: (4, 16),
            mentions_per_tweet: (1, 3),
            vocab_overlap: 0.8,
            split_fractions: [0.7, 0.15, 0.15],
            words_per_tweet: (5, 12),
            text_vocab_size: 2000,
            marker_words: 10,
            marker_rate: 0.15,
            community_locality: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ratio = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        ratio("unreliable_fraction", self.unreliable_fraction)?;
        ratio("homophily", self.homophily)?;
        ratio("vocab_overlap", self.vocab_overlap)?;
        ratio("community_locality", self.community_locality)?;
        ratio("marker_rate", self.marker_rate)?;
        for f in self.split_fractions {
            ratio("split fraction", f)?;
        }
        let total: f64 = self.split_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        for (name, v) in [
            ("users_per_community", self.users_per_community),
            ("n_cascades", self.n_cascades),
            ("text_vocab_size", self.text_vocab_size),
            ("marker_words", self.marker_words),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_communities < 2 {
            return Err(Error::Config(
                "n_communities must be at least 2 to form one pool per label".into(),
            ));
        }
        for (name, (lo, hi)) in [
            ("tweets_per_cascade", self.tweets_per_cascade),
            ("mentions_per_tweet", self.mentions_per_tweet),
            ("words_per_tweet", self.words_per_tweet),
        ] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.tweets_per_cascade.0 == 0 {
            return Err(Error::Config("cascades need at least one tweet".into()));
        }
        let counts = self.split_counts();
        for (split, (&n, &f)) in Split::ALL.iter().zip(counts.iter().zip(&self.split_fractions)) {
            if f > 0.0 && n == 0 {
                return Err(Error::Config(format!(
                    "{} cascades cannot populate the {split:?} split",
                    self.n_cascades
                )));
            }
        }
        Ok(())
    }

    pub fn n_unreliable(&self) -> usize {
        (self.unreliable_fraction * self.n_cascades as f64).round() as usize
    }

    fn split_counts(&self) -> [usize; 3] {
        let n = self.n_cascades as f64;
        let train = (self.split_fractions[0] * n).round() as usize;
        let dev = ((self.split_fractions[1] * n).round() as usize).min(self.n_cascades - train);
        [train, dev, self.n_cascades - train - dev]
    }

    /// Community pool aligned with `label`: the first half of the
    /// communities serve reliable cascades, the rest unreliable ones.
    pub fn pool(&self, label: Label) -> std::ops::Range<usize> {
        let half = self.n_communities / 2;
        match label {
            Label::Reliable => 0..half,
            Label::Unreliable => half..self.n_communities,
        }
    }

    /// Label pool that community `c` belongs to.
    pub fn pool_of(&self, community: usize) -> Label {
        if community < self.n_communities / 2 {
            Label::Reliable
        } else {
            Label::Unreliable
        }
    }
}

pub fn user_id(community: usize, member: usize) -> String {
    format!("c{community:02}u{member:03}")
}

/// Community index encoded in a synthetic user id.
pub fn community_of(user: &str) -> Option<usize> {
    let user = user.strip_prefix('@').unwrap_or(user);
    let rest = user.strip_prefix('c')?;
    let end = rest.find('u')?;
    rest[..end].parse().ok()
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

struct UserSampler {
    community: Vec<WeightedIndex<f64>>,
    /// Pool-wide activity: (community, member) ranked by a single Zipf law.
    pool_members: [Vec<(usize, usize)>; 2],
    pool_weights: [WeightedIndex<f64>; 2],
}

impl UserSampler {
    fn new(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let per = config.users_per_community;
        let community = (0..config.n_communities)
            .map(|_| WeightedIndex::new(zipf_weights(per, 0.8)).expect("positive weights"))
            .collect();
        let mut build = |label: Label| {
            let mut members: Vec<(usize, usize)> = config
                .pool(label)
                .flat_map(|c| (0..per).map(move |m| (c, m)))
                .collect();
            members.shuffle(rng);
            let w = WeightedIndex::new(zipf_weights(members.len(), 1.0)).expect("positive weights");
            (members, w)
        };
        let (rm, rw) = build(Label::Reliable);
        let (um, uw) = build(Label::Unreliable);
        UserSampler {
            community,
            pool_members: [rm, um],
            pool_weights: [rw, uw],
        }
    }

    fn author(&self, community: usize, pool: Label, locality: f64, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(locality) {
            user_id(community, self.community[community].sample(rng))
        } else {
            let (c, m) = self.pool_members[pool.index()][self.pool_weights[pool.index()].sample(rng)];
            user_id(c, m)
        }
    }

    /// Mentioned accounts are drawn uniformly inside the community, so
    /// low-activity members that rarely author tweets still get mentioned.
    fn mentioned(&self, community: usize, pool: Label, locality: f64, per: usize, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(locality) {
            user_id(community, rng.random_range(0..per))
        } else {
            let (c, m) = self.pool_members[pool.index()][self.pool_weights[pool.index()].sample(rng)];
            user_id(c, m)
        }
    }
}

/// Generates a corpus whose cascades draw participants from label-aligned
/// community pools with probability `homophily`, and whose texts come from
/// a shared background vocabulary plus class marker words whose sets
/// overlap by `vocab_overlap`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_cascades;

    let n_unreliable = config.n_unreliable();
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_unreliable { Label::Unreliable } else { Label::Reliable })
        .collect();
    labels.shuffle(&mut rng);

    // Stratified split assignment: each label group is partitioned by the
    // configured fractions.
    let mut splits = vec![Split::Train; n];
    let counts = config.split_counts();
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        let m = idx.len() as f64;
        let train = ((counts[0] as f64 / n as f64) * m).round() as usize;
        let dev = (((counts[1] as f64 / n as f64) * m).round() as usize).min(idx.len() - train);
        for (k, &i) in idx.iter().enumerate() {
            splits[i] = if k < train {
                Split::Train
            } else if k < train + dev {
                Split::Dev
            } else {
                Split::Test
            };
        }
    }

    let users = UserSampler::new(config, &mut rng);
    let background = WeightedIndex::new(zipf_weights(config.text_vocab_size, 1.0)).expect("positive weights");
    // Marker tokens sit past the background range: the first block belongs
    // to reliable cascades, the second to unreliable ones.
    let markers = config.marker_words;

    let width = (n.max(1) - 1).to_string().len();
    let mut cascades = Vec::with_capacity(n);
    for (i, (&label, &split)) in labels.iter().zip(&splits).enumerate() {
        let pool = if rng.random_bool(config.homophily) {
            label
        } else {
            label.opposite()
        };
        let community = rng.random_range(config.pool(pool));

        let id = format!("c{i:0width$}");
        let n_tweets = rng.random_range(config.tweets_per_cascade.0..=config.tweets_per_cascade.1);
        let mut timestamp = 1_580_000_000 + rng.random_range(0..10_000_000i64);
        let mut tweets = Vec::with_capacity(n_tweets);
        for j in 0..n_tweets {
            if j > 0 {
                timestamp += rng.random_range(1..3600);
            }
            let action = if j == 0 {
                Action::Tweet
            } else {
                [Action::Retweet, Action::Reply, Action::Quote][rng.random_range(0..3)]
            };
            let author = users.author(community, pool, config.community_locality, &mut rng);
            let n_words = rng.random_range(config.words_per_tweet.0..=config.words_per_tweet.1);
            let mut words: Vec<String> = (0..n_words)
                .map(|_| {
                    let w = if rng.random_bool(config.marker_rate) {
                        let k = if rng.random_bool(config.vocab_overlap) {
                            rng.random_range(0..2 * markers)
                        } else {
                            label.index() * markers + rng.random_range(0..markers)
                        };
                        config.text_vocab_size + k
                    } else {
                        background.sample(&mut rng)
                    };
                    format!("w{w}")
                })
                .collect();
            let n_mentions = rng.random_range(config.mentions_per_tweet.0..=config.mentions_per_tweet.1);
            let mut mentions = Vec::with_capacity(n_mentions);
            for _ in 0..n_mentions {
                let m = users.mentioned(
                    community,
                    pool,
                    config.community_locality,
                    config.users_per_community,
                    &mut rng,
                );
                words.push(format!("@{m}"));
                mentions.push(format!("@{m}"));
            }
            tweets.push(Tweet {
                id: format!("{id}-t{j}"),
                author,
                timestamp,
                action,
                text: words.join(" "),
                mentions,
            });
        }
        cascades.push(Cascade {
            id,
            label,
            split,
            tweets,
        });
    }
    Dataset::new(cascades)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stand-in text view: every word token maps to a fixed Gaussian random
/// vector (seeded by the token and `seed`), and each cascade is the mean
/// over all word tokens of its concatenated tweets. Mentions are masked.
pub fn random_projection_embeddings(dataset: &Dataset, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut data = Array2::zeros((dataset.len(), dim));
    for (row, cascade) in dataset.cascades().iter().enumerate() {
        let mut count = 0usize;
        for tweet in &cascade.tweets {
            for tok in word_tokens(&tweet.text) {
                let v = cache.entry(tok).or_insert_with_key(|tok| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tok));
                    (0..dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                });
                for (d, x) in data.row_mut(row).iter_mut().zip(v.iter()) {
                    *d += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            data.row_mut(row).mapv_inplace(|x| x / count as f64);
        }
    }
    EmbeddingMatrix::new(dataset.ids(), data).expect("row count matches ids")
}
