//! Binary user-presence vectors over a frequency-filtered user vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Cascade, Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UserVocabulary {
    users: Vec<String>,
    index: HashMap<String, usize>,
    pub threshold: u32,
}

impl UserVocabulary {
    /// Users whose total number of actions over `splits` is at least
    /// `threshold`, with columns in sorted user-id order.
    pub fn build(dataset: &Dataset, threshold: u32, splits: &[Split]) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::Config("user threshold must be at least 1".into()));
        }
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for &split in splits {
            for &i in dataset.split_indices(split) {
                for tweet in &dataset.cascades()[i].tweets {
                    *counts.entry(tweet.author.as_str()).or_default() += 1;
                }
            }
        }
        let users: Vec<String> = counts
            .into_iter()
            .filter(|&(_, n)| n >= threshold)
            .map(|(u, _)| u.to_string())
            .collect();
        if users.is_empty() {
            return Err(Error::EmptyVocabulary { threshold });
        }
        Ok(Self::from_users(users, threshold))
    }

    fn from_users(users: Vec<String>, threshold: u32) -> Self {
        let index = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        UserVocabulary { users, index, threshold }
    }

    pub fn dim(&self) -> usize {
        self.users.len()
    }

    pub fn column(&self, user: &str) -> Option<usize> {
        self.index.get(user).copied()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    /// `{user-id: column}` JSON map.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value, threshold: u32) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::Format("vocabulary must be a JSON object".into()))?;
        let mut users = vec![None; map.len()];
        for (user, col) in map {
            let col = col
                .as_u64()
                .map(|c| c as usize)
                .filter(|&c| c < users.len())
                .ok_or_else(|| Error::Format(format!("bad column for user {user:?}")))?;
            if users[col].replace(user.clone()).is_some() {
                return Err(Error::Format(format!("column {col} assigned twice")));
            }
        }
        let users = users.into_iter().map(|u| u.expect("bijective columns")).collect();
        Ok(Self::from_users(users, threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCascadeVector {
    pub dim: usize,
    pub present: Vec<usize>,
}

impl SparseCascadeVector {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.present {
            v[i] = 1.0;
        }
        v
    }
}

pub fn vectorize_cascade(cascade: &Cascade, vocab: &UserVocabulary) -> SparseCascadeVector {
    let mut present: Vec<usize> = cascade
        .tweets
        .iter()
        .filter_map(|t| vocab.column(&t.author))
        .collect();
    present.sort_unstable();
    present.dedup();
    SparseCascadeVector {
        dim: vocab.dim(),
        present,
    }
}

/// Dense 0/1 matrix with one row per cascade, in dataset order.
pub fn presence_matrix(dataset: &Dataset, vocab: &UserVocabulary) -> Array2<f64> {
    let mut m = Array2::zeros((dataset.len(), vocab.dim()));
    for (r, c) in dataset.cascades().iter().enumerate() {
        for i in vectorize_cascade(c, vocab).present {
            m[[r, i]] = 1.0;
        }
    }
    m
}

/// One `{cascade-id: [indices]}` object per line.
pub fn write_sparse_jsonl<W: Write>(dataset: &Dataset, vocab: &UserVocabulary, mut out: W) -> Result<()> {
    for c in dataset.cascades() {
        let v = vectorize_cascade(c, vocab);
        let mut obj = serde_json::Map::new();
        obj.insert(c.id.clone(), serde_json::to_value(&v.present)?);
        serde_json::to_writer(&mut out, &obj)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
