//! mentions2vec: cascades reduced to their `@` mentions and embedded with
//! PV-DBOW paragraph vectors trained by negative sampling.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionDocument {
    pub cascade_id: String,
    pub tokens: Vec<String>,
}

/// One document per cascade, sorted by cascade id. Cascades without
/// mentions keep an empty document so rows stay aligned.
pub fn build_mention_documents(dataset: &Dataset) -> Vec<MentionDocument> {
    let mut docs: Vec<MentionDocument> = dataset
        .cascades()
        .iter()
        .map(|c| MentionDocument {
            cascade_id: c.id.clone(),
            tokens: c.mentions().map(str::to_string).collect(),
        })
        .collect();
    docs.sort_by(|a, b| a.cascade_id.cmp(&b.cascade_id));
    docs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum D2VMode {
    #[serde(rename = "pv-dbow")]
    PvDbow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D2VConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub min_count: u64,
    pub mode: D2VMode,
    pub seed: u64,
}

impl Default for D2VConfig {
    fn default() -> Self {
        D2VConfig {
            dim: 128,
            epochs: 20,
            negatives: 5,
            lr_initial: 0.025,
            lr_final: 0.0001,
            min_count: 2,
            mode: D2VMode::PvDbow,
            seed: 1,
        }
    }
}

impl D2VConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.negatives == 0 || self.epochs == 0 {
            return Err(Error::Config("doc2vec dim, negatives and epochs must be at least 1".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final) {
            return Err(Error::Config(format!(
                "doc2vec learning rates need initial >= final > 0, got {} -> {}",
                self.lr_initial, self.lr_final
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct D2VModel {
    pub vocab: Vec<String>,
    pub counts: Vec<u64>,
    index: HashMap<String, usize>,
    pub doc_ids: Vec<String>,
    pub doc_vectors: Array2<f64>,
    pub output_vectors: Array2<f64>,
    /// Negative-sampling distribution, proportional to count^0.75.
    pub noise: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub config: D2VConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredVector {
    pub vector: Array1<f64>,
    /// Set when the document had no in-vocabulary tokens; the vector is zero.
    pub empty: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln σ(x), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Negative-sampling loss of one (document, token) pair:
/// −ln σ(v·u₊) − Σₙ ln σ(−v·uₙ).
pub fn pair_loss(doc: ArrayView1<f64>, positive: ArrayView1<f64>, negatives: &[ArrayView1<f64>]) -> f64 {
    -log_sigmoid(doc.dot(&positive)) - negatives.iter().map(|n| log_sigmoid(-doc.dot(n))).sum::<f64>()
}

/// Gradient of [`pair_loss`] with respect to the document vector.
pub fn pair_loss_doc_gradient(
    doc: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
) -> Array1<f64> {
    let mut g = &positive * -(1.0 - sigmoid(doc.dot(&positive)));
    for n in negatives {
        g.scaled_add(sigmoid(doc.dot(n)), n);
    }
    g
}

fn uniform_init(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 0.5 / dim as f64;
    Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-bound..bound))
}

/// One SGD step on a (document, token) pair. Updates the touched output
/// vectors in place, accumulates the document update into `doc_delta`, and
/// returns the pair loss evaluated before the update.
fn sgd_pair(
    doc: ArrayView1<f64>,
    mut doc_delta: ArrayViewMut1<f64>,
    output: &mut Array2<f64>,
    target: usize,
    negatives: &[usize],
    lr: f64,
    update_output: bool,
) -> f64 {
    let mut loss = 0.0;
    let targets = std::iter::once((target, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)));
    for (w, label) in targets {
        let score = doc.dot(&output.row(w));
        loss -= if label > 0.0 {
            log_sigmoid(score)
        } else {
            log_sigmoid(-score)
        };
        let g = lr * (label - sigmoid(score));
        doc_delta.scaled_add(g, &output.row(w));
        if update_output {
            output.row_mut(w).scaled_add(g, &doc);
        }
    }
    loss
}

fn draw_negatives(
    noise: &WeightedIndex<f64>,
    k: usize,
    target: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<usize>,
) {
    out.clear();
    for _ in 0..k {
        let n = noise.sample(rng);
        if n != target {
            out.push(n);
        }
    }
}

/// Trains PV-DBOW document vectors keyed by cascade id. Single-threaded and
/// deterministic for a fixed config seed.
pub fn train_doc2vec(docs: &[MentionDocument], config: &D2VConfig) -> Result<D2VModel> {
    config.validate()?;
    let mut raw_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for d in docs {
        for t in &d.tokens {
            *raw_counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let (vocab, counts): (Vec<String>, Vec<u64>) = raw_counts
        .into_iter()
        .filter(|&(_, c)| c >= config.min_count)
        .map(|(t, c)| (t.to_string(), c))
        .unzip();
    if vocab.is_empty() {
        return Err(Error::Training(format!(
            "no mention token occurs at least {} times",
            config.min_count
        )));
    }
    let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let doc_tokens: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.tokens.iter().filter_map(|t| index.get(t).copied()).collect())
        .collect();

    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let total_weight: f64 = weights.iter().sum();
    let noise: Vec<f64> = weights.iter().map(|w| w / total_weight).collect();
    let sampler = WeightedIndex::new(&weights).expect("positive noise weights");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let mut doc_vectors = uniform_init(docs.len(), dim, &mut rng);
    let mut output = Array2::zeros((vocab.len(), dim));

    let pairs_per_epoch: usize = doc_tokens.iter().map(Vec::len).sum();
    let total_pairs = (pairs_per_epoch * config.epochs).max(1) as f64;
    let mut processed = 0usize;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut negs = Vec::with_capacity(config.negatives);
    let mut delta = Array1::zeros(dim);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for &d in &order {
            for &w in &doc_tokens[d] {
                let lr = config.lr_initial
                    - (config.lr_initial - config.lr_final) * processed as f64 / total_pairs;
                draw_negatives(&sampler, config.negatives, w, &mut rng, &mut negs);
                delta.fill(0.0);
                loss += sgd_pair(doc_vectors.row(d), delta.view_mut(), &mut output, w, &negs, lr, true);
                doc_vectors.row_mut(d).scaled_add(1.0, &delta);
                processed += 1;
            }
        }
        let mean = loss / pairs_per_epoch.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("doc2vec loss diverged in epoch {}", epoch + 1)));
        }
        log::debug!("doc2vec epoch {} mean loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
    }

    Ok(D2VModel {
        vocab,
        counts,
        index,
        doc_ids: docs.iter().map(|d| d.cascade_id.clone()).collect(),
        doc_vectors,
        output_vectors: output,
        noise,
        epoch_losses,
        config: config.clone(),
    })
}

impl D2VModel {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Trainable parameter count: one vector per document plus one output
    /// vector per mention token.
    pub fn parameter_count(&self) -> usize {
        (self.doc_vectors.nrows() + self.output_vectors.nrows()) * self.dim()
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn doc_vector(&self, cascade_id: &str) -> Option<ArrayView1<'_, f64>> {
        let row = self.doc_ids.iter().position(|id| id == cascade_id)?;
        Some(self.doc_vectors.row(row))
    }

    /// Trained document vectors keyed by cascade id, in training order.
    pub fn doc_embeddings(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.doc_ids.clone(), self.doc_vectors.clone()).expect("one row per document")
    }

    /// Trained document vectors reordered to match `dataset` row for row.
    pub fn corpus_embeddings(&self, dataset: &Dataset) -> Result<EmbeddingMatrix> {
        let rows: HashMap<&str, usize> = self.doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let order = dataset
            .cascades()
            .iter()
            .map(|c| {
                rows.get(c.id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("no mention vector for cascade {:?}", c.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        EmbeddingMatrix::new(dataset.ids(), self.doc_vectors.select(ndarray::Axis(0), &order))
    }

    /// Document vectors for `ids`, inferring any id that was not trained.
    pub fn embeddings_for(&self, ids: &[String], docs_by_id: &HashMap<String, &MentionDocument>, steps: usize) -> EmbeddingMatrix {
        let rows: HashMap<&str, usize> = self.doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut data = Array2::zeros((ids.len(), self.dim()));
        for (r, id) in ids.iter().enumerate() {
            match rows.get(id.as_str()) {
                Some(&row) => data.row_mut(r).assign(&self.doc_vectors.row(row)),
                None => {
                    let empty = MentionDocument { cascade_id: id.clone(), tokens: vec![] };
                    let doc = docs_by_id.get(id).copied().unwrap_or(&empty);
                    let seed = self.config.seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                    data.row_mut(r).assign(&infer_doc_vector(self, doc, steps, seed).vector);
                }
            }
        }
        EmbeddingMatrix::new(ids.to_vec(), data).expect("one row per id")
    }
}

/// Fits a fresh document vector for `doc` against the frozen output
/// vectors, using the training objective and learning-rate schedule.
pub fn infer_doc_vector(model: &D2VModel, doc: &MentionDocument, steps: usize, seed: u64) -> InferredVector {
    let tokens: Vec<usize> = doc.tokens.iter().filter_map(|t| model.token_index(t)).collect();
    let dim = model.dim();
    if tokens.is_empty() {
        log::warn!("cascade {:?} has no known mentions; using a zero vector", doc.cascade_id);
        return InferredVector {
            vector: Array1::zeros(dim),
            empty: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vector = uniform_init(1, dim, &mut rng).row(0).to_owned();
    let sampler = WeightedIndex::new(&model.noise).expect("valid noise distribution");
    let mut output = model.output_vectors.clone();
    let total = (tokens.len() * steps).max(1) as f64;
    let (lr0, lr1) = (model.config.lr_initial, model.config.lr_final);
    let mut negs = Vec::new();
    let mut delta = Array1::zeros(dim);
    let mut processed = 0usize;
    for _ in 0..steps {
        for &w in &tokens {
            let lr = lr0 - (lr0 - lr1) * processed as f64 / total;
            draw_negatives(&sampler, model.config.negatives, w, &mut rng, &mut negs);
            delta.fill(0.0);
            sgd_pair(vector.view(), delta.view_mut(), &mut output, w, &negs, lr, false);
            vector += &delta;
            processed += 1;
        }
    }
    InferredVector { vector, empty: false }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let denom = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(&b) / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Label, SynthConfig};
    use ndarray::array;
    use rand::Rng;

    fn doc(id: &str, tokens: &[&str]) -> MentionDocument {
        MentionDocument {
            cascade_id: id.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn mention_documents_follow_tweet_order() {
        let ds = crate::corpus::read_corpus(
            "{\"id\":\"b\",\"label\":\"reliable\",\"split\":\"train\",\"tweets\":[{\"id\":\"1\",\"author\":\"u\",\"timestamp\":1,\"action\":\"tweet\",\"text\":\"hi @a\"},{\"id\":\"2\",\"author\":\"u\",\"timestamp\":2,\"action\":\"reply\",\"text\":\"@b @a!\"}]}\n\
             {\"id\":\"a\",\"label\":\"reliable\",\"split\":\"train\",\"tweets\":[{\"id\":\"1\",\"author\":\"u\",\"timestamp\":1,\"action\":\"tweet\",\"text\":\"nothing\"}]}\n\
             {\"id\":\"c\",\"label\":\"reliable\",\"split\":\"test\",\"tweets\":[{\"id\":\"1\",\"author\":\"u\",\"timestamp\":1,\"action\":\"tweet\",\"text\":\"@z\"}]}"
                .as_bytes(),
        )
        .unwrap();
        let docs = build_mention_documents(&ds);
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0], doc("a", &[]));
        assert_eq!(docs[1], doc("b", &["@a", "@b", "@a"]));
    }

    #[test]
    fn zero_vectors_give_three_ln2() {
        let z = Array1::zeros(4);
        let loss = pair_loss(z.view(), z.view(), &[z.view(), z.view()]);
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn doc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dim = rng.random_range(2..8);
            let mut rand_vec = || Array1::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0));
            let v = rand_vec();
            let pos = rand_vec();
            let negs: Vec<Array1<f64>> = (0..3).map(|_| rand_vec()).collect();
            let nv: Vec<_> = negs.iter().map(|n| n.view()).collect();
            let g = pair_loss_doc_gradient(v.view(), pos.view(), &nv);
            let h = 1e-6;
            for i in 0..dim {
                let (mut up, mut down) = (v.clone(), v.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (pair_loss(up.view(), pos.view(), &nv) - pair_loss(down.view(), pos.view(), &nv)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "component {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn sgd_step_follows_the_gradient() {
        let v = array![0.3, -0.2, 0.5];
        let mut out = array![[0.1, 0.4, -0.3], [-0.2, 0.1, 0.2]];
        let before_out = out.clone();
        let mut delta = Array1::zeros(3);
        let lr = 0.1;
        sgd_pair(v.view(), delta.view_mut(), &mut out, 0, &[1], lr, true);
        let expected = pair_loss_doc_gradient(v.view(), before_out.row(0), &[before_out.row(1)]) * -lr;
        for (a, b) in delta.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_distribution_is_normalised_power_law() {
        let docs = vec![doc("a", &["@x", "@x", "@x", "@x", "@y", "@y"]), doc("b", &["@y", "@z", "@z"])];
        let model = train_doc2vec(&docs, &D2VConfig { dim: 4, epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(model.vocab, ["@x", "@y", "@z"]);
        let total: f64 = model.noise.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let ratio = model.noise[0] / model.noise[2];
        assert!((ratio - (4.0f64 / 2.0).powf(0.75)).abs() < 1e-12);
        assert_eq!(model.parameter_count(), (2 + 3) * 4);
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let docs = vec![doc("a", &["@x"]), doc("b", &[])];
        assert!(matches!(train_doc2vec(&docs, &D2VConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn bad_config_rejected() {
        let docs = vec![doc("a", &["@x", "@x"])];
        let cfg = D2VConfig { lr_final: 0.0, ..Default::default() };
        assert!(matches!(train_doc2vec(&docs, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn inference_edge_cases() {
        let docs = vec![doc("a", &["@x", "@y", "@x"]), doc("b", &["@y", "@x", "@y"])];
        let model = train_doc2vec(&docs, &D2VConfig { dim: 8, epochs: 5, ..Default::default() }).unwrap();
        let empty = infer_doc_vector(&model, &doc("e", &[]), 10, 1);
        assert!(empty.empty);
        assert!(empty.vector.iter().all(|&x| x == 0.0));
        let unknown = infer_doc_vector(&model, &doc("u", &["@nobody"]), 10, 1);
        assert!(unknown.empty);
        let a = infer_doc_vector(&model, &docs[0], 10, 3);
        assert_eq!(a, infer_doc_vector(&model, &docs[0], 10, 3));
        assert!(!a.empty);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_synthetic(&SynthConfig { n_cascades: 80, ..Default::default() }, 4).unwrap();
        let docs = build_mention_documents(&ds);
        let cfg = D2VConfig { dim: 16, epochs: 3, ..Default::default() };
        let a = train_doc2vec(&docs, &cfg).unwrap();
        let b = train_doc2vec(&docs, &cfg).unwrap();
        assert_eq!(a.doc_vectors, b.doc_vectors);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.doc_vectors.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn model_size_ignores_user_count() {
        // Same mention documents, very different numbers of authoring users.
        let docs = vec![doc("a", &["@x", "@y", "@x"]), doc("b", &["@y", "@x", "@y"])];
        let model = train_doc2vec(&docs, &D2VConfig { dim: 8, epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(model.parameter_count(), (docs.len() + model.vocab.len()) * 8);
    }

    #[test]
    fn identical_documents_end_up_close() {
        let ds = generate_synthetic(&SynthConfig { n_cascades: 400, ..Default::default() }, 9).unwrap();
        let mut docs = build_mention_documents(&ds);
        let twin = MentionDocument {
            cascade_id: "zz-twin".into(),
            tokens: docs[0].tokens.iter().rev().cloned().collect(),
        };
        docs.push(twin);
        let model = train_doc2vec(&docs, &D2VConfig { dim: 32, epochs: 40, ..Default::default() }).unwrap();
        let twin_cos = cosine(model.doc_vectors.row(0), model.doc_vectors.row(docs.len() - 1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        for _ in 0..500 {
            let (i, j) = (rng.random_range(0..docs.len()), rng.random_range(0..docs.len()));
            total += cosine(model.doc_vectors.row(i), model.doc_vectors.row(j));
        }
        assert!(twin_cos > total / 500.0, "twin {twin_cos} vs random {}", total / 500.0);

        // Re-inference of a training document lands near its trained vector.
        let by_id: HashMap<&str, usize> = ds.cascades().iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        let mut cos = 0.0;
        for d in docs.iter().take(20) {
            let inferred = infer_doc_vector(&model, d, 40, 7);
            cos += cosine(inferred.vector.view(), model.doc_vector(&d.cascade_id).unwrap());
        }
        assert!(cos / 20.0 > 0.5, "mean re-inference cosine {}", cos / 20.0);
        assert!(by_id.len() == ds.len());
    }

    #[test]
    fn label_homophily_shows_in_doc_vectors() {
        let ds = generate_synthetic(&SynthConfig::default(), 2).unwrap();
        let docs = build_mention_documents(&ds);
        let model = train_doc2vec(&docs, &D2VConfig { dim: 32, epochs: 15, ..Default::default() }).unwrap();
        assert!(model.epoch_losses.windows(2).skip(2).take(5).all(|w| w[1] < w[0]));
        let label: HashMap<&str, Label> = ds.cascades().iter().map(|c| (c.id.as_str(), c.label)).collect();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for i in 0..docs.len() {
            for j in (i + 1)..docs.len() {
                let c = cosine(model.doc_vectors.row(i), model.doc_vectors.row(j));
                if label[docs[i].cascade_id.as_str()] == label[docs[j].cascade_id.as_str()] {
                    within += c;
                    nw += 1;
                } else {
                    across += c;
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64);
    }
}
