use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::block::{uniform, BlockCache, TransformerBlock};
use super::{Architecture, BranchSpec, Parameters};
use crate::corpus::Label;
use crate::error::{Error, Result};

const POSITION_INIT: f64 = 0.02;
#[derive(Debug, Clone, PartialEq)]
pub(super) struct Branch {
    pub spec: BranchSpec,
    pub projection: Option<(Array2<f64>, Array1<f64>)>,
    /// Learned per-position offsets added to the chunked tokens.
    pub position: Array2<f64>,
    pub block: TransformerBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub arch: Architecture,
    pub(super) branches: Vec<Branch>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

struct BranchCache {
    input: Array2<f64>,
    block: BlockCache,
}

pub(super) struct ForwardCache {
    branches: Vec<BranchCache>,
    /// Concatenated branch outputs after dropout.
    features: Array2<f64>,
    mask: Option<Array2<f64>>,
    logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl Branch {
    fn new(spec: &BranchSpec, ffn_multiplier: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.model_dim();
        let projection = spec
            .projection
            .map(|p| (uniform(rng, (spec.input_dim, p), spec.input_dim), Array1::zeros(p)));
        Branch {
            spec: spec.clone(),
            projection,
            position: uniform(rng, (spec.tokens, d), 1) * POSITION_INIT,
            block: TransformerBlock::new(d, ffn_multiplier * d, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Branch {
            spec: self.spec.clone(),
            projection: self
                .projection
                .as_ref()
                .map(|(w, b)| (Array2::zeros(w.raw_dim()), Array1::zeros(b.raw_dim()))),
            position: Array2::zeros(self.position.raw_dim()),
            block: self.block.zeros_like(),
        }
    }

    /// Projects (optionally), pads and reshapes rows into token sequences.
    fn tokens(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let spec = &self.spec;
        let (t, d) = (spec.tokens, spec.model_dim());
        let chunked = match &self.projection {
            Some((w, b)) => input.dot(w) + b,
            None => input.to_owned(),
        };
        let mut padded = Array2::zeros((input.nrows(), t * d));
        padded.slice_mut(s![.., ..spec.chunked_dim()]).assign(&chunked);
        let mut seq = padded
            .into_shape_with_order((input.nrows() * t, d))
            .expect("contiguous reshape");
        for mut chunk in seq.exact_chunks_mut((t, d)) {
            chunk += &self.position;
        }
        seq
    }

    fn forward(&self, input: ArrayView2<f64>) -> (Array2<f64>, BranchCache) {
        let t = self.spec.tokens;
        let seq = self.tokens(input);
        let (out, block) = self.block.forward_batch(&seq, t);
        let pooled = out
            .into_shape_with_order((input.nrows(), t, self.spec.model_dim()))
            .expect("contiguous reshape")
            .mean_axis(Axis(1))
            .expect("non-empty token axis");
        (
            pooled,
            BranchCache {
                input: input.to_owned(),
                block,
            },
        )
    }

    fn backward(&self, dpooled: ArrayView2<f64>, cache: &BranchCache, grads: &mut Branch) {
        let (t, d) = (self.spec.tokens, self.spec.model_dim());
        let rows = dpooled.nrows();
        let mut dy = Array2::zeros((rows * t, d));
        for (mut chunk, g) in dy.exact_chunks_mut((t, d)).into_iter().zip(dpooled.rows()) {
            chunk.assign(&(&g / t as f64));
        }
        let dseq = self.block.backward_batch(&dy, &cache.block, &mut grads.block);
        for chunk in dseq.exact_chunks((t, d)) {
            grads.position += &chunk;
        }
        if let (Some((w, _)), Some((gw, gb))) = (&self.projection, &mut grads.projection) {
            let dpadded = dseq.into_shape_with_order((rows, t * d)).expect("contiguous reshape");
            let dproj = dpadded.slice(s![.., ..w.ncols()]);
            *gw += &cache.input.t().dot(&dproj);
            *gb += &dproj.sum_axis(Axis(0));
        }
    }
}

impl ClassifierModel {
    /// Deterministic initialisation: weights uniform in ±1/√fan-in, biases
    /// zero, layer-norm gains one.
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches: Vec<Branch> = arch
            .branches
            .iter()
            .map(|spec| Branch::new(spec, arch.ffn_multiplier, &mut rng))
            .collect();
        let features: usize = arch.branches.iter().map(BranchSpec::model_dim).sum();
        let model = ClassifierModel {
            arch: arch.clone(),
            branches,
            head_weight: uniform(&mut rng, (features, 2), features),
            head_bias: Array1::zeros(2),
        };
        log::debug!("{} model with {} parameters", arch.kind, model.parameter_count());
        Ok(model)
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierModel {
            arch: self.arch.clone(),
            branches: self.branches.iter().map(Branch::zeros_like).collect(),
            head_weight: Array2::zeros(self.head_weight.raw_dim()),
            head_bias: Array1::zeros(2),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.branches.iter().any(|b| b.projection.is_some())
    }

    pub fn branch_token_dims(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.block.dim()).collect()
    }

    fn check_inputs(&self, inputs: &[ArrayView2<f64>]) -> Result<usize> {
        if inputs.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} expects {} input views, got {}",
                self.arch.kind,
                self.branches.len(),
                inputs.len()
            )));
        }
        let rows = inputs[0].nrows();
        for (b, x) in self.branches.iter().zip(inputs) {
            if x.nrows() != rows {
                return Err(Error::Shape(format!("branch inputs have {} and {} rows", rows, x.nrows())));
            }
            if x.ncols() != b.spec.input_dim {
                return Err(Error::Shape(format!(
                    "{:?} branch expects width {}, got {}",
                    b.spec.view,
                    b.spec.input_dim,
                    x.ncols()
                )));
            }
        }
        Ok(rows)
    }

    /// Forward pass. With `dropout_rng` set, inverted dropout is applied to
    /// the concatenated features (train mode).
    pub(super) fn forward_cached(
        &self,
        inputs: &[ArrayView2<f64>],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        let rows = self.check_inputs(inputs)?;
        let mut pooled = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for (b, x) in self.branches.iter().zip(inputs) {
            let (p, c) = b.forward(*x);
            pooled.push(p);
            caches.push(c);
        }
        let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let mut features = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        let mask = match dropout_rng {
            Some(rng) if self.arch.dropout > 0.0 => {
                let keep = 1.0 - self.arch.dropout;
                let mask = Array2::from_shape_simple_fn(features.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                features *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let logits = features.dot(&self.head_weight) + &self.head_bias;
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let max = row[0].max(row[1]);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        debug_assert_eq!(probs.nrows(), rows);
        Ok(ForwardCache {
            branches: caches,
            features,
            mask,
            logits,
            probs,
        })
    }

    /// Class probabilities (reliable, unreliable) per row.
    pub fn forward(&self, inputs: &[ArrayView2<f64>], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs, dropout_rng)?.probs)
    }

    /// Mean softmax cross-entropy and its gradient with respect to every
    /// parameter.
    pub fn loss_and_gradient(
        &self,
        inputs: &[ArrayView2<f64>],
        labels: &[Label],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ClassifierModel)> {
        let cache = self.forward_cached(inputs, dropout_rng)?;
        if labels.len() != cache.probs.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), cache.probs.nrows())));
        }
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .zip(cache.logits.rows())
            .map(|(&l, z)| cross_entropy([z[0], z[1]], l))
            .sum::<f64>()
            / n;
        let mut dlogits = cache.probs.clone();
        for (l, mut row) in labels.iter().zip(dlogits.rows_mut()) {
            row[l.index()] -= 1.0;
        }
        dlogits /= n;
        Ok((loss, self.backward(&cache, &dlogits)))
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> ClassifierModel {
        let mut grads = self.zeros_like();
        grads.head_weight = cache.features.t().dot(dlogits);
        grads.head_bias = dlogits.sum_axis(Axis(0));
        let mut dfeatures = dlogits.dot(&self.head_weight.t());
        if let Some(mask) = &cache.mask {
            dfeatures *= mask;
        }
        let mut offset = 0;
        for ((branch, bcache), g) in self.branches.iter().zip(&cache.branches).zip(grads.branches.iter_mut()) {
            let d = branch.spec.model_dim();
            branch.backward(dfeatures.slice(s![.., offset..offset + d]), bcache, g);
            offset += d;
        }
        grads
    }
}

pub fn cross_entropy(logits: [f64; 2], label: Label) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    lse - logits[label.index()]
}

impl Parameters for ClassifierModel {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            if let Some((w, bias)) = &b.projection {
                out.push((format!("branch{i}.proj.weight"), w.shape().to_vec(), w.as_slice().expect("standard layout")));
                out.push((format!("branch{i}.proj.bias"), bias.shape().to_vec(), bias.as_slice().expect("standard layout")));
            }
            out.push((
                format!("branch{i}.position"),
                b.position.shape().to_vec(),
                b.position.as_slice().expect("standard layout"),
            ));
            for (name, shape, t) in b.block.tensors() {
                out.push((format!("branch{i}.block.{name}"), shape, t));
            }
        }
        out.push(("head.weight".into(), self.head_weight.shape().to_vec(), self.head_weight.as_slice().expect("standard layout")));
        out.push(("head.bias".into(), vec![2], self.head_bias.as_slice().expect("standard layout")));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            if let Some((w, bias)) = &mut b.projection {
                out.push((format!("branch{i}.proj.weight"), w.as_slice_mut().expect("standard layout")));
                out.push((format!("branch{i}.proj.bias"), bias.as_slice_mut().expect("standard layout")));
            }
            out.push((format!("branch{i}.position"), b.position.as_slice_mut().expect("standard layout")));
            for (name, t) in b.block.tensors_mut() {
                out.push((format!("branch{i}.block.{name}"), t));
            }
        }
        out.push(("head.weight".into(), self.head_weight.as_slice_mut().expect("standard layout")));
        out.push(("head.bias".into(), self.head_bias.as_slice_mut().expect("standard layout")));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<Label>,
    pub probabilities: Array2<f64>,
}

/// Eval-mode argmax; ties go to class 0 (reliable).
pub fn predict(model: &ClassifierModel, inputs: &[ArrayView2<f64>]) -> Result<Prediction> {
    let probabilities = model.forward(inputs, None)?;
    let labels = probabilities
        .rows()
        .into_iter()
        .map(|p| label_of(p[0], p[1]))
        .collect();
    Ok(Prediction { labels, probabilities })
}

pub(super) fn label_of(p_reliable: f64, p_unreliable: f64) -> Label {
    if p_unreliable > p_reliable {
        Label::Unreliable
    } else {
        Label::Reliable
    }
}
