//! The five cascade classifiers: a text-only baseline and four multi-input
//! variants, each built from one-layer, one-head transformer branches whose
//! mean-pooled outputs are concatenated into a linear softmax head.

mod block;
pub mod checkpoint;
mod classifier;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use block::{BlockTrace, TransformerBlock};
pub use classifier::{predict, ClassifierModel, Prediction};
pub use train::{train, Adam, DataView, EarlyStopping, StopMetric, TrainConfig, TrainHistory};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "SI-TEXT")]
    SiText,
    #[serde(rename = "MI-SPARSE")]
    MiSparse,
    #[serde(rename = "MI-DENSE")]
    MiDense,
    #[serde(rename = "MI-RETRO")]
    MiRetro,
    #[serde(rename = "MI-M2V")]
    MiM2v,
}

impl ArchKind {
    pub const ALL: [ArchKind; 5] = [
        ArchKind::SiText,
        ArchKind::MiSparse,
        ArchKind::MiDense,
        ArchKind::MiRetro,
        ArchKind::MiM2v,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::SiText => "SI-TEXT",
            ArchKind::MiSparse => "MI-SPARSE",
            ArchKind::MiDense => "MI-DENSE",
            ArchKind::MiRetro => "MI-RETRO",
            ArchKind::MiM2v => "MI-M2V",
        }
    }

    /// Row label used in report tables.
    pub fn description(self) -> &'static str {
        match self {
            ArchKind::SiText => "Single-Input (baseline)",
            ArchKind::MiSparse => "Multi-Input: network-sparse-vectors",
            ArchKind::MiDense => "Multi-Input: network-embeddings",
            ArchKind::MiRetro => "Multi-Input: retrofitted text + network-embeddings",
            ArchKind::MiM2v => "Multi-Input: M2V",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Which representation feeds a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputView {
    Text,
    RetroText,
    Sparse,
    M2v,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub view: InputView,
    pub input_dim: usize,
    /// Width of the trainable fully connected squeeze applied before
    /// chunking, if any.
    pub projection: Option<usize>,
    /// Number of tokens the (projected) vector is chunked into.
    pub tokens: usize,
}

impl BranchSpec {
    /// Width of the vector that gets chunked.
    pub fn chunked_dim(&self) -> usize {
        self.projection.unwrap_or(self.input_dim)
    }

    /// Per-token model width: the chunked vector, zero-padded to a multiple
    /// of the token count, split evenly.
    pub fn model_dim(&self) -> usize {
        self.chunked_dim().div_ceil(self.tokens)
    }
}

/// Input widths of the available representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub text: usize,
    pub sparse: usize,
    pub m2v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    pub branches: Vec<BranchSpec>,
    /// FFN hidden width as a multiple of the branch model width.
    pub ffn_multiplier: usize,
    /// Dropout on the concatenated branch outputs, before the head.
    pub dropout: f64,
}

pub const DENSE_PROJECTION_DIM: usize = 128;
pub const DEFAULT_TOKENS: usize = 8;
const SPARSE_ATTENTION_WARN_DIM: usize = 4096;

impl Architecture {
    pub fn new(kind: ArchKind, dims: InputDims) -> Self {
        Self::with_shape(kind, dims, DEFAULT_TOKENS, DENSE_PROJECTION_DIM)
    }

    pub fn with_shape(kind: ArchKind, dims: InputDims, tokens: usize, dense_projection: usize) -> Self {
        let branch = |view, input_dim, projection| BranchSpec {
            view,
            input_dim,
            projection,
            tokens,
        };
        let branches = match kind {
            ArchKind::SiText => vec![branch(InputView::Text, dims.text, None)],
            // Presence vectors enter unchunked: one token as wide as the
            // user vocabulary.
            ArchKind::MiSparse => vec![
                branch(InputView::Text, dims.text, None),
                BranchSpec {
                    tokens: 1,
                    ..branch(InputView::Sparse, dims.sparse, None)
                },
            ],
            ArchKind::MiDense => vec![
                branch(InputView::Text, dims.text, None),
                branch(InputView::Sparse, dims.sparse, Some(dense_projection)),
            ],
            ArchKind::MiRetro => vec![
                branch(InputView::RetroText, dims.text, None),
                branch(InputView::Sparse, dims.sparse, Some(dense_projection)),
            ],
            ArchKind::MiM2v => vec![
                branch(InputView::Text, dims.text, None),
                branch(InputView::M2v, dims.m2v, None),
            ],
        };
        if kind == ArchKind::MiSparse && dims.sparse > SPARSE_ATTENTION_WARN_DIM {
            log::warn!(
                "MI-SPARSE attends over a {}-wide user vocabulary; attention cost grows quadratically with it",
                dims.sparse
            );
        }
        Architecture {
            kind,
            branches,
            ffn_multiplier: 2,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("architecture has no branches".into()));
        }
        for b in &self.branches {
            if b.input_dim == 0 || b.tokens == 0 || b.projection == Some(0) {
                return Err(Error::Config(format!("degenerate branch {b:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) || self.ffn_multiplier == 0 {
            return Err(Error::Config("dropout must lie in [0, 1) and the FFN must be non-empty".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed traversal order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}
