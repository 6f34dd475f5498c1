//! Label-driven retrofitting of text embeddings and the linear translation
//! that carries it over to unlabelled rows.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborMode {
    /// Every row is tied to all other members of its class through the
    /// class centroid (recomputed each sweep).
    Centroid,
    /// Every row draws `m` random same-class neighbours once per run; the
    /// resulting graph is symmetrised.
    CliqueSample { m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrofitConfig {
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub tolerance: f64,
    pub neighbor_mode: NeighborMode,
    pub seed: u64,
}

impl Default for RetrofitConfig {
    fn default() -> Self {
        RetrofitConfig {
            alpha: 1.0,
            beta: 1.0,
            iterations: 10,
            tolerance: 1e-6,
            neighbor_mode: NeighborMode::Centroid,
            seed: 1,
        }
    }
}

impl RetrofitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) || self.iterations == 0 {
            return Err(Error::Config(format!(
                "retrofit needs alpha > 0, beta >= 0, iterations >= 1 (got {}, {}, {})",
                self.alpha, self.beta, self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RetrofitOutput {
    pub embeddings: EmbeddingMatrix,
    /// Objective value before the first sweep and after each sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Weighted same-class edge structure.
enum Graph {
    /// Per class: member rows and the weight of each within-class edge.
    Centroid(Vec<(Vec<usize>, f64)>),
    /// Per row: (neighbour, symmetric weight).
    Sampled(Vec<Vec<(usize, f64)>>),
}

fn class_members<L: Ord + Copy>(labels: &[L]) -> Vec<Vec<usize>> {
    let mut classes: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    classes.into_values().collect()
}

fn build_graph<L: Ord + Copy>(labels: &[L], config: &RetrofitConfig) -> Graph {
    let classes = class_members(labels);
    match config.neighbor_mode {
        NeighborMode::Centroid => Graph::Centroid(
            classes
                .into_iter()
                .map(|members| {
                    let w = if members.len() > 1 {
                        config.beta / (members.len() - 1) as f64
                    } else {
                        0.0
                    };
                    (members, w)
                })
                .collect(),
        ),
        NeighborMode::CliqueSample { m } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); labels.len()];
            for members in &classes {
                let n = members.len();
                let take = m.min(n.saturating_sub(1));
                for (pos, &i) in members.iter().enumerate() {
                    // Sample among the n-1 other members.
                    for k in sample(&mut rng, n - 1, take) {
                        let j = members[if k >= pos { k + 1 } else { k }];
                        adj[i].insert(j);
                        adj[j].insert(i);
                    }
                }
            }
            let deg: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
            Graph::Sampled(
                adj.iter()
                    .enumerate()
                    .map(|(i, a)| {
                        a.iter()
                            .map(|&j| (j, config.beta * 0.5 * (1.0 / deg[i] + 1.0 / deg[j])))
                            .collect()
                    })
                    .collect(),
            )
        }
    }
}

/// Ψ = α Σᵢ‖qᵢ − q̂ᵢ‖² + Σ₍ᵢ,ⱼ₎ wᵢⱼ‖qᵢ − qⱼ‖² over undirected same-class edges.
fn objective(q: &Array2<f64>, original: &Array2<f64>, alpha: f64, graph: &Graph) -> f64 {
    let anchor: f64 = (q - original).iter().map(|x| x * x).sum();
    let smooth: f64 = match graph {
        Graph::Centroid(classes) => classes
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(members, w)| {
                // Σ_{i<j}‖qᵢ−qⱼ‖² = n Σ‖qᵢ‖² − ‖Σqᵢ‖²
                let rows = q.select(Axis(0), members);
                let sq: f64 = rows.iter().map(|x| x * x).sum();
                let s = rows.sum_axis(Axis(0));
                w * (members.len() as f64 * sq - s.dot(&s))
            })
            .sum(),
        Graph::Sampled(adj) => adj
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |(j, _)| *j > i).map(move |&(j, w)| (i, j, w)))
            .map(|(i, j, w)| {
                let d = &q.row(i) - &q.row(j);
                w * d.dot(&d)
            })
            .sum(),
    };
    alpha * anchor + smooth
}

/// One Jacobi sweep: qᵢ ← (α q̂ᵢ + Σⱼ wᵢⱼ qⱼ) / (α + Σⱼ wᵢⱼ), written as
/// q̂ᵢ + Σⱼ wᵢⱼ(qⱼ − q̂ᵢ) / (α + Σⱼ wᵢⱼ). Returns the largest coordinate change.
fn sweep(q: &Array2<f64>, original: &Array2<f64>, alpha: f64, graph: &Graph) -> (Array2<f64>, f64) {
    let mut next = original.clone();
    match graph {
        Graph::Centroid(classes) => {
            for (members, w) in classes {
                if *w == 0.0 {
                    continue;
                }
                let total_w = w * (members.len() - 1) as f64;
                let sum = q.select(Axis(0), members).sum_axis(Axis(0));
                for &i in members {
                    let mut pull: Array1<f64> = &sum - &q.row(i);
                    pull.scaled_add(-((members.len() - 1) as f64), &original.row(i));
                    next.row_mut(i).scaled_add(w / (alpha + total_w), &pull);
                }
            }
        }
        Graph::Sampled(adj) => {
            for (i, nb) in adj.iter().enumerate() {
                if nb.is_empty() {
                    continue;
                }
                let total_w: f64 = nb.iter().map(|(_, w)| w).sum();
                let mut pull = Array1::<f64>::zeros(q.ncols());
                for &(j, w) in nb {
                    pull.scaled_add(w, &q.row(j));
                }
                pull.scaled_add(-total_w, &original.row(i));
                next.row_mut(i).scaled_add(1.0 / (alpha + total_w), &pull);
            }
        }
    }
    let change = (&next - q).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    (next, change)
}

/// Pulls each row toward the other rows of its class while anchoring it to
/// its original value. Rows in singleton classes are returned unchanged.
pub fn retrofit_embeddings<L: Ord + Copy>(
    x: &EmbeddingMatrix,
    labels: &[L],
    config: &RetrofitConfig,
) -> Result<RetrofitOutput> {
    config.validate()?;
    if labels.len() != x.len() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.len())));
    }
    let graph = build_graph(labels, config);
    let original = &x.data;
    let mut q = original.clone();
    let mut trace = vec![objective(&q, original, config.alpha, &graph)];
    let mut sweeps = 0;
    for _ in 0..config.iterations {
        let (next, change) = sweep(&q, original, config.alpha, &graph);
        q = next;
        sweeps += 1;
        let psi = objective(&q, original, config.alpha, &graph);
        let prev = *trace.last().expect("initial objective");
        debug_assert!(
            psi <= prev + 1e-9 * prev.abs().max(1.0),
            "retrofit objective rose from {prev} to {psi}"
        );
        trace.push(psi);
        if change < config.tolerance {
            break;
        }
    }
    Ok(RetrofitOutput {
        embeddings: EmbeddingMatrix::new(x.ids.clone(), q)?,
        objective: trace,
        sweeps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationMatrix {
    pub matrix: Array2<f64>,
    pub lambda: f64,
    /// Mean squared error of `X_orig · M` against `X_retro` on the fit rows.
    pub residual: f64,
}

/// In-place Cholesky factorisation of a symmetric matrix; returns the
/// lower factor or `None` if a pivot is not safely positive.
fn cholesky(mut a: Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let scale = a.diag().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d <= 1e-12 * scale {
            return None;
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / d;
        }
        for k in (j + 1)..n {
            a[[j, k]] = 0.0;
        }
    }
    Some(a)
}

/// Solves L Lᵀ X = B for X.
fn cholesky_solve(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    x
}

fn mean_squared(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Ridge least squares: M = argmin ‖X_orig·M − X_retro‖² + λ‖M‖², solved
/// through the normal equations (X_origᵀX_orig + λI) M = X_origᵀX_retro.
pub fn fit_translation_matrix(
    x_orig: &EmbeddingMatrix,
    x_retro: &EmbeddingMatrix,
    lambda: f64,
) -> Result<TranslationMatrix> {
    if x_orig.data.dim() != x_retro.data.dim() {
        return Err(Error::Shape(format!(
            "original {:?} vs retrofitted {:?}",
            x_orig.data.dim(),
            x_retro.data.dim()
        )));
    }
    if x_orig.is_empty() {
        return Err(Error::Shape("translation fit needs at least one row".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ridge weight must be >= 0, got {lambda}")));
    }
    let x = &x_orig.data;
    let mut gram = x.t().dot(x);
    for i in 0..gram.nrows() {
        gram[[i, i]] += lambda;
    }
    let rhs = x.t().dot(&x_retro.data);
    let l = cholesky(gram).ok_or(if lambda == 0.0 {
        Error::Singular
    } else {
        Error::Numerical(format!("normal matrix not positive definite at lambda {lambda}"))
    })?;
    let matrix = cholesky_solve(&l, &rhs);
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("translation matrix has non-finite entries".into()));
    }
    let residual = mean_squared(x.dot(&matrix).view(), x_retro.data.view());
    Ok(TranslationMatrix { matrix, lambda, residual })
}

pub fn apply_translation(m: &TranslationMatrix, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if x.dim() != m.matrix.nrows() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs translation matrix {}x{}",
            x.dim(),
            m.matrix.nrows(),
            m.matrix.ncols()
        )));
    }
    EmbeddingMatrix::new(x.ids.clone(), x.data.dot(&m.matrix))
}

impl TranslationMatrix {
    /// Writes the matrix as a CEM1 payload (rows keyed "0".."dim-1") and a
    /// JSON sidecar at `<path>.json` with λ and the fit residual.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ids = (0..self.matrix.nrows()).map(|i| i.to_string()).collect();
        EmbeddingMatrix::new(ids, self.matrix.clone())?.save(path)?;
        let sidecar = serde_json::json!({
            "lambda": self.lambda,
            "residual": self.residual,
            "dim": self.matrix.nrows(),
        });
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = EmbeddingMatrix::load(path)?;
        if payload.len() != payload.dim() {
            return Err(Error::Format(format!(
                "translation matrix must be square, got {}x{}",
                payload.len(),
                payload.dim()
            )));
        }
        let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        Ok(TranslationMatrix {
            matrix: payload.data,
            lambda: sidecar["lambda"].as_f64().unwrap_or(0.0),
            residual: sidecar["residual"].as_f64().unwrap_or(f64::NAN),
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
