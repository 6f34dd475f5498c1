//! Two-dimensional views of cascades in user space: truncated SVD,
//! percentile outlier trimming, silhouette scoring and SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Label, Split};
use crate::error::{Error, Result};
use crate::netrep::{presence_matrix, UserVocabulary};

const OVERSAMPLING: usize = 8;
const POWER_ITERATIONS: usize = 4;
const EXACT_LIMIT: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SVDFactors {
    /// Descending.
    pub singular_values: Vec<f64>,
    /// rows × k
    pub u: Array2<f64>,
    /// cols × k
    pub v: Array2<f64>,
    /// Frobenius norm of M − U Σ Vᵀ.
    pub residual: f64,
}

impl SVDFactors {
    pub fn reconstruct(&self) -> Array2<f64> {
        let us = &self.u * &Array1::from(self.singular_values.clone());
        us.dot(&self.v.t())
    }

    /// Row coordinates U Σ.
    pub fn scores(&self) -> Array2<f64> {
        &self.u * &Array1::from(self.singular_values.clone())
    }
}

fn to_na(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Top-k SVD. Small matrices use a dense decomposition; larger ones a
/// randomized range finder with power iterations. Signs are fixed so the
/// largest-magnitude entry of each left vector is positive.
pub fn truncated_svd(m: &Array2<f64>, k: usize, seed: u64) -> Result<SVDFactors> {
    let (rows, cols) = m.dim();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Shape(format!("rank {k} requested from a {rows}x{cols} matrix")));
    }
    let a = to_na(m.view());
    let (u_full, sigma, vt_full) = if rows < EXACT_LIMIT && cols < EXACT_LIMIT {
        let svd = a.clone().svd(true, true);
        (
            svd.u.expect("left vectors requested"),
            svd.singular_values,
            svd.v_t.expect("right vectors requested"),
        )
    } else {
        let l = (k + OVERSAMPLING).min(rows.min(cols));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = DMatrix::from_fn(cols, l, |_, _| StandardNormal.sample(&mut rng));
        let mut q = orthonormal_basis(&a * omega);
        for _ in 0..POWER_ITERATIONS {
            let z = orthonormal_basis(a.transpose() * &q);
            q = orthonormal_basis(&a * z);
        }
        let b = q.transpose() * &a;
        let svd = b.svd(true, true);
        (
            q * svd.u.expect("left vectors requested"),
            svd.singular_values,
            svd.v_t.expect("right vectors requested"),
        )
    };
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    order.truncate(k);

    let mut u = Array2::zeros((rows, k));
    let mut v = Array2::zeros((cols, k));
    let mut singular_values = Vec::with_capacity(k);
    for (c, &idx) in order.iter().enumerate() {
        let col = u_full.column(idx);
        let pivot = col.iter().fold(0.0f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            u[[i, c]] = sign * col[i];
        }
        for j in 0..cols {
            v[[j, c]] = sign * vt_full[(idx, j)];
        }
        singular_values.push(sigma[idx].max(0.0));
    }
    let mut factors = SVDFactors {
        singular_values,
        u,
        v,
        residual: 0.0,
    };
    factors.residual = (m - &factors.reconstruct()).iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(factors)
}

/// Linear-interpolation percentile of sorted values (`q` in [0, 100]).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trimmed {
    /// Indices of kept points, ascending.
    pub kept: Vec<usize>,
    pub dropped: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Keeps points whose every coordinate lies inside the per-axis
/// `[lower, upper]` percentile band.
pub fn trim_outliers(points: ArrayView2<f64>, lower: f64, upper: f64) -> Trimmed {
    let n = points.nrows();
    if n == 0 {
        return Trimmed { kept: vec![], dropped: 0, lower, upper };
    }
    let bands: Vec<(f64, f64)> = points
        .axis_iter(Axis(1))
        .map(|col| {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            (percentile(&v, lower), percentile(&v, upper))
        })
        .collect();
    let kept: Vec<usize> = (0..n)
        .filter(|&i| {
            points
                .row(i)
                .iter()
                .zip(&bands)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi)
        })
        .collect();
    Trimmed {
        dropped: n - kept.len(),
        kept,
        lower,
        upper,
    }
}

/// Mean silhouette coefficient with Euclidean distances and the labels as
/// clusters. Points in singleton clusters score 0.
pub fn silhouette(points: ArrayView2<f64>, labels: &[Label]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} points", labels.len())));
    }
    if n == 0 || !Label::ALL.iter().all(|l| labels.contains(l)) {
        return Err(Error::Validation("silhouette needs points from both labels".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = (&points.row(i) - &points.row(j)).mapv(|x| x * x).sum().sqrt();
            sums[labels[j].index()] += d;
            counts[labels[j].index()] += 1;
        }
        let own = labels[i].index();
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = sums[1 - own] / counts[1 - own] as f64;
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;

fn fill(label: Label) -> &'static str {
    match label {
        Label::Reliable => "#1f77b4",
        Label::Unreliable => "#d62728",
    }
}

/// Scatter plot with one circle per point coloured by label and a legend
/// drawn with rectangles.
pub fn render_scatter(points: ArrayView2<f64>, labels: &[Label], title: &str) -> Result<String> {
    if points.nrows() != labels.len() || (points.nrows() > 0 && points.ncols() != 2) {
        return Err(Error::Shape(format!(
            "{} labels for a {:?} point array",
            labels.len(),
            points.dim()
        )));
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    if points.nrows() > 0 {
        let range = |c: usize| {
            let col = points.column(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi - lo } else { 1.0 })
        };
        let (x0, xr) = range(0);
        let (y0, yr) = range(1);
        for (p, &l) in points.outer_iter().zip(labels) {
            let x = MARGIN + (p[0] - x0) / xr * (WIDTH - 2.0 * MARGIN);
            let y = HEIGHT - MARGIN - (p[1] - y0) / yr * (HEIGHT - 2.0 * MARGIN);
            let _ = writeln!(
                svg,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
                fill(l)
            );
        }
    }
    for (i, l) in Label::ALL.iter().enumerate() {
        let y = MARGIN + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#,
            WIDTH - 130.0,
            y,
            fill(*l)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{l}</text>"#,
            WIDTH - 114.0,
            y + 9.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Project only test-split cascades; otherwise every split.
    pub test_only: bool,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            test_only: true,
            lower_percentile: 1.0,
            upper_percentile: 99.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: String,
    pub label: Label,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Points left after trimming.
    pub points: Vec<ProjectedPoint>,
    pub dropped_outliers: usize,
    pub lower_percentile: f64,
    pub upper_percentile: f64,
    pub singular_values: Vec<f64>,
    pub residual: f64,
    pub users: usize,
    pub silhouette: Option<f64>,
}

impl Projection {
    pub fn coordinates(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.points.len(), 2), |(i, c)| if c == 0 { self.points[i].x } else { self.points[i].y })
    }

    pub fn labels(&self) -> Vec<Label> {
        self.points.iter().map(|p| p.label).collect()
    }

    pub fn svg(&self) -> Result<String> {
        render_scatter(self.coordinates().view(), &self.labels(), "Cascades by user presence (SVD)")
    }

    pub fn save(&self, svg_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(svg_path, self.svg()?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Projects cascades to 2D through the unfiltered (threshold 1) user
/// presence matrix.
pub fn project_cascades(dataset: &Dataset, config: &ClusterConfig) -> Result<Projection> {
    if !(0.0..=100.0).contains(&config.lower_percentile)
        || !(0.0..=100.0).contains(&config.upper_percentile)
        || config.lower_percentile > config.upper_percentile
    {
        return Err(Error::Config(format!(
            "percentile band ({}, {}) is not inside [0, 100]",
            config.lower_percentile, config.upper_percentile
        )));
    }
    let vocab = UserVocabulary::build(dataset, 1, &Split::ALL)?;
    let rows: Vec<usize> = if config.test_only {
        dataset.split_indices(Split::Test).to_vec()
    } else {
        (0..dataset.len()).collect()
    };
    let presence = presence_matrix(dataset, &vocab).select(Axis(0), &rows);
    if presence.nrows() < 2 || presence.ncols() < 2 {
        return Err(Error::Validation(format!(
            "need at least two cascades and two users to project, got {:?}",
            presence.dim()
        )));
    }
    let factors = truncated_svd(&presence, 2, config.seed)?;
    let coords = factors.scores();
    let trimmed = trim_outliers(coords.view(), config.lower_percentile, config.upper_percentile);
    let cascades = dataset.cascades();
    let points: Vec<ProjectedPoint> = trimmed
        .kept
        .iter()
        .map(|&i| ProjectedPoint {
            id: cascades[rows[i]].id.clone(),
            label: cascades[rows[i]].label,
            x: coords[[i, 0]],
            y: coords[[i, 1]],
        })
        .collect();
    let kept = coords.select(Axis(0), &trimmed.kept);
    let labels: Vec<Label> = points.iter().map(|p| p.label).collect();
    Ok(Projection {
        silhouette: silhouette(kept.view(), &labels).ok(),
        points,
        dropped_outliers: trimmed.dropped,
        lower_percentile: config.lower_percentile,
        upper_percentile: config.upper_percentile,
        singular_values: factors.singular_values,
        residual: factors.residual,
        users: vocab.dim(),
    })
}

/// Plants `U · diag(values) · Vᵀ` with random orthonormal factors.
pub fn planted_low_rank(rows: usize, cols: usize, values: &[f64], seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = values.len();
    let u = orthonormal_basis(DMatrix::from_fn(rows, k, |_, _| StandardNormal.sample(&mut rng)));
    let v = orthonormal_basis(DMatrix::from_fn(cols, k, |_, _| StandardNormal.sample(&mut rng)));
    let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values));
    from_na(&(u * sigma * v.transpose()))
}
