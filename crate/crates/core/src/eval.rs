//! Classification metrics, paired bootstrap significance and multi-run
//! aggregation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Counts indexed `[gold][predicted]`, class 0 = reliable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, gold: Label, pred: Label) -> u64 {
        self.counts[gold.index()][pred.index()]
    }
}

pub fn confusion(gold: &[Label], pred: &[Label]) -> Result<ConfusionMatrix> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold labels vs {} predictions", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty prediction set".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (g, p) in gold.iter().zip(pred) {
        cm.counts[g.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub reliable: ClassScores,
    /// Target class.
    pub unreliable: ClassScores,
    pub macro_avg: ClassScores,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(cm: &ConfusionMatrix, class: Label) -> ClassScores {
    let c = class.index();
    let tp = cm.counts[c][c];
    let predicted = cm.counts[0][c] + cm.counts[1][c];
    let actual = cm.counts[c][0] + cm.counts[c][1];
    let precision = ratio(tp, predicted);
    let recall = ratio(tp, actual);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassScores { precision, recall, f1 }
}

/// Per-class and macro scores; every 0/0 is taken as 0.
pub fn metrics(cm: &ConfusionMatrix) -> EvalReport {
    let reliable = class_scores(cm, Label::Reliable);
    let unreliable = class_scores(cm, Label::Unreliable);
    EvalReport {
        accuracy: ratio(cm.counts[0][0] + cm.counts[1][1], cm.total()),
        reliable,
        unreliable,
        macro_avg: ClassScores {
            precision: (reliable.precision + unreliable.precision) / 2.0,
            recall: (reliable.recall + unreliable.recall) / 2.0,
            f1: (reliable.f1 + unreliable.f1) / 2.0,
        },
    }
}

pub fn evaluate(gold: &[Label], pred: &[Label]) -> Result<EvalReport> {
    Ok(metrics(&confusion(gold, pred)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    MacroPrecision,
    MacroRecall,
    TargetF1,
    TargetPrecision,
    TargetRecall,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::MacroF1,
        Metric::Accuracy,
        Metric::MacroPrecision,
        Metric::MacroRecall,
        Metric::TargetF1,
        Metric::TargetPrecision,
        Metric::TargetRecall,
    ];

    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::MacroF1 => r.macro_avg.f1,
            Metric::MacroPrecision => r.macro_avg.precision,
            Metric::MacroRecall => r.macro_avg.recall,
            Metric::TargetF1 => r.unreliable.f1,
            Metric::TargetPrecision => r.unreliable.precision,
            Metric::TargetRecall => r.unreliable.recall,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro-f1",
            Metric::MacroPrecision => "macro-precision",
            Metric::MacroRecall => "macro-recall",
            Metric::TargetF1 => "target-f1",
            Metric::TargetPrecision => "target-precision",
            Metric::TargetRecall => "target-recall",
        }
    }

    /// Class-conditional scores are only meaningful when both gold classes
    /// occur in the sample.
    fn needs_both_classes(self) -> bool {
        self != Metric::Accuracy
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub fraction: f64,
    pub seed: u64,
    pub with_replacement: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            fraction: 0.3,
            seed: 1,
            with_replacement: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: Metric,
    pub resamples: usize,
    pub fraction: f64,
    pub seed: u64,
    /// Metric of A minus metric of B on the full set.
    pub observed_delta: f64,
    pub deltas: Vec<f64>,
    /// One-sided: (1 + #{δ ≤ 0}) / (B + 1).
    pub p_value: f64,
}

const MAX_RESAMPLE_RETRIES: usize = 100;

/// Sample of `m` indices out of `n` for resample `b`, drawn from the
/// counter-based substream `(seed, b)`.
pub fn resample_indices(rng: &mut ChaCha8Rng, n: usize, m: usize, with_replacement: bool) -> Vec<usize> {
    if with_replacement {
        (0..m).map(|_| rng.random_range(0..n)).collect()
    } else {
        rand::seq::index::sample(rng, n, m.min(n)).into_vec()
    }
}

pub fn substream(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Paired bootstrap test that system A beats system B on `metric`.
pub fn bootstrap_significance(
    gold: &[Label],
    preds_a: &[Label],
    preds_b: &[Label],
    metric: Metric,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let n = gold.len();
    if preds_a.len() != n || preds_b.len() != n {
        return Err(Error::Shape(format!(
            "gold {n}, system A {}, system B {} predictions",
            preds_a.len(),
            preds_b.len()
        )));
    }
    if n == 0 || config.resamples == 0 {
        return Err(Error::Validation("bootstrap needs predictions and at least one resample".into()));
    }
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(Error::Config(format!("bootstrap fraction {} outside (0, 1]", config.fraction)));
    }
    let observed_delta = metric.of(&evaluate(gold, preds_a)?) - metric.of(&evaluate(gold, preds_b)?);
    let m = ((config.fraction * n as f64).ceil() as usize).max(1);
    let mut deltas = Vec::with_capacity(config.resamples);
    let (mut g, mut a, mut b) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for r in 0..config.resamples {
        let mut rng = substream(config.seed, r);
        let mut attempts = 0;
        loop {
            let idx = resample_indices(&mut rng, n, m, config.with_replacement);
            g.clear();
            a.clear();
            b.clear();
            for &i in &idx {
                g.push(gold[i]);
                a.push(preds_a[i]);
                b.push(preds_b[i]);
            }
            let both = g.contains(&Label::Reliable) && g.contains(&Label::Unreliable);
            if both || !metric.needs_both_classes() {
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLE_RETRIES {
                return Err(Error::Validation(format!(
                    "bootstrap samples of size {m} keep missing a gold class; {} is undefined",
                    metric.name()
                )));
            }
        }
        deltas.push(metric.of(&evaluate(&g, &a)?) - metric.of(&evaluate(&g, &b)?));
    }
    let not_better = deltas.iter().filter(|&&d| d <= 0.0).count();
    Ok(BootstrapResult {
        metric,
        resamples: config.resamples,
        fraction: config.fraction,
        seed: config.seed,
        observed_delta,
        p_value: (1 + not_better) as f64 / (config.resamples + 1) as f64,
        deltas,
    })
}

pub fn stars(p: f64) -> &'static str {
    if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Stat {
    if values.is_empty() {
        return Stat::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub metrics: Vec<(Metric, Stat)>,
}

impl Aggregate {
    pub fn get(&self, metric: Metric) -> Stat {
        self.metrics
            .iter()
            .find(|(m, _)| *m == metric)
            .map(|(_, s)| *s)
            .expect("every metric is aggregated")
    }
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            let values: Vec<f64> = reports.iter().map(|r| m.of(r)).collect();
            (m, mean_std(&values))
        })
        .collect();
    Ok(Aggregate {
        runs: reports.len(),
        metrics,
    })
}

/// One model row of the results tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub mean_epochs: f64,
    pub aggregate: Aggregate,
    /// p-values against the baseline, if this row was compared.
    pub p_values: Vec<(Metric, f64)>,
}

impl TableRow {
    fn cell(&self, metric: Metric) -> String {
        let stars = self
            .p_values
            .iter()
            .find(|(m, _)| *m == metric)
            .map_or("", |(_, p)| stars(*p));
        format!("{:.2}{}", 100.0 * self.aggregate.get(metric).mean, if stars.is_empty() { String::new() } else { format!(" {stars}") })
    }
}

fn render_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = format!("{title}\n");
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let head = line(header.to_vec());
    let _ = writeln!(out, "{head}");
    let _ = writeln!(out, "{}", "-".repeat(head.len()));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()).trim_end());
    }
    out
}

/// Plain-text overall and target-class tables; significance stars mark
/// p ≤ 0.05 (*) and p ≤ 0.01 (**).
pub fn format_tables(rows: &[TableRow]) -> String {
    let overall: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                format!("{:.2}", r.mean_epochs),
                r.cell(Metric::MacroF1),
                format!("{:.2}", r.aggregate.get(Metric::MacroF1).std),
                r.cell(Metric::Accuracy),
                r.cell(Metric::MacroPrecision),
                r.cell(Metric::MacroRecall),
            ]
        })
        .collect();
    let target: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                format!("{:.2}", r.mean_epochs),
                r.cell(Metric::TargetF1),
                format!("{:.2}", r.aggregate.get(Metric::TargetF1).std),
                r.cell(Metric::TargetPrecision),
                r.cell(Metric::TargetRecall),
            ]
        })
        .collect();
    let mut out = render_table(
        "Overall performance",
        &["Model", "Mean epochs", "Macro-F1", "Std. Dev.", "Accuracy", "Precision", "Recall"],
        &overall,
    );
    out.push('\n');
    out.push_str(&render_table(
        "Target class (unreliable)",
        &["Model", "Mean epochs", "F1", "Std. Dev.", "Precision", "Recall"],
        &target,
    ));
    out
}
