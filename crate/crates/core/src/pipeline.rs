//! End-to-end experiments: corpus, representations, training of every
//! requested architecture over several seeds, evaluation, significance
//! and the user-space figure. All outputs go under one run directory with
//! `manifest.json` at its root.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{project_cascades, ClusterConfig, Projection};
use crate::corpus::{generate_synthetic, parse_corpus, random_projection_embeddings, Dataset, Label, Split, SynthConfig};
use crate::embeddings::{check_alignment, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_runs, bootstrap_significance, evaluate, format_tables, stars, BootstrapConfig, EvalReport, Metric,
    TableRow,
};
use crate::m2v::{build_mention_documents, train_doc2vec, D2VConfig};
use crate::model::{checkpoint, predict, train, ArchKind, Architecture, ClassifierModel, DataView, InputDims, InputView, TrainConfig};
use crate::netrep::{presence_matrix, UserVocabulary};
use crate::retrofit::{apply_translation, fit_translation_matrix, retrofit_embeddings, RetrofitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusSource {
    File {
        path: PathBuf,
    },
    Synthetic {
        seed: u64,
        #[serde(default)]
        config: SynthConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextSource {
    /// CEM1 file row-aligned with the corpus.
    File { path: PathBuf },
    /// Seeded bag-of-words projection, for corpora without precomputed
    /// embeddings.
    RandomProjection { dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub tokens: usize,
    pub dense_projection: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            tokens: crate::model::DEFAULT_TOKENS,
            dense_projection: crate::model::DENSE_PROJECTION_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusSource,
    pub text: TextSource,
    #[serde(default = "default_threshold")]
    pub vocab_threshold: u32,
    /// Build the user vocabulary from the training split only.
    #[serde(default)]
    pub vocab_train_only: bool,
    #[serde(default)]
    pub m2v: D2VConfig,
    #[serde(default)]
    pub retrofit: RetrofitConfig,
    #[serde(default = "default_lambda")]
    pub translation_lambda: f64,
    #[serde(default = "default_architectures")]
    pub architectures: Vec<ArchKind>,
    #[serde(default = "default_baseline")]
    pub baseline: ArchKind,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default = "default_true")]
    pub render_cluster: bool,
}

fn default_threshold() -> u32 {
    15
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_architectures() -> Vec<ArchKind> {
    ArchKind::ALL.to_vec()
}

fn default_baseline() -> ArchKind {
    ArchKind::SiText
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Reads the configuration recorded in a run manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: serde_json::Value = serde_json::from_str(&text)?;
        let config = manifest
            .get("config")
            .ok_or_else(|| Error::Config("manifest has no config section".into()))?;
        serde_json::from_value(config.clone()).map_err(|e| Error::Config(format!("manifest config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() {
            return Err(Error::Config("architecture list is empty".into()));
        }
        if self.vocab_threshold == 0 {
            return Err(Error::Config("vocabulary threshold must be at least 1".into()));
        }
        if !(self.translation_lambda >= 0.0) {
            return Err(Error::Config("translation lambda must be >= 0".into()));
        }
        if self.model.tokens == 0 || self.model.dense_projection == 0 {
            return Err(Error::Config("token count and dense projection width must be positive".into()));
        }
        if let CorpusSource::Synthetic { config, .. } = &self.corpus {
            config.validate()?;
        }
        if let TextSource::RandomProjection { dim: 0, .. } = self.text {
            return Err(Error::Config("text projection dim must be positive".into()));
        }
        if self.bootstrap.resamples == 0 || !(self.bootstrap.fraction > 0.0 && self.bootstrap.fraction <= 1.0) {
            return Err(Error::Config("bootstrap needs resamples > 0 and fraction in (0, 1]".into()));
        }
        self.m2v.validate()?;
        self.retrofit.validate()?;
        self.train.validate()
    }

    fn needs(&self, view: InputView) -> bool {
        self.architectures
            .iter()
            .any(|&k| Architecture::new(k, InputDims { text: 1, sparse: 1, m2v: 1 }).branches.iter().any(|b| b.view == view))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.train.runs as u64).map(|r| self.train.seed + r).collect()
    }
}

/// Every representation, one row per cascade in corpus order.
pub struct Representations {
    pub text: EmbeddingMatrix,
    pub retro_text: Option<Array2<f64>>,
    pub sparse: Array2<f64>,
    pub m2v: Option<Array2<f64>>,
    pub vocab: UserVocabulary,
    pub info: RepresentationInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationInfo {
    pub text_dim: usize,
    pub vocab_dim: usize,
    pub m2v_vocab: Option<usize>,
    pub m2v_epoch_losses: Option<Vec<f64>>,
    pub retrofit_sweeps: Option<usize>,
    pub retrofit_objective: Option<Vec<f64>>,
    pub translation_residual: Option<f64>,
}

impl Representations {
    pub fn dims(&self) -> InputDims {
        InputDims {
            text: self.text.dim(),
            sparse: self.sparse.ncols(),
            m2v: self.m2v.as_ref().map_or(1, |m| m.ncols()),
        }
    }

    fn view(&self, view: InputView) -> &Array2<f64> {
        match view {
            InputView::Text => &self.text.data,
            InputView::RetroText => self.retro_text.as_ref().expect("retrofitted text was built"),
            InputView::Sparse => &self.sparse,
            InputView::M2v => self.m2v.as_ref().expect("mention vectors were built"),
        }
    }

    /// Branch inputs of `arch` for the cascades at `rows`.
    pub fn data_view(&self, arch: &Architecture, dataset: &Dataset, rows: &[usize]) -> DataView {
        let labels = dataset.cascades();
        DataView {
            inputs: arch.branches.iter().map(|b| self.view(b.view).select(Axis(0), rows)).collect(),
            labels: rows.iter().map(|&i| labels[i].label).collect(),
        }
    }
}

pub fn load_corpus(source: &CorpusSource) -> Result<Dataset> {
    match source {
        CorpusSource::File { path } => {
            if !path.exists() {
                return Err(Error::Config(format!("corpus file {} does not exist", path.display())));
            }
            parse_corpus(path)
        }
        CorpusSource::Synthetic { seed, config } => generate_synthetic(config, *seed),
    }
}

pub fn load_text(source: &TextSource, dataset: &Dataset) -> Result<EmbeddingMatrix> {
    let text = match source {
        TextSource::File { path } => {
            if !path.exists() {
                return Err(Error::Config(format!("embedding file {} does not exist", path.display())));
            }
            EmbeddingMatrix::load(path)?
        }
        TextSource::RandomProjection { dim, seed } => random_projection_embeddings(dataset, *dim, *seed),
    };
    check_alignment(&text, dataset)?;
    Ok(text)
}

/// Builds every representation the configured architectures need.
pub fn build_representations(config: &ExperimentConfig, dataset: &Dataset, text: EmbeddingMatrix) -> Result<Representations> {
    let splits: &[Split] = if config.vocab_train_only { &[Split::Train] } else { &Split::ALL };
    let vocab = UserVocabulary::build(dataset, config.vocab_threshold, splits)?;
    let sparse = presence_matrix(dataset, &vocab);
    let mut info = RepresentationInfo {
        text_dim: text.dim(),
        vocab_dim: vocab.dim(),
        m2v_vocab: None,
        m2v_epoch_losses: None,
        retrofit_sweeps: None,
        retrofit_objective: None,
        translation_residual: None,
    };

    let m2v = if config.needs(InputView::M2v) {
        let docs = build_mention_documents(dataset);
        let model = train_doc2vec(&docs, &config.m2v)?;
        info.m2v_vocab = Some(model.vocab.len());
        info.m2v_epoch_losses = Some(model.epoch_losses.clone());
        Some(model.corpus_embeddings(dataset)?.data)
    } else {
        None
    };

    let retro_text = if config.needs(InputView::RetroText) {
        let r = retrofit_text(dataset, &text, &config.retrofit, config.translation_lambda)?;
        info.retrofit_sweeps = Some(r.sweeps);
        info.retrofit_objective = Some(r.objective);
        info.translation_residual = Some(r.translation_residual);
        Some(r.embeddings.data)
    } else {
        None
    };

    Ok(Representations {
        text,
        retro_text,
        sparse,
        m2v,
        vocab,
        info,
    })
}

pub struct RetrofittedText {
    pub embeddings: EmbeddingMatrix,
    pub sweeps: usize,
    pub objective: Vec<f64>,
    pub translation_residual: f64,
}

/// Retrofits the training rows toward their label classes, then maps every
/// row through the translation matrix fitted on the training rows. Training
/// rows keep their retrofitted values.
pub fn retrofit_text(
    dataset: &Dataset,
    text: &EmbeddingMatrix,
    config: &RetrofitConfig,
    lambda: f64,
) -> Result<RetrofittedText> {
    check_alignment(text, dataset)?;
    let train_rows = dataset.split_indices(Split::Train);
    let x_train = text.select(train_rows);
    let labels: Vec<Label> = train_rows.iter().map(|&i| dataset.cascades()[i].label).collect();
    let out = retrofit_embeddings(&x_train, &labels, config)?;
    let m = fit_translation_matrix(&x_train, &out.embeddings, lambda)?;
    let mut all = apply_translation(&m, text)?;
    for (r, &i) in train_rows.iter().enumerate() {
        all.data.row_mut(i).assign(&out.embeddings.data.row(r));
    }
    Ok(RetrofittedText {
        embeddings: all,
        sweeps: out.sweeps,
        objective: out.objective,
        translation_residual: m.residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub label: Label,
    pub p_unreliable: f64,
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Gold labels and predicted labels matched by cascade id. Every
/// prediction must name a cascade of the corpus, and no id may repeat.
pub fn align_predictions(dataset: &Dataset, preds: &[PredictionRecord]) -> Result<(Vec<Label>, Vec<Label>)> {
    let gold: HashMap<&str, Label> = dataset.cascades().iter().map(|c| (c.id.as_str(), c.label)).collect();
    let mut seen = std::collections::HashSet::new();
    let mut g = Vec::with_capacity(preds.len());
    for p in preds {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Alignment(format!("prediction for {:?} appears twice", p.id)));
        }
        g.push(
            *gold
                .get(p.id.as_str())
                .ok_or_else(|| Error::Alignment(format!("prediction for unknown cascade {:?}", p.id)))?,
        );
    }
    Ok((g, preds.iter().map(|p| p.label).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub model: String,
    pub baseline: String,
    pub macro_f1_delta: f64,
    pub target_f1_delta: f64,
    pub p_values: Vec<(Metric, f64)>,
    pub macro_f1_stars: String,
    pub target_f1_stars: String,
}

/// Paired bootstrap of system A against baseline B on every metric.
pub fn compare(
    model: &str,
    baseline: &str,
    gold: &[Label],
    preds_a: &[Label],
    preds_b: &[Label],
    config: &BootstrapConfig,
) -> Result<SignificanceRow> {
    let a = evaluate(gold, preds_a)?;
    let b = evaluate(gold, preds_b)?;
    let p_values = Metric::ALL
        .iter()
        .map(|&m| Ok((m, bootstrap_significance(gold, preds_a, preds_b, m, config)?.p_value)))
        .collect::<Result<Vec<_>>>()?;
    let p = |metric: Metric| p_values.iter().find(|(m, _)| *m == metric).map_or(1.0, |(_, p)| *p);
    Ok(SignificanceRow {
        model: model.to_string(),
        baseline: baseline.to_string(),
        macro_f1_delta: a.macro_avg.f1 - b.macro_avg.f1,
        target_f1_delta: a.unreliable.f1 - b.unreliable.f1,
        macro_f1_stars: stars(p(Metric::MacroF1)).to_string(),
        target_f1_stars: stars(p(Metric::TargetF1)).to_string(),
        p_values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: ArchKind,
    pub seed: u64,
    pub parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub threads: usize,
    pub dev_score: f64,
    pub test: EvalReport,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<TableRow>,
    pub significance: Vec<SignificanceRow>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn row(&self, kind: ArchKind) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.model == kind.description())
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub report: ExperimentReport,
    pub checkpoints: Vec<PathBuf>,
    pub figure: Option<PathBuf>,
    pub projection: Option<Projection>,
    pub tables: String,
}

pub struct JobOutput {
    pub record: RunRecord,
    pub predictions: Vec<Label>,
}

fn run_name(kind: ArchKind, seed: u64) -> String {
    format!("{}-seed{seed}", kind.name())
}

/// Trains one architecture at one seed and writes its checkpoint and test
/// predictions under the run directory. `checkpoints/` and `predictions/`
/// must exist.
pub fn train_one(
    config: &ExperimentConfig,
    dataset: &Dataset,
    reps: &Representations,
    kind: ArchKind,
    seed: u64,
) -> Result<JobOutput> {
    let arch = Architecture::with_shape(kind, reps.dims(), config.model.tokens, config.model.dense_projection);
    let tr = reps.data_view(&arch, dataset, dataset.split_indices(Split::Train));
    let dev = reps.data_view(&arch, dataset, dataset.split_indices(Split::Dev));
    let test_rows = dataset.split_indices(Split::Test);
    let test = reps.data_view(&arch, dataset, test_rows);
    let model = ClassifierModel::build(&arch, seed)?;
    let parameters = crate::model::Parameters::parameter_count(&model);
    let train_cfg = TrainConfig { seed, ..config.train.clone() };
    let (best, history) = train(model, &tr, &dev, &train_cfg)?;
    log::info!(
        "{} seed {seed}: best epoch {} of {}",
        kind.name(),
        history.best_epoch,
        history.epochs_run
    );

    let name = run_name(kind, seed);
    let ckpt = PathBuf::from("checkpoints").join(format!("{name}.ckpt"));
    let pred_path = PathBuf::from("predictions").join(format!("{name}.jsonl"));
    checkpoint::save(&best, &config.output_dir.join(&ckpt))?;
    let pred = predict(&best, &test.views())?;
    let records: Vec<PredictionRecord> = test_rows
        .iter()
        .zip(&pred.labels)
        .zip(pred.probabilities.rows())
        .map(|((&i, &label), p)| PredictionRecord {
            id: dataset.cascades()[i].id.clone(),
            label,
            p_unreliable: p[1],
        })
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(config.output_dir.join(&pred_path))?);
    write_predictions(&records, &mut f)?;
    f.flush()?;

    Ok(JobOutput {
        record: RunRecord {
            architecture: kind,
            seed,
            parameters,
            best_epoch: history.best_epoch,
            epochs_run: history.epochs_run,
            threads: 1,
            dev_score: history.dev_score[history.best_epoch - 1],
            test: evaluate(&test.labels, &pred.labels)?,
            checkpoint: ckpt,
            predictions: pred_path,
        },
        predictions: pred.labels,
    })
}

/// Runs the whole experiment. Every input is loaded and validated before
/// the first model is trained.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let dataset = load_corpus(&config.corpus)?;
    let text = load_text(&config.text, &dataset)?;
    for split in Split::ALL {
        if dataset.split_indices(split).is_empty() {
            return Err(Error::Validation(format!("corpus has no {split:?} cascades")));
        }
    }
    let dir = &config.output_dir;
    for sub in ["checkpoints", "predictions", "representations"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let reps = build_representations(config, &dataset, text)?;
    for &kind in &config.architectures {
        Architecture::with_shape(kind, reps.dims(), config.model.tokens, config.model.dense_projection).validate()?;
    }
    std::fs::write(
        dir.join("representations/vocabulary.json"),
        serde_json::to_string_pretty(&reps.vocab.to_json())? + "\n",
    )?;
    if let Some(m) = &reps.m2v {
        EmbeddingMatrix::new(dataset.ids(), m.clone())?.save(&dir.join("representations/m2v.cem1"))?;
    }

    let jobs: Vec<(ArchKind, u64)> = config
        .architectures
        .iter()
        .flat_map(|&k| config.seeds().into_iter().map(move |s| (k, s)))
        .collect();
    let outputs = jobs
        .par_iter()
        .map(|&(kind, seed)| train_one(config, &dataset, &reps, kind, seed))
        .collect::<Result<Vec<_>>>()?;

    let test_rows = dataset.split_indices(Split::Test);
    let gold: Vec<Label> = test_rows.iter().map(|&i| dataset.cascades()[i].label).collect();
    let stacked = |kind: ArchKind| -> (Vec<Label>, Vec<Label>) {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for o in outputs.iter().filter(|o| o.record.architecture == kind) {
            g.extend_from_slice(&gold);
            p.extend_from_slice(&o.predictions);
        }
        (g, p)
    };

    let mut significance = Vec::new();
    if config.architectures.contains(&config.baseline) {
        let (g, base) = stacked(config.baseline);
        for &kind in config.architectures.iter().filter(|&&k| k != config.baseline) {
            let (_, preds) = stacked(kind);
            significance.push(compare(
                kind.description(),
                config.baseline.description(),
                &g,
                &preds,
                &base,
                &config.bootstrap,
            )?);
        }
    }

    let mut rows = Vec::new();
    for &kind in &config.architectures {
        let runs: Vec<&RunRecord> = outputs.iter().map(|o| &o.record).filter(|r| r.architecture == kind).collect();
        let reports: Vec<EvalReport> = runs.iter().map(|r| r.test).collect();
        let mean_epochs = runs.iter().map(|r| r.epochs_run as f64).sum::<f64>() / runs.len() as f64;
        rows.push(TableRow {
            model: kind.description().to_string(),
            mean_epochs,
            aggregate: aggregate_runs(&reports)?,
            p_values: significance
                .iter()
                .find(|s| s.model == kind.description())
                .map(|s| s.p_values.clone())
                .unwrap_or_default(),
        });
    }
    let tables = format_tables(&rows);
    let report = ExperimentReport {
        rows,
        significance,
        runs: outputs.into_iter().map(|o| o.record).collect(),
    };
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(dir.join("tables.txt"), &tables)?;

    let (projection, figure) = if config.render_cluster {
        let p = project_cascades(&dataset, &config.cluster)?;
        let svg = dir.join("cluster.svg");
        p.save(&svg, &dir.join("cluster.json"))?;
        (Some(p), Some(svg))
    } else {
        (None, None)
    };

    let manifest = serde_json::json!({
        "config": config,
        "cascades": dataset.len(),
        "splits": Split::ALL.iter().map(|&s| (format!("{s:?}").to_lowercase(), dataset.split_indices(s).len())).collect::<std::collections::BTreeMap<_, _>>(),
        "representations": reps.info,
        "runs": report.runs.iter().map(|r| serde_json::json!({
            "architecture": r.architecture,
            "seed": r.seed,
            "threads": r.threads,
            "parameters": r.parameters,
            "best_epoch": r.best_epoch,
            "epochs_run": r.epochs_run,
            "checkpoint": r.checkpoint,
            "predictions": r.predictions,
        })).collect::<Vec<_>>(),
        "cluster": projection.as_ref().map(|p| serde_json::json!({
            "dropped_outliers": p.dropped_outliers,
            "lower_percentile": p.lower_percentile,
            "upper_percentile": p.upper_percentile,
            "silhouette": p.silhouette,
        })),
    });
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(RunArtifacts {
        dir: dir.clone(),
        manifest: manifest_path,
        checkpoints: report.runs.iter().map(|r| dir.join(&r.checkpoint)).collect(),
        report,
        figure,
        projection,
        tables,
    })
}
