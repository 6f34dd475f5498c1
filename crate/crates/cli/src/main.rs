//! Command-line front end. Each subcommand runs one pipeline stage; `run`
//! executes the whole experiment from a config file or a previous
//! manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use cascadenet::cluster::{project_cascades, ClusterConfig};
use cascadenet::corpus::{generate_synthetic, parse_corpus, random_projection_embeddings, Dataset, Label, Split, SynthConfig};
use cascadenet::embeddings::EmbeddingMatrix;
use cascadenet::eval::{evaluate, BootstrapConfig};
use cascadenet::m2v::{build_mention_documents, train_doc2vec, D2VConfig};
use cascadenet::model::ArchKind;
use cascadenet::netrep::{write_sparse_jsonl, UserVocabulary};
use cascadenet::pipeline::{
    align_predictions, build_representations, compare, load_corpus, load_text, read_predictions, retrofit_text,
    run_experiment, train_one, ExperimentConfig,
};
use cascadenet::retrofit::RetrofitConfig;
use cascadenet::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "cascadenet", version, about = "Reliability classification of tweet cascades")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus and write it back in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus, optionally with projected text embeddings.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// TOML file with generator settings.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write random-projection text embeddings (CEM1) here.
        #[arg(long)]
        text_out: Option<PathBuf>,
        #[arg(long, default_value_t = 768)]
        text_dim: usize,
        #[arg(long, default_value_t = 7)]
        text_seed: u64,
    },
    /// Build the user vocabulary.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 15)]
        threshold: u32,
        /// Count users in the training split only.
        #[arg(long)]
        train_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write sparse user-presence vectors, one JSON line per cascade.
    Vectorize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train mention-document vectors and write them in corpus order.
    M2vTrain {
        #[arg(long)]
        corpus: PathBuf,
        /// TOML file with doc2vec settings.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrofit text embeddings toward label classes and translate all rows.
    Retrofit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        text: PathBuf,
        /// TOML file with retrofit settings.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture at one seed from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        arch: ArchKind,
        #[arg(long)]
        seed: u64,
    },
    /// Score a prediction file against the corpus labels.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Paired bootstrap of a model's predictions against a baseline's.
    Significance {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[command(flatten)]
        bootstrap: BootstrapArgs,
    },
    /// Project cascades onto the top two singular directions of user space.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        /// Project every split instead of the test split.
        #[arg(long)]
        all_splits: bool,
        #[arg(long, default_value_t = 1.0)]
        lower: f64,
        #[arg(long, default_value_t = 99.0)]
        upper: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        svg: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the full experiment.
    Run {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Rerun from the config recorded in a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Override the output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.3)]
    fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Draw resamples without replacement.
    #[arg(long)]
    without_replacement: bool,
}

fn params<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn corpus(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Config(format!("corpus file {} does not exist", path.display())));
    }
    parse_corpus(path)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn summary(dataset: &Dataset) -> serde_json::Value {
    serde_json::json!({
        "cascades": dataset.len(),
        "reliable": dataset.label_count(Label::Reliable),
        "unreliable": dataset.label_count(Label::Unreliable),
        "splits": Split::ALL
            .iter()
            .map(|&s| (format!("{s:?}").to_lowercase(), dataset.split_indices(s).len()))
            .collect::<std::collections::BTreeMap<_, _>>(),
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, out } => {
            let dataset = corpus(&input)?;
            if let Some(out) = out {
                let mut f = create(&out)?;
                dataset.write_jsonl(&mut f)?;
                f.flush()?;
            }
            print_json(&summary(&dataset))
        }
        Command::Synth {
            seed,
            params: p,
            out,
            text_out,
            text_dim,
            text_seed,
        } => {
            let cfg: SynthConfig = params(p.as_deref())?;
            let dataset = generate_synthetic(&cfg, seed)?;
            let mut f = create(&out)?;
            dataset.write_jsonl(&mut f)?;
            f.flush()?;
            if let Some(path) = text_out {
                if text_dim == 0 {
                    return Err(Error::Config("text dim must be positive".into()));
                }
                random_projection_embeddings(&dataset, text_dim, text_seed).save(&path)?;
            }
            print_json(&summary(&dataset))
        }
        Command::Vocab {
            corpus: c,
            threshold,
            train_only,
            out,
        } => {
            if threshold == 0 {
                return Err(Error::Config("threshold must be at least 1".into()));
            }
            let dataset = corpus(&c)?;
            let splits: &[Split] = if train_only { &[Split::Train] } else { &Split::ALL };
            let vocab = UserVocabulary::build(&dataset, threshold, splits)?;
            let mut f = create(&out)?;
            serde_json::to_writer_pretty(&mut f, &vocab.to_json())?;
            writeln!(f)?;
            f.flush()?;
            print_json(&serde_json::json!({ "users": vocab.dim(), "threshold": threshold }))
        }
        Command::Vectorize { corpus: c, vocab, out } => {
            let dataset = corpus(&c)?;
            let text = std::fs::read_to_string(&vocab)?;
            let vocab = UserVocabulary::from_json(&serde_json::from_str(&text)?, 0)?;
            let mut f = create(&out)?;
            write_sparse_jsonl(&dataset, &vocab, &mut f)?;
            f.flush()?;
            Ok(())
        }
        Command::M2vTrain { corpus: c, params: p, out } => {
            let cfg: D2VConfig = params(p.as_deref())?;
            cfg.validate()?;
            let dataset = corpus(&c)?;
            let model = train_doc2vec(&build_mention_documents(&dataset), &cfg)?;
            model.corpus_embeddings(&dataset)?.save(&out)?;
            print_json(&serde_json::json!({ "vocabulary": model.vocab.len(), "epoch_losses": model.epoch_losses }))
        }
        Command::Retrofit {
            corpus: c,
            text,
            params: p,
            lambda,
            out,
        } => {
            let cfg: RetrofitConfig = params(p.as_deref())?;
            cfg.validate()?;
            if !(lambda >= 0.0) {
                return Err(Error::Config("lambda must be >= 0".into()));
            }
            let dataset = corpus(&c)?;
            if !text.exists() {
                return Err(Error::Config(format!("embedding file {} does not exist", text.display())));
            }
            let r = retrofit_text(&dataset, &EmbeddingMatrix::load(&text)?, &cfg, lambda)?;
            r.embeddings.save(&out)?;
            print_json(&serde_json::json!({
                "sweeps": r.sweeps,
                "objective": r.objective,
                "translation_residual": r.translation_residual,
            }))
        }
        Command::Train { config, arch, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.architectures = vec![arch];
            cfg.validate()?;
            let dataset = load_corpus(&cfg.corpus)?;
            let text = load_text(&cfg.text, &dataset)?;
            for sub in ["checkpoints", "predictions"] {
                std::fs::create_dir_all(cfg.output_dir.join(sub))?;
            }
            let reps = build_representations(&cfg, &dataset, text)?;
            let out = train_one(&cfg, &dataset, &reps, arch, seed)?;
            print_json(&out.record)
        }
        Command::Eval { corpus: c, predictions } => {
            let dataset = corpus(&c)?;
            let (gold, pred) = align_predictions(&dataset, &read_predictions(&predictions)?)?;
            print_json(&evaluate(&gold, &pred)?)
        }
        Command::Significance {
            corpus: c,
            model,
            baseline,
            bootstrap,
        } => {
            let cfg = BootstrapConfig {
                resamples: bootstrap.resamples,
                fraction: bootstrap.fraction,
                seed: bootstrap.seed,
                with_replacement: !bootstrap.without_replacement,
            };
            if cfg.resamples == 0 || !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
                return Err(Error::Config("bootstrap needs resamples > 0 and fraction in (0, 1]".into()));
            }
            let dataset = corpus(&c)?;
            let a = read_predictions(&model)?;
            let mut b = read_predictions(&baseline)?;
            let (gold, pa) = align_predictions(&dataset, &a)?;
            align_predictions(&dataset, &b)?;
            let index: std::collections::HashMap<&str, usize> =
                a.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
            if b.len() != a.len() || b.iter().any(|r| !index.contains_key(r.id.as_str())) {
                return Err(Error::Alignment("model and baseline predict different cascades".into()));
            }
            b.sort_by_key(|r| index[r.id.as_str()]);
            let pb: Vec<Label> = b.iter().map(|r| r.label).collect();
            let name = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            print_json(&compare(&name(&model), &name(&baseline), &gold, &pa, &pb, &cfg)?)
        }
        Command::Cluster {
            corpus: c,
            all_splits,
            lower,
            upper,
            seed,
            svg,
            json,
        } => {
            let dataset = corpus(&c)?;
            let cfg = ClusterConfig {
                test_only: !all_splits,
                lower_percentile: lower,
                upper_percentile: upper,
                seed,
            };
            let p = project_cascades(&dataset, &cfg)?;
            let json = json.unwrap_or_else(|| svg.with_extension("json"));
            p.save(&svg, &json)?;
            print_json(&serde_json::json!({
                "points": p.points.len(),
                "dropped_outliers": p.dropped_outliers,
                "silhouette": p.silhouette,
            }))
        }
        Command::Run {
            config,
            manifest,
            output_dir,
        } => {
            let mut cfg = match (config, manifest) {
                (Some(c), _) => ExperimentConfig::load(&c)?,
                (None, Some(m)) => ExperimentConfig::from_manifest(&m)?,
                (None, None) => return Err(Error::Config("need --config or --manifest".into())),
            };
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let art = run_experiment(&cfg)?;
            print!("{}", art.tables);
            log::info!("manifest written to {}", art.manifest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}
