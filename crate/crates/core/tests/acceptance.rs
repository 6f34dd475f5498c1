//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use cascadenet::cluster::{planted_low_rank, project_cascades, truncated_svd, ClusterConfig};
use cascadenet::corpus::{generate_synthetic, Label, SynthConfig};
use cascadenet::embeddings::EmbeddingMatrix;
use cascadenet::eval::{bootstrap_significance, evaluate, resample_indices, substream, BootstrapConfig, Metric};
use cascadenet::m2v::{build_mention_documents, cosine, train_doc2vec, D2VConfig};
use cascadenet::model::ArchKind;
use cascadenet::pipeline::{run_experiment, CorpusSource, ExperimentConfig, ModelShape, TextSource};
use cascadenet::retrofit::{fit_translation_matrix, retrofit_embeddings, NeighborMode, RetrofitConfig};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let start = Instant::now();
    let o = f();
    if !o.pass {
        *failures += 1;
    }
    println!(
        "{} {name}: {} ({:.1}s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

fn directional() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let config = ExperimentConfig {
        output_dir: tmp.path().to_path_buf(),
        corpus: CorpusSource::Synthetic {
            seed: 1,
            config: SynthConfig {
                n_cascades: 2000,
                n_communities: 20,
                homophily: 0.9,
                vocab_overlap: 0.8,
                ..SynthConfig::default()
            },
        },
        text: TextSource::RandomProjection { dim: 768, seed: 7 },
        vocab_threshold: 15,
        vocab_train_only: false,
        m2v: D2VConfig::default(),
        retrofit: RetrofitConfig::default(),
        translation_lambda: 1e-3,
        architectures: vec![ArchKind::SiText, ArchKind::MiSparse, ArchKind::MiM2v, ArchKind::MiRetro],
        baseline: ArchKind::SiText,
        model: ModelShape::default(),
        train: Default::default(),
        bootstrap: BootstrapConfig::default(),
        cluster: ClusterConfig::default(),
        render_cluster: false,
    };
    let art = match run_experiment(&config) {
        Ok(a) => a,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("pipeline error: {e}"),
            }
        }
    };
    let f1 = |k: ArchKind| art.report.row(k).expect("row").aggregate.get(Metric::MacroF1).mean;
    let text = f1(ArchKind::SiText);
    let m2v = f1(ArchKind::MiM2v);
    let sparse = f1(ArchKind::MiSparse);
    let retro = f1(ArchKind::MiRetro);
    let p = art
        .report
        .significance
        .iter()
        .find(|s| s.model == ArchKind::MiM2v.description())
        .and_then(|s| s.p_values.iter().find(|(m, _)| *m == Metric::MacroF1).map(|(_, p)| *p))
        .unwrap_or(1.0);
    println!("{}", art.tables);
    Outcome {
        pass: m2v - text >= 0.05 && sparse - text >= 0.02 && p <= 0.05,
        detail: format!(
            "macro-F1 SI-TEXT {:.2}, MI-SPARSE {:.2} (+{:.2}), MI-M2V {:.2} (+{:.2}, p={p:.4}), MI-RETRO {:.2} (reported only)",
            100.0 * text,
            100.0 * sparse,
            100.0 * (sparse - text),
            100.0 * m2v,
            100.0 * (m2v - text),
            100.0 * retro
        ),
    }
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut instances = 0;
    for kind in ArchKind::ALL {
        for seed in 0..20 {
            worst = worst.max(common::max_gradient_error(&common::random_instance(kind, seed)));
            instances += 1;
        }
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("{instances} instances, worst relative error {worst:.2e}"),
    }
}

fn emb(data: Array2<f64>) -> EmbeddingMatrix {
    let ids = (0..data.nrows()).map(|i| format!("r{i}")).collect();
    EmbeddingMatrix::new(ids, data).expect("ids match rows")
}

fn retrofit() -> Outcome {
    let x = emb(array![[1.0, 0.0], [0.0, 1.0]]);
    let converge = |mode| RetrofitConfig {
        iterations: 200,
        tolerance: 1e-12,
        neighbor_mode: mode,
        ..Default::default()
    };
    let mut fixed_err = 0.0f64;
    for mode in [NeighborMode::Centroid, NeighborMode::CliqueSample { m: 3 }] {
        let out = retrofit_embeddings(&x, &[0, 0], &converge(mode)).expect("retrofit");
        let want = array![[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]];
        fixed_err = fixed_err.max((&out.embeddings.data - &want).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rises = 0;
    for i in 0..100 {
        let n = rng.random_range(2..30);
        let d = rng.random_range(1..8);
        let data = Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0..3.0));
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mode = if i % 2 == 0 {
            NeighborMode::Centroid
        } else {
            NeighborMode::CliqueSample { m: rng.random_range(1..5) }
        };
        let cfg = RetrofitConfig {
            alpha: rng.random_range(0.1..3.0),
            beta: rng.random_range(0.0..3.0),
            iterations: 20,
            tolerance: 0.0,
            neighbor_mode: mode,
            seed: i,
        };
        let out = retrofit_embeddings(&emb(data), &labels, &cfg).expect("retrofit");
        if out.objective.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
            rises += 1;
        }
    }
    Outcome {
        pass: fixed_err <= 1e-6 && rises == 0,
        detail: format!("fixed-point error {fixed_err:.1e}; objective rose on {rises}/100 instances"),
    }
}

fn translation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::from_shape_simple_fn((50, 16), || rng.random_range(-1.0..1.0));
    let planted = Array2::from_shape_simple_fn((16, 16), || rng.random_range(-2.0..2.0));
    let m = fit_translation_matrix(&emb(x.clone()), &emb(x.dot(&planted)), 0.0).expect("full rank");
    let planted_err = (&m.matrix - &planted).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let eye = Array2::<f64>::eye(2);
    let id = fit_translation_matrix(&emb(eye.clone()), &emb(eye.clone()), 0.0).expect("identity");
    let id_err = (&id.matrix - &eye).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Outcome {
        pass: planted_err <= 1e-6 && id_err <= 1e-9,
        detail: format!("planted max-abs {planted_err:.1e}, identity max-abs {id_err:.1e}"),
    }
}

fn brute_force_f1(gold: &[Label], pred: &[Label], class: Label) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (g, p) in gold.iter().zip(pred) {
        match (*g == class, *p == class) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

fn metrics_oracle() -> Outcome {
    use Label::{Reliable as R, Unreliable as U};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..80);
        let gold: Vec<Label> = (0..n).map(|_| Label::from_index(rng.random_range(0..2))).collect();
        let pred: Vec<Label> = (0..n).map(|_| Label::from_index(rng.random_range(0..2))).collect();
        let r = evaluate(&gold, &pred).expect("non-empty");
        let fr = brute_force_f1(&gold, &pred, R);
        let fu = brute_force_f1(&gold, &pred, U);
        let acc = gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / n as f64;
        if (r.reliable.f1 - fr).abs() > 1e-12
            || (r.unreliable.f1 - fu).abs() > 1e-12
            || (r.macro_avg.f1 - (fr + fu) / 2.0).abs() > 1e-12
            || (r.accuracy - acc).abs() > 1e-12
        {
            mismatches += 1;
        }
    }
    let hand = evaluate(&[R, R, U, U], &[R, U, U, U]).expect("non-empty");
    let hand_ok = (hand.macro_avg.f1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-15 && hand.accuracy == 0.75;
    Outcome {
        pass: mismatches == 0 && hand_ok,
        detail: format!("{mismatches}/1000 mismatches; hand example macro-F1 {:.4}", hand.macro_avg.f1),
    }
}

fn bootstrap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gold: Vec<Label> = (0..200).map(|_| Label::from_index(rng.random_range(0..2))).collect();
    let noisy: Vec<Label> = gold.iter().map(|&l| if rng.random_bool(0.3) { l.opposite() } else { l }).collect();
    let wrong: Vec<Label> = gold.iter().map(|l| l.opposite()).collect();
    let cfg = BootstrapConfig::default();
    let same = bootstrap_significance(&gold, &noisy, &noisy, Metric::MacroF1, &cfg).expect("bootstrap").p_value;
    let dominant = bootstrap_significance(&gold, &gold, &wrong, Metric::MacroF1, &cfg).expect("bootstrap").p_value;
    let streams_equal = (0..cfg.resamples).all(|b| {
        resample_indices(&mut substream(cfg.seed, b), 200, 60, true)
            == resample_indices(&mut substream(cfg.seed, b), 200, 60, true)
    });
    let rerun = bootstrap_significance(&gold, &noisy, &wrong, Metric::MacroF1, &cfg).expect("bootstrap");
    let again = bootstrap_significance(&gold, &noisy, &wrong, Metric::MacroF1, &cfg).expect("bootstrap");
    let expected = 1.0 / (cfg.resamples as f64 + 1.0);
    Outcome {
        pass: same == 1.0 && dominant == expected && streams_equal && rerun.deltas == again.deltas,
        detail: format!("p(A,A) = {same}, p(dominant) = {dominant:.6} (1/(B+1) = {expected:.6}), streams identical: {streams_equal}"),
    }
}

fn doc2vec() -> Outcome {
    let ds = generate_synthetic(&SynthConfig::default(), 1).expect("synthetic corpus");
    let docs = build_mention_documents(&ds);
    let model = match train_doc2vec(&docs, &D2VConfig::default()) {
        Ok(m) => m,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: e.to_string(),
            }
        }
    };
    let decreasing = model.epoch_losses.windows(2).take_while(|w| w[1] < w[0]).count();
    let label: HashMap<&str, Label> = ds.cascades().iter().map(|c| (c.id.as_str(), c.label)).collect();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
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
    let (within, across) = (within / nw as f64, across / na as f64);
    Outcome {
        pass: decreasing >= 5 && within > across,
        detail: format!(
            "loss strictly decreasing for {decreasing} consecutive epochs ({:.3} -> {:.3}); mean cosine within {within:.3} vs across {across:.3}",
            model.epoch_losses[0],
            model.epoch_losses[model.epoch_losses.len() - 1]
        ),
    }
}

fn svd_cluster() -> Outcome {
    let mut worst = 0.0f64;
    for (rows, cols, seed) in [(40, 30, 1), (120, 60, 2), (600, 50, 3)] {
        let m = planted_low_rank(rows, cols, &[5.0, 3.0], seed);
        worst = worst.max(truncated_svd(&m, 2, seed).expect("rank 2").residual);
    }
    let ds = generate_synthetic(&SynthConfig::default(), 2).expect("synthetic corpus");
    let projection = project_cascades(&ds, &ClusterConfig::default()).expect("projection");
    let s = projection.silhouette.unwrap_or(f64::NAN);
    Outcome {
        pass: worst <= 1e-6 && s > 0.0,
        detail: format!(
            "planted rank-2 residual {worst:.1e}; test-split silhouette {s:.3} ({} outliers dropped)",
            projection.dropped_outliers
        ),
    }
}

fn main() {
    let mut failures = 0;
    check("metrics oracle", metrics_oracle, &mut failures);
    check("bootstrap", bootstrap, &mut failures);
    check("retrofit fixed point and objective", retrofit, &mut failures);
    check("translation recovery", translation, &mut failures);
    check("gradient suite", gradients, &mut failures);
    check("doc2vec", doc2vec, &mut failures);
    check("svd and cluster separation", svd_cluster, &mut failures);
    check("directional reproduction", directional, &mut failures);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
