use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{predict, ClassifierModel};
use super::Parameters;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics};

/// Dev-set score that drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMetric {
    MacroF1,
    TargetF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub metric: StopMetric,
    pub seed: u64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            metric: StopMetric::MacroF1,
            seed: 1,
            runs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.runs == 0 {
            return Err(Error::Config(
                "training needs lr > 0 and positive patience, batch size, epoch limit and run count".into(),
            ));
        }
        Ok(())
    }
}

/// Row-aligned branch inputs and gold labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataView {
    pub inputs: Vec<Array2<f64>>,
    pub labels: Vec<Label>,
}

impl DataView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn views(&self) -> Vec<ArrayView2<'_, f64>> {
        self.inputs.iter().map(|a| a.view()).collect()
    }

    fn rows(&self, idx: &[usize]) -> (Vec<Array2<f64>>, Vec<Label>) {
        (
            self.inputs.iter().map(|a| a.select(Axis(0), idx)).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub dev_score: Vec<f64>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Patience-based stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`; returns true if it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, best)) if score <= best => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &impl Parameters, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update<P: Parameters>(&mut self, model: &mut P, grads: &P) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let grads = grads.tensors();
        for (((_, params), (_, _, g)), (m, v)) in model
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

pub fn dev_score(model: &ClassifierModel, dev: &DataView, metric: StopMetric) -> Result<f64> {
    let pred = predict(model, &dev.views())?;
    let report = metrics(&confusion(&dev.labels, &pred.labels)?);
    Ok(match metric {
        StopMetric::MacroF1 => report.macro_avg.f1,
        StopMetric::TargetF1 => report.unreliable.f1,
    })
}

/// Minimises mean cross-entropy with Adam, evaluating the dev score after
/// every epoch, and returns the best-scoring checkpoint.
pub fn train(
    mut model: ClassifierModel,
    train_view: &DataView,
    dev_view: &DataView,
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    config.validate()?;
    if train_view.is_empty() || dev_view.is_empty() {
        return Err(Error::Training("train and dev splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model, config);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        dev_score: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
    };
    let mut order: Vec<usize> = (0..train_view.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, idx) in order.chunks(config.batch_size).enumerate() {
            let (inputs, labels) = train_view.rows(idx);
            let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
            let (loss, grads) = model.loss_and_gradient(&views, &labels, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {loss} (lr {}, epoch {epoch}, batch {batch_index})",
                    config.lr
                )));
            }
            loss_sum += loss * idx.len() as f64;
            adam.update(&mut model, &grads);
        }
        let score = dev_score(&model, dev_view, config.metric)?;
        history.train_loss.push(loss_sum / train_view.len() as f64);
        history.dev_score.push(score);
        history.epochs_run = epoch;
        if stopper.observe(epoch, score) {
            best = model.clone();
            history.best_epoch = epoch;
        }
        log::debug!(
            "{} epoch {epoch}: loss {:.4} dev {score:.4}",
            model.arch.kind,
            history.train_loss[epoch - 1]
        );
        if stopper.should_stop() {
            break;
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchKind, Architecture, InputDims};
    use rand::Rng;

    #[test]
    fn early_stopping_trace() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_after = None;
        for (epoch, score) in [0.50, 0.60, 0.60, 0.59, 0.58].into_iter().enumerate() {
            s.observe(epoch + 1, score);
            if s.should_stop() {
                stopped_after = Some(epoch + 1);
                break;
            }
        }
        assert_eq!(stopped_after, Some(4));
        assert_eq!(s.best(), Some((2, 0.60)));
    }

    /// Linearly separable 2D points, zero-padded to width 8: layer norm over
    /// only two features collapses every token to ±(1, −1).
    fn separable(n: usize, seed: u64) -> DataView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 8));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = Label::from_index(i % 2);
            let sign = if label == Label::Unreliable { 1.0 } else { -1.0 };
            x[[i, 0]] = sign * rng.random_range(0.2..1.5);
            x[[i, 1]] = rng.random_range(-1.0..1.0);
            labels.push(label);
        }
        DataView { inputs: vec![x], labels }
    }

    #[test]
    fn learns_a_separable_problem() {
        let arch = Architecture::with_shape(ArchKind::SiText, InputDims { text: 8, sparse: 1, m2v: 1 }, 1, 1);
        let model = ClassifierModel::build(&arch, 3).unwrap();
        let (tr, dev) = (separable(400, 1), separable(100, 2));
        let config = TrainConfig {
            lr: 1e-2,
            max_epochs: 50,
            patience: 50,
            ..Default::default()
        };
        let (best, hist) = train(model, &tr, &dev, &config).unwrap();
        let pred = predict(&best, &tr.views()).unwrap();
        let acc = pred.labels.iter().zip(&tr.labels).filter(|(a, b)| a == b).count() as f64 / tr.len() as f64;
        assert!(acc >= 0.99, "train accuracy {acc}");
        assert!(hist.epochs_run <= 50);
        let max = hist.dev_score.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(hist.dev_score[hist.best_epoch - 1], max);
        assert_eq!(dev_score(&best, &dev, StopMetric::MacroF1).unwrap(), max);
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let arch = Architecture::with_shape(ArchKind::SiText, InputDims { text: 8, sparse: 1, m2v: 1 }, 1, 1);
        let model = ClassifierModel::build(&arch, 3).unwrap();
        let mut tr = separable(10, 1);
        tr.inputs[0][[3, 0]] = f64::NAN;
        let err = train(model, &tr, &separable(4, 2), &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("epoch 1") && m.contains("lr")), "{err}");
    }

    #[test]
    fn rejects_empty_views() {
        let arch = Architecture::with_shape(ArchKind::SiText, InputDims { text: 8, sparse: 1, m2v: 1 }, 1, 1);
        let model = ClassifierModel::build(&arch, 3).unwrap();
        let empty = DataView { inputs: vec![Array2::zeros((0, 8))], labels: vec![] };
        assert!(train(model, &empty, &separable(4, 2), &TrainConfig::default()).is_err());
    }
}
