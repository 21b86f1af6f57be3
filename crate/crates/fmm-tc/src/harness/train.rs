//! Supervised training loop and cross-validation driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::model::{bce_with_logits, named_grads, FmmModel, ParamBinding};
use crate::numerics::{AdamConfig, Graph, OptimizerState, Tensor};
use crate::preprocess::{prepare, ConnectivityMatrix, TokenSequence};

use super::cv::stratified_kfold;
use super::metrics::{compute_metrics, summarize, Metrics};

/// One subject after preprocessing, ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub label: u8,
    pub drug: String,
    pub tokens: TokenSequence,
    pub fc: ConnectivityMatrix,
}

/// Standardize, length-fit, patchify, and correlate every labeled subject.
pub fn prepare_cohort(
    cohort: &Cohort,
    fit_len: usize,
    patch: usize,
) -> Result<Vec<PreparedSubject>> {
    cohort.validate()?;
    let mut out = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        let label = s.label.ok_or_else(|| {
            Error::Data(format!("subject {} has no label", s.subject_id))
        })?;
        let (tokens, fc) = prepare(&s.series, fit_len, patch)?;
        out.push(PreparedSubject {
            id: s.subject_id.clone(),
            label,
            drug: s.drug.clone(),
            tokens,
            fc,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Early stopping: stop after this many epochs without improvement.
    pub patience: usize,
    pub adam: AdamConfig,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            patience: 10,
            adam: AdamConfig::default(),
            divergence_threshold: 1e4,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning budget calibrated for the desk-scale benchmark: short and
    /// hot, so a linear head over frozen features converges while the
    /// from-scratch encoders stay undertrained.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 3,
            patience: 3,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<TrainEpoch>,
    pub best_epoch: usize,
}

/// Class-token features for every subject under the current frozen encoder.
/// Avoids re-running the transformer on every batch.
fn cache_ts_features(
    model: &FmmModel<f32>,
    subjects: &[PreparedSubject],
) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut g: Graph<f32> = Graph::new();
    let binding = model.bind(&mut g);
    let mut cache = BTreeMap::new();
    for s in subjects {
        let r_t = crate::model::ts_forward(&mut g, &binding, &model.ts, &s.tokens)?;
        cache.insert(s.id.clone(), g.value(r_t).clone());
    }
    Ok(cache)
}

fn subject_output(
    model: &FmmModel<f32>,
    g: &mut Graph<f32>,
    binding: &ParamBinding,
    s: &PreparedSubject,
    ts_cache: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<crate::model::ModelOutput> {
    let r_t = if model.modality.uses_ts() {
        Some(match ts_cache {
            Some(cache) => {
                let cached = cache.get(&s.id).ok_or_else(|| {
                    Error::Graph(format!("no cached feature for {}", s.id))
                })?;
                g.constant(cached.clone())
            }
            None => crate::model::ts_forward(g, binding, &model.ts, &s.tokens)?,
        })
    } else {
        None
    };
    let r_c = if model.modality.uses_fc() {
        Some(crate::model::fc_forward(g, binding, &model.fc, &s.fc)?)
    } else {
        None
    };
    model.head(g, binding, r_t, r_c)
}

fn epoch_loss(
    model: &FmmModel<f32>,
    subjects: &[PreparedSubject],
    ts_cache: Option<&BTreeMap<String, Tensor<f32>>>,
) -> Result<f64> {
    let mut g: Graph<f32> = Graph::new();
    let binding = model.bind(&mut g);
    let mut logits = Vec::with_capacity(subjects.len());
    let mut labels = Vec::with_capacity(subjects.len());
    for s in subjects {
        let out = subject_output(model, &mut g, &binding, s, ts_cache)?;
        logits.push(out.logit);
        labels.push(s.label);
    }
    let loss = bce_with_logits(&mut g, &logits, &labels)?;
    Ok(f64::from(g.value(loss).data()[0]))
}

/// Train in place. Early stopping monitors the validation loss when a
/// validation set is given, otherwise the training loss; the best-epoch
/// weights are restored before returning.
pub fn train_model(
    model: &mut FmmModel<f32>,
    train: &[PreparedSubject],
    val: Option<&[PreparedSubject]>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    model.validate_config()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }

    let use_cache = model.ts_frozen && model.modality.uses_ts();
    let ts_cache = if use_cache {
        let mut all: Vec<PreparedSubject> = train.to_vec();
        if let Some(v) = val {
            all.extend(v.iter().cloned());
        }
        Some(cache_ts_features(model, &all)?)
    } else {
        None
    };
    let cache = ts_cache.as_ref();

    let mut opt = OptimizerState::new(cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 16));
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g: Graph<f32> = Graph::new();
            let binding = model.bind(&mut g);
            let mut logits = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let out = subject_output(model, &mut g, &binding, &train[idx], cache)?;
                logits.push(out.logit);
                labels.push(train[idx].label);
            }
            let loss = bce_with_logits(&mut g, &logits, &labels)?;
            let loss_value = f64::from(g.value(loss).data()[0]);
            if !loss_value.is_finite() || loss_value > cfg.divergence_threshold {
                return Err(Error::Divergence(format!(
                    "training loss {loss_value} at epoch {epoch}"
                )));
            }
            let grads = g.backward(loss)?;
            let grads = named_grads(&binding, &grads);
            opt.step(&mut model.params, &grads)?;
            total += loss_value;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(epoch_loss(model, v, cache)?),
            _ => None,
        };
        history.push(TrainEpoch {
            epoch,
            train_loss,
            val_loss,
        });

        let monitored = val_loss.unwrap_or(train_loss);
        if monitored < best_loss {
            best_loss = monitored;
            best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(TrainHistory {
        epochs: history,
        best_epoch,
    })
}

/// Predicted probabilities, one per subject, in input order.
pub fn predict(model: &FmmModel<f32>, subjects: &[PreparedSubject]) -> Result<Vec<f64>> {
    let mut g: Graph<f32> = Graph::new();
    let binding = model.bind(&mut g);
    let mut probs = Vec::with_capacity(subjects.len());
    for s in subjects {
        let out = subject_output(model, &mut g, &binding, s, None)?;
        let p = g.sigmoid(out.logit)?;
        probs.push(f64::from(g.value(p).data()[0]));
    }
    Ok(probs)
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
    pub metrics: Metrics,
    pub model: FmmModel<f32>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub mean: Metrics,
    pub std: Metrics,
}

/// Stratified k-fold cross-validation from a common starting model. Each
/// fold trains a fresh copy of `template` and evaluates on its held-out
/// subjects.
pub fn run_cv(
    template: &FmmModel<f32>,
    subjects: &[PreparedSubject],
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CvOutcome> {
    let labeled: Vec<(String, u8)> = subjects
        .iter()
        .map(|s| (s.id.clone(), s.label))
        .collect();
    let folds = stratified_kfold(&labeled, k, seed)?;

    let mut outcomes = Vec::with_capacity(k);
    for (f, test_ids) in folds.iter().enumerate() {
        let test: Vec<PreparedSubject> = subjects
            .iter()
            .filter(|s| test_ids.contains(&s.id))
            .cloned()
            .collect();
        let train: Vec<PreparedSubject> = subjects
            .iter()
            .filter(|s| !test_ids.contains(&s.id))
            .cloned()
            .collect();
        let mut model = template.clone();
        let history = train_model(&mut model, &train, None, cfg, seed ^ ((f as u64) << 8))?;
        let scores = predict(&model, &test)?;
        let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
        let metrics = compute_metrics(&scores, &labels)?;
        outcomes.push(FoldOutcome {
            fold: f,
            test_ids: test.iter().map(|s| s.id.clone()).collect(),
            labels,
            scores,
            metrics,
            model,
            history,
        });
    }
    let per_fold: Vec<Metrics> = outcomes.iter().map(|o| o.metrics).collect();
    let (mean, std) = summarize(&per_fold);
    Ok(CvOutcome {
        folds: outcomes,
        mean,
        std,
    })
}
