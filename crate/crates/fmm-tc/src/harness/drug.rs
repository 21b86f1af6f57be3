//! Drug-arm evaluation protocols: within-arm cross-validation and
//! out-of-domain transfer between arms.

use crate::error::{Error, Result};
use crate::model::FmmModel;

use super::metrics::{compute_metrics, summarize, Metrics};
use super::train::{predict, run_cv, train_model, PreparedSubject, TrainConfig};

#[derive(Debug, Clone)]
pub struct DrugProtocolOutcome {
    /// One entry per repetition seed.
    pub runs: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

fn arm(subjects: &[PreparedSubject], drug: &str) -> Result<Vec<PreparedSubject>> {
    let subset: Vec<PreparedSubject> = subjects
        .iter()
        .filter(|s| s.drug == drug)
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(Error::InvalidArgument(format!("no subjects in drug arm `{drug}`")));
    }
    let pos = subset.iter().filter(|s| s.label == 1).count();
    if pos == 0 || pos == subset.len() {
        return Err(Error::Data(format!(
            "drug arm `{drug}` contains a single class"
        )));
    }
    Ok(subset)
}

/// Cross-validate inside one drug arm, repeated over the given seeds.
pub fn drug_within(
    template: &FmmModel<f32>,
    subjects: &[PreparedSubject],
    drug: &str,
    k: usize,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<DrugProtocolOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let subset = arm(subjects, drug)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = run_cv(template, &subset, k, cfg, seed)?;
        runs.push(outcome.mean);
    }
    let (mean, std) = summarize(&runs);
    Ok(DrugProtocolOutcome { runs, mean, std })
}

/// Train on the whole source arm, evaluate once on the target arm, repeated
/// over the given seeds.
pub fn drug_cross(
    template: &FmmModel<f32>,
    subjects: &[PreparedSubject],
    source: &str,
    target: &str,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<DrugProtocolOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    if source == target {
        return Err(Error::InvalidArgument(
            "source and target arms must differ".into(),
        ));
    }
    let train_set = arm(subjects, source)?;
    let test_set = arm(subjects, target)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut model = template.clone();
        train_model(&mut model, &train_set, None, cfg, seed)?;
        let scores = predict(&model, &test_set)?;
        let labels: Vec<u8> = test_set.iter().map(|s| s.label).collect();
        runs.push(compute_metrics(&scores, &labels)?);
    }
    let (mean, std) = summarize(&runs);
    Ok(DrugProtocolOutcome { runs, mean, std })
}
