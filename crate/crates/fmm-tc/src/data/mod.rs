//! Synthetic rs-fMRI cohorts: class-conditional covariance templates with an
//! AR(1) temporal filter, plus on-disk cohort persistence.

pub mod generator;
pub mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RoiTimeSeries;

pub use generator::{generate_pretrain_corpus, generate_synthetic_cohort, pretrain_anchors};
pub use io::{load_cohort, save_cohort};

/// One participant.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub series: RoiTimeSeries,
    /// 1 = responder, 0 = non-responder. Absent for pretraining corpora.
    pub label: Option<u8>,
    pub drug: String,
    pub cohort: String,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Data(format!(
                    "subject {}: label {l} outside {{0,1}}",
                    self.subject_id
                )));
            }
        }
        if self.series.n_rois() < 2 || self.series.n_timepoints() < 2 {
            return Err(Error::Data(format!(
                "subject {}: series must be at least 2 x 2",
                self.subject_id
            )));
        }
        Ok(())
    }
}

/// Rank-1 covariance perturbation applied for a given drug: a unit direction
/// drawn from `direction_seed`, scaled by `scale`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DrugEffect {
    pub direction_seed: u64,
    pub scale: f64,
}

/// One (label, drug) cell of the cohort layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CohortCell {
    pub label: u8,
    pub drug: String,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorProfile {
    pub name: String,
    pub n_rois: usize,
    pub n_timepoints: usize,
    /// Class covariance template for non-responders (y = 0), row-major N x N.
    pub sigma0: Vec<f64>,
    /// Class covariance template for responders (y = 1).
    pub sigma1: Vec<f64>,
    /// AR(1) coefficient in [0, 1).
    pub ar_coefficient: f64,
    /// Optional per-class AR override (y = 0, y = 1); gives the time-series
    /// stream a temporal cue that is invisible in lag-0 correlation.
    pub class_ar: Option<(f64, f64)>,
    /// Observation noise standard deviation.
    pub noise_std: f64,
    /// Per-subject spread of connectivity strength: off-diagonal covariance
    /// is scaled by a subject factor drawn as 1 + jitter * z. Zero disables.
    pub cov_strength_jitter: f64,
    /// Per-subject spread added to the class AR coefficient.
    pub ar_jitter: f64,
    pub drug_effects: BTreeMap<String, DrugEffect>,
    pub cohort: Vec<CohortCell>,
}

impl GeneratorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.n_rois < 2 || self.n_timepoints < 2 {
            return Err(Error::Data("profile needs N >= 2 and t >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coefficient) {
            return Err(Error::Data(format!(
                "ar_coefficient {} outside [0, 1)",
                self.ar_coefficient
            )));
        }
        if let Some((a0, a1)) = self.class_ar {
            if !(0.0..1.0).contains(&a0) || !(0.0..1.0).contains(&a1) {
                return Err(Error::Data("class_ar coefficients outside [0, 1)".into()));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::Data("noise_std must be >= 0".into()));
        }
        if self.cov_strength_jitter < 0.0 || self.ar_jitter < 0.0 {
            return Err(Error::Data("jitter parameters must be >= 0".into()));
        }
        for cell in &self.cohort {
            if cell.count < 1 {
                return Err(Error::Data(format!(
                    "cohort cell (y={}, {}) has count {}",
                    cell.label, cell.drug, cell.count
                )));
            }
            if cell.label > 1 {
                return Err(Error::Data("cohort cell label outside {0,1}".into()));
            }
        }
        for (name, sigma) in [("sigma0", &self.sigma0), ("sigma1", &self.sigma1)] {
            check_spd(sigma, self.n_rois, name)?;
        }
        Ok(())
    }

    pub fn total_subjects(&self) -> usize {
        self.cohort.iter().map(|c| c.count).sum()
    }

    /// Desk-scale profile mirroring the 56-subject open cohort:
    /// 26 responders / 30 non-responders, drug subsets of 19 and 37.
    pub fn openneuro_like() -> Self {
        Self::openneuro_like_sized(32, 100)
    }

    /// Higher-fidelity variant with 424 ROIs; too slow for test suites.
    pub fn fidelity() -> Self {
        Self::openneuro_like_sized(424, 200)
    }

    fn openneuro_like_sized(n_rois: usize, n_timepoints: usize) -> Self {
        let mut drug_effects = BTreeMap::new();
        drug_effects.insert(
            "duloxetine".to_string(),
            DrugEffect {
                direction_seed: 101,
                scale: 0.20,
            },
        );
        drug_effects.insert(
            "placebo".to_string(),
            DrugEffect {
                direction_seed: 202,
                scale: 0.20,
            },
        );
        GeneratorProfile {
            name: "openneuro-like".to_string(),
            n_rois,
            n_timepoints,
            // same community layout for both classes; the class signal is
            // connectivity strength (weaker in non-responders) plus temporal
            // smoothness, both overlapping across subjects via the jitters
            sigma0: block_covariance(n_rois, 4, 0.45),
            sigma1: block_covariance(n_rois, 4, 0.65),
            ar_coefficient: 0.5,
            class_ar: Some((0.7, 0.5)),
            noise_std: 0.5,
            cov_strength_jitter: 0.2,
            ar_jitter: 0.08,
            drug_effects,
            cohort: vec![
                CohortCell {
                    label: 1,
                    drug: "duloxetine".to_string(),
                    count: 9,
                },
                CohortCell {
                    label: 0,
                    drug: "duloxetine".to_string(),
                    count: 10,
                },
                CohortCell {
                    label: 1,
                    drug: "placebo".to_string(),
                    count: 17,
                },
                CohortCell {
                    label: 0,
                    drug: "placebo".to_string(),
                    count: 20,
                },
            ],
        }
    }

    /// Canonical fingerprint over the profile and seed; changes iff any
    /// generating parameter changes.
    pub fn fingerprint(&self, seed: u64) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let value = serde_json::to_value(self).expect("profile serializes");
        hasher.update(serde_json::to_string(&value).expect("canonical json"));
        hasher.update(seed.to_le_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Block community covariance: `communities` contiguous groups with
/// within-group correlation `rho`, unit diagonal, zero across groups.
pub fn block_covariance(n: usize, communities: usize, rho: f64) -> Vec<f64> {
    let mut sigma = vec![0.0; n * n];
    let size = n.div_ceil(communities);
    for i in 0..n {
        for j in 0..n {
            sigma[i * n + j] = if i == j {
                1.0
            } else if i / size == j / size {
                rho
            } else {
                0.0
            };
        }
    }
    sigma
}

fn check_spd(sigma: &[f64], n: usize, name: &str) -> Result<()> {
    if sigma.len() != n * n {
        return Err(Error::Data(format!("{name}: expected {n}x{n} matrix")));
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, sigma);
    if (&m - m.transpose()).abs().max() > 1e-9 {
        return Err(Error::Data(format!("{name}: not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        let eig = m.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::Data(format!(
            "{name}: not positive definite (smallest eigenvalue {min:.6e})"
        )));
    }
    Ok(())
}

/// A generated or loaded participant set.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub fingerprint: String,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            s.validate()?;
            if !seen.insert(&s.subject_id) {
                return Err(Error::Data(format!("duplicate subject id {}", s.subject_id)));
            }
        }
        Ok(())
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let pos = self.subjects.iter().filter(|s| s.label == Some(1)).count();
        let neg = self.subjects.iter().filter(|s| s.label == Some(0)).count();
        (pos, neg)
    }

    /// Subjects restricted to one drug tag.
    pub fn drug_subset(&self, drug: &str) -> Cohort {
        Cohort {
            subjects: self
                .subjects
                .iter()
                .filter(|s| s.drug == drug)
                .cloned()
                .collect(),
            fingerprint: format!("{}:{drug}", self.fingerprint),
        }
    }
}
