//! Run configuration: canonical JSON on disk, defaults for every field, and
//! the `resolved_config.json` echo that makes a run reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::GeneratorProfile;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::model::{FcEncoderConfig, FusionKind, Modality, TsEncoderConfig};
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunPaths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

/// Evaluation protocol: pooled over both drug arms, or conditioned on them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    DrugAgnostic,
    DrugSpecific { train_drug: String, test_drug: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSpec {
    pub modality: Modality,
    pub pretrained: bool,
    pub fusion: FusionKind,
    pub protocol: Protocol,
    pub folds: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            modality: Modality::Both,
            pretrained: false,
            fusion: FusionKind::Concat,
            protocol: Protocol::DrugAgnostic,
            folds: 5,
            train: TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub paths: RunPaths,
    pub profile: GeneratorProfile,
    pub ts: TsEncoderConfig,
    pub fc: FcEncoderConfig,
    pub experiment: ExperimentSpec,
    pub pretrain: PretrainConfig,
    /// Unlabeled corpus size for pretraining.
    pub pretrain_subjects: usize,
    /// Single global seed; every stream of randomness is derived from it.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let profile = GeneratorProfile::openneuro_like();
        RunConfig {
            paths: RunPaths::default(),
            ts: TsEncoderConfig::desk(profile.n_rois),
            fc: FcEncoderConfig::desk(),
            profile,
            experiment: ExperimentSpec::default(),
            pretrain: PretrainConfig::desk(),
            pretrain_subjects: 64,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.ts.validate()?;
        self.fc.validate()?;
        if self.experiment.folds < 2 {
            return Err(Error::Config(format!(
                "experiment.folds must be >= 2, got {}",
                self.experiment.folds
            )));
        }
        if self.experiment.train.epochs == 0 || self.experiment.train.batch_size == 0 {
            return Err(Error::Config(
                "experiment.train epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.experiment.modality == Modality::Both && self.ts.model_dim != self.fc.output_dim {
            return Err(Error::Config(format!(
                "ts.model_dim {} must equal fc.output_dim {} for the multimodal head",
                self.ts.model_dim, self.fc.output_dim
            )));
        }
        if let Protocol::DrugSpecific { train_drug, test_drug } = &self.experiment.protocol {
            for (field, drug) in [("train_drug", train_drug), ("test_drug", test_drug)] {
                if !self.profile.drug_effects.contains_key(drug) {
                    return Err(Error::Config(format!(
                        "experiment.protocol.{field} `{drug}` is not a drug in the profile"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializes with sorted keys (serde_json maps are ordered) so that equal
/// configs always produce byte-identical files.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    serde_json::to_string_pretty(&v).map_err(|e| Error::Config(format!("encoding failed: {e}")))
}

pub fn write_canonical_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = canonical_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Object paths inside the config whose keys are data, not field names.
const OPEN_MAPS: &[&str] = &["profile.drug_effects"];

fn merge_into(base: &mut Value, user: &Value, path: &str, warnings: &mut Vec<String>) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            let open = OPEN_MAPS.contains(&path);
            for (key, uval) in u {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match b.get_mut(key) {
                    Some(bval) if !open => merge_into(bval, uval, &child, warnings),
                    _ => {
                        if !open {
                            warnings.push(format!("unknown config key `{child}`"));
                        }
                        b.insert(key.clone(), uval.clone());
                    }
                }
            }
        }
        (slot, user) => *slot = user.clone(),
    }
}

/// Parses a config file, fills missing keys from defaults, and returns the
/// resolved config together with unknown-key warnings.
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let user: Value = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{}: malformed JSON at line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    if !user.is_object() {
        return Err(Error::Config(format!(
            "{}: top level must be a JSON object",
            path.display()
        )));
    }
    let mut merged = serde_json::to_value(RunConfig::default())
        .map_err(|e| Error::Config(format!("default config serialization failed: {e}")))?;
    let mut warnings = Vec::new();
    merge_into(&mut merged, &user, "", &mut warnings);
    let config: RunConfig = serde_json::from_value(merged)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok((config, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_resolves_to_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, "{}").unwrap();
        let (cfg, warnings) = load_config(&p).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(warnings.is_empty());
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"seed": 11, "experiment": {"folds": 3}}"#).unwrap();
        let (cfg, warnings) = load_config(&p).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.experiment.folds, 3);
        assert_eq!(cfg.experiment.train, TrainConfig::desk());
        assert!(warnings.is_empty());
    }

    #[test]
    fn unknown_keys_warn_but_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"sead": 11, "experiment": {"foldz": 3}}"#).unwrap();
        let (cfg, warnings) = load_config(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(warnings.len(), 2);
        assert!(warnings.iter().any(|w| w.contains("sead")));
        assert!(warnings.iter().any(|w| w.contains("experiment.foldz")));
    }

    #[test]
    fn invalid_folds_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"experiment": {"folds": 1}}"#).unwrap();
        let err = load_config(&p).unwrap_err();
        assert!(err.to_string().contains("folds"));
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, "{\n  \"seed\": ,\n}").unwrap();
        let err = load_config(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn resolved_config_round_trips_to_fixpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"seed": 3, "experiment": {"modality": "fc"}}"#).unwrap();
        let (cfg, _) = load_config(&p).unwrap();
        let resolved = dir.path().join("resolved_config.json");
        write_canonical_json(&resolved, &cfg).unwrap();
        let (again, warnings) = load_config(&resolved).unwrap();
        assert_eq!(cfg, again);
        assert!(warnings.is_empty());
        // byte-identical re-emission
        let first = fs::read(&resolved).unwrap();
        write_canonical_json(&resolved, &again).unwrap();
        assert_eq!(first, fs::read(&resolved).unwrap());
    }

    #[test]
    fn drug_specific_protocol_names_unknown_drug() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(
            &p,
            r#"{"experiment": {"protocol": {"kind": "drug_specific",
                "train_drug": "aspirin", "test_drug": "placebo"}}}"#,
        )
        .unwrap();
        let err = load_config(&p).unwrap_err();
        assert!(err.to_string().contains("aspirin"));
    }
}
