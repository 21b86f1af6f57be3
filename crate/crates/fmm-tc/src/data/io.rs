//! Cohort directory layout:
//! `manifest.json` (ids, labels, drugs, shapes, dtype, per-file CRC32) plus
//! one `<subject_id>.bin` per subject: magic "FMTS", version u32 LE, N and t
//! as u32 LE, then N*t little-endian f32 values row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::preprocess::RoiTimeSeries;

use super::{Cohort, SubjectRecord};

const MAGIC: &[u8; 4] = b"FMTS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    subject_id: String,
    label: Option<u8>,
    drug: String,
    cohort: String,
    n_rois: u32,
    n_timepoints: u32,
    dtype: String,
    file: String,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    fingerprint: String,
    subjects: Vec<ManifestSubject>,
}

fn encode_subject(s: &SubjectRecord) -> Vec<u8> {
    let n = s.series.n_rois() as u32;
    let t = s.series.n_timepoints() as u32;
    let mut bytes = Vec::with_capacity(16 + s.series.data().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&t.to_le_bytes());
    for &v in s.series.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    cohort.validate()?;
    fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(cohort.subjects.len());
    for s in &cohort.subjects {
        let bytes = encode_subject(s);
        let file = format!("{}.bin", s.subject_id);
        fs::write(dir.join(&file), &bytes)?;
        subjects.push(ManifestSubject {
            subject_id: s.subject_id.clone(),
            label: s.label,
            drug: s.drug.clone(),
            cohort: s.cohort.clone(),
            n_rois: s.series.n_rois() as u32,
            n_timepoints: s.series.n_timepoints() as u32,
            dtype: "f32".to_string(),
            file,
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        format: "fmm-tc-cohort".to_string(),
        version: VERSION,
        fingerprint: cohort.fingerprint.clone(),
        subjects,
    };
    // canonical json: sorted keys via Value
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&value).expect("manifest renders"),
    )?;
    Ok(())
}

fn known_keys_warning(value: &Value) {
    let known = [
        "format",
        "version",
        "fingerprint",
        "subjects",
    ];
    if let Value::Object(map) = value {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                eprintln!("warning: manifest.json has unknown key `{key}`, ignoring");
            }
        }
    }
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Format(format!("missing manifest {}: {e}", manifest_path.display()))
    })?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    known_keys_warning(&value);
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Format(format!(
            "manifest version {} unsupported (expected {VERSION})",
            manifest.version
        )));
    }
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for ms in &manifest.subjects {
        let path = dir.join(&ms.file);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Format(format!("missing payload {}: {e}", ms.file)))?;
        if crc32fast::hash(&bytes) != ms.crc32 {
            return Err(Error::Format(format!("checksum mismatch in {}", ms.file)));
        }
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("{}: bad magic", ms.file)));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("{}: version {version}", ms.file)));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let t = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        if n != ms.n_rois || t != ms.n_timepoints {
            return Err(Error::Format(format!(
                "{}: payload shape {n}x{t} does not match manifest {}x{}",
                ms.file, ms.n_rois, ms.n_timepoints
            )));
        }
        let count = (n as usize) * (t as usize);
        if bytes.len() != 16 + count * 4 {
            return Err(Error::Format(format!(
                "{}: expected {} payload bytes, found {}",
                ms.file,
                count * 4,
                bytes.len() - 16
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[16..].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        subjects.push(SubjectRecord {
            subject_id: ms.subject_id.clone(),
            series: RoiTimeSeries::new(n as usize, t as usize, data)
                .map_err(|e| Error::Format(format!("{}: {e}", ms.file)))?,
            label: ms.label,
            drug: ms.drug.clone(),
            cohort: ms.cohort.clone(),
        });
    }
    let cohort = Cohort {
        subjects,
        fingerprint: manifest.fingerprint,
    };
    cohort.validate()?;
    Ok(cohort)
}
