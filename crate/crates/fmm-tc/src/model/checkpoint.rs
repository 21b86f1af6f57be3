//! Checkpoint container: magic "FMTC", version, a canonical JSON config
//! block, named tensor entries, and a trailing CRC32 over everything that
//! precedes it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{
    validate_shapes, FcEncoderConfig, FmmModel, FusionKind, Modality, TsEncoderConfig,
};

const MAGIC: &[u8; 4] = b"FMTC";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    modality: Modality,
    fusion: FusionKind,
    ts: TsEncoderConfig,
    fc: FcEncoderConfig,
    ts_frozen: bool,
    pretrained: bool,
    init_seed: u64,
}

pub fn save_checkpoint(model: &FmmModel<f32>, path: &Path) -> Result<()> {
    let config = CheckpointConfig {
        modality: model.modality,
        fusion: model.fusion,
        ts: model.ts.clone(),
        fc: model.fc.clone(),
        ts_frozen: model.ts_frozen,
        pretrained: model.pretrained,
        init_seed: model.init_seed,
    };
    let value = serde_json::to_value(&config).expect("config serializes");
    let config_json = serde_json::to_string(&value).expect("canonical json");

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_json.as_bytes());
    bytes.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.iter() {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(DTYPE_F32);
        bytes.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<FmmModel<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch in {}",
            path.display()
        )));
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let config_len = c.u32()? as usize;
    let config_json = std::str::from_utf8(c.take(config_len)?)
        .map_err(|_| Error::Format("checkpoint config is not utf-8".into()))?;
    let config: CheckpointConfig = serde_json::from_str(config_json)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let count = c.u32()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!(
                "parameter `{name}`: unsupported dtype {dtype}"
            )));
        }
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
    }
    if c.pos != body.len() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }

    let model = FmmModel {
        modality: config.modality,
        ts: config.ts,
        fc: config.fc,
        fusion: config.fusion,
        params,
        ts_frozen: config.ts_frozen,
        pretrained: config.pretrained,
        init_seed: config.init_seed,
    };
    model.validate_config()?;
    validate_shapes(&model.params, &model.expected_shapes())?;
    Ok(model)
}
