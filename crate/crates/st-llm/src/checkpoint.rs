//! Checkpoints: a JSON header (model config plus per-parameter name, shape,
//! and freeze flag) followed by a flat archive of little-endian f64 buffers.
//! The whole file round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StLlm};
use crate::param::{ParamSet, Parameter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

pub fn to_bytes(model: &StLlm) -> Result<Vec<u8>> {
    let entries: Vec<ParamEntry> = model
        .params
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen,
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in model.params.iter() {
        out.extend_from_slice(&p.tensor.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<StLlm> {
    let fail = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(&format!("bad header json: {e}")))?;
    let mut offset = 16 + header_len;
    let mut params = ParamSet::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 8;
        if bytes.len() < end {
            return Err(fail(&format!("truncated data for `{}`", entry.name)));
        }
        let tensor = Tensor::from_le_bytes(entry.shape.clone(), &bytes[offset..end])?;
        let mut p = Parameter::new(entry.name.clone(), tensor);
        p.frozen = entry.frozen;
        params.insert(p)?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after parameter data"));
    }
    Ok(StLlm {
        config: header.config,
        params,
    })
}

pub fn save(model: &StLlm, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<StLlm> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FreezeMode, ModelConfig};
    use crate::transformer::apply_freeze_policy;

    fn small_model(mode: FreezeMode) -> StLlm {
        let cfg = ModelConfig {
            d: 4,
            heads: 2,
            layers: 2,
            frozen_layers: 1,
            unfrozen_layers: 1,
            freeze_mode: mode,
            n_max: 6,
            input_steps: 3,
            output_steps: 2,
            ..ModelConfig::default()
        };
        StLlm::build(cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact_including_freeze_flags() {
        let mut model = small_model(FreezeMode::Pfa);
        apply_freeze_policy(&mut model).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(model.params.byte_snapshot(), back.params.byte_snapshot());
        for p in model.params.iter() {
            assert_eq!(p.frozen, back.params.get(&p.name).unwrap().frozen, "{}", p.name);
        }
        // and the re-serialized image is identical byte for byte
        assert_eq!(bytes, to_bytes(&back).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let model = small_model(FreezeMode::FullTuning);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.stck");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(model.params.byte_snapshot(), back.params.byte_snapshot());
        assert_eq!(model.config.d, back.config.d);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = small_model(FreezeMode::FullTuning);
        let mut bytes = to_bytes(&model).unwrap();
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = small_model(FreezeMode::FullTuning);
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }
}
