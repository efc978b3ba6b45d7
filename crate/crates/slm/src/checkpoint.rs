//! Checkpoint file format: a self-describing fixed-size header (magic,
//! version, config hash, predictor shape, parameter count) followed by
//! the flat little-endian f64 parameter array.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::hex_encode;
use crate::error::{Result, SlmError};
use crate::predictor::{LinearPredictor, PredictorConfig};

const MAGIC: &[u8; 8] = b"SLMCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub model: PredictorConfig,
    pub param_count: u64,
}

pub fn save(path: &Path, predictor: &LinearPredictor, config_hash: &[u8; 32]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let c = predictor.config();
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(config_hash)?;
    for field in [c.k, c.l, c.class_count, c.time_features, c.hidden] {
        file.write_all(&(field as u64).to_le_bytes())?;
    }
    file.write_all(&(predictor.param_count() as u64).to_le_bytes())?;
    for p in predictor.params() {
        file.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_header(file: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SlmError::MalformedCheckpoint("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(SlmError::MalformedCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut config_hash = [0u8; 32];
    file.read_exact(&mut config_hash)?;
    let mut fields = [0u64; 6];
    for f in &mut fields {
        let mut buf = [0u8; 8];
        file.read_exact(&mut buf)?;
        *f = u64::from_le_bytes(buf);
    }
    Ok(CheckpointHeader {
        version,
        config_hash,
        model: PredictorConfig {
            k: fields[0] as usize,
            l: fields[1] as usize,
            class_count: fields[2] as usize,
            time_features: fields[3] as usize,
            hidden: fields[4] as usize,
        },
        param_count: fields[5],
    })
}

/// Loads a checkpoint, hard-failing with a field-by-field diff when the
/// stored header disagrees with the expected model shape or config hash.
pub fn load(
    path: &Path,
    expected_model: &PredictorConfig,
    expected_hash: Option<&[u8; 32]>,
) -> Result<LinearPredictor> {
    let mut file = std::fs::File::open(path)?;
    let header = read_header(&mut file)?;

    let mut diff = String::new();
    if header.model != *expected_model {
        diff.push_str(&format!(
            "  model: checkpoint {:?} vs config {:?}\n",
            header.model, expected_model
        ));
    }
    if let Some(expected) = expected_hash {
        if &header.config_hash != expected {
            diff.push_str(&format!(
                "  config_hash: checkpoint {} vs config {}\n",
                hex_encode(&header.config_hash),
                hex_encode(expected)
            ));
        }
    }
    if !diff.is_empty() {
        return Err(SlmError::CheckpointMismatch { diff });
    }

    let mut params = vec![0.0f64; header.param_count as usize];
    let mut buf = [0u8; 8];
    for p in &mut params {
        file.read_exact(&mut buf)?;
        *p = f64::from_le_bytes(buf);
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(SlmError::MalformedCheckpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    let mut predictor = LinearPredictor::new(*expected_model, 0)?;
    if params.len() != predictor.param_count() {
        return Err(SlmError::MalformedCheckpoint(format!(
            "parameter count {} does not match the model shape ({} expected)",
            params.len(),
            predictor.param_count()
        )));
    }
    predictor.set_params(params)?;
    Ok(predictor)
}
