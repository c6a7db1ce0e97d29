use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DtConfig, DtError, DtModel, ScenarioEntry};
use crate::numerics::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"DTWCKPT\0";
/// Current on-disk format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DtConfig,
    scenarios: BTreeMap<String, ScenarioEntry>,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Writes magic, version, a JSON header and raw little-endian tensors.
pub fn write_checkpoint<W: Write>(w: &mut W, model: &DtModel, seed: u64) -> Result<(), DtError> {
    let header = Header {
        config: model.config.clone(),
        scenarios: model.scenarios.clone(),
        seed,
        tensors: model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DtError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.params.iter() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint, returning the model and the seed it was trained with.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(DtModel, u64), DtError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DtError::Checkpoint("not a checkpoint file".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(DtError::UnsupportedVersion(version));
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n)?;
    let len = u64::from_le_bytes(n) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| DtError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for (name, shape) in header.tensors {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|e| DtError::Checkpoint(format!("tensor `{name}` element {i}: {e}")))?;
            let x = f64::from_le_bytes(buf);
            if !x.is_finite() {
                return Err(DtError::Checkpoint(format!("tensor `{name}` element {i} is not finite")));
            }
            data.push(x);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(DtError::Checkpoint("trailing bytes".into()));
    }
    let model = DtModel {
        config: header.config,
        scenarios: header.scenarios,
        params,
    };
    Ok((model, header.seed))
}

pub fn save_checkpoint(path: &Path, model: &DtModel, seed: u64) -> Result<(), DtError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DtModel, u64), DtError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
