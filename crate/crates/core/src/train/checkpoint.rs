//! Binary checkpoints: the magic `MORCKPT1`, a little-endian u64 header
//! length, a JSON header, then every parameter in header order as
//! little-endian f32 or f64.

use std::io::{Read, Write};
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::routing::RouterConfig;

const MAGIC: &[u8; 8] = b"MORCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: Precision,
    model: ModelConfig,
    router: Option<RouterConfig>,
    capacities: Vec<(usize, usize)>,
    lossfree_bias: Vec<f64>,
    params: Vec<(String, Vec<usize>)>,
}

pub fn save(model: &Model, path: &Path, precision: Precision) -> Result<()> {
    let header = Header {
        precision,
        model: model.cfg.clone(),
        router: model.router.clone(),
        capacities: model.capacities().iter().map(|c| (*c.numer(), *c.denom())).collect(),
        lossfree_bias: model.lossfree_bias.clone(),
        params: model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * model.params.num_elements());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &x in t.data() {
            match precision {
                Precision::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                Precision::F64 => buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    let mut model = Model::new(header.model, header.router, 0)?;
    model.set_capacities(header.capacities.iter().map(|&(n, d)| Ratio::new(n, d)).collect())?;
    if header.lossfree_bias.len() != model.lossfree_bias.len() {
        return Err(bad("bias length mismatch"));
    }
    model.lossfree_bias = header.lossfree_bias;
    if header.params.len() != model.params.len() {
        return Err(bad("parameter count mismatch"));
    }
    let width = match header.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut at = body;
    for (name, shape) in &header.params {
        let id = model.params.find(name).ok_or_else(|| bad(&format!("unexpected parameter {name}")))?;
        let t = model.params.get_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(bad(&format!("shape mismatch for {name}")));
        }
        let n = t.numel() * width;
        let chunk = bytes.get(at..at + n).ok_or_else(|| bad("truncated data"))?;
        for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(width)) {
            *dst = match header.precision {
                Precision::F32 => f64::from(f32::from_le_bytes(src.try_into().unwrap())),
                Precision::F64 => f64::from_le_bytes(src.try_into().unwrap()),
            };
        }
        at += n;
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(model)
}
