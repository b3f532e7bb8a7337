//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `magic[8] | version u32 | config_len u32 | config JSON | count u32 |`
//! then per tensor `name_len u32 | name | ndim u32 | dims u64* | f32*`.
//! Base weights and adapters go to separate files with distinct magics.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rxlora_autodiff::Tensor;

use super::{adapter_layout, base_layout, BaseWeights, Init, LmError, ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;
const BASE_MAGIC: &[u8; 8] = b"RXLBASE\0";
const ADAPTER_MAGIC: &[u8; 8] = b"RXLADPT\0";

fn write_container(path: &Path, magic: &[u8; 8], config: &ModelConfig, tensors: &[(String, &Arc<Tensor>)]) -> Result<(), LmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(config).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, LmError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(ModelConfig, HashMap<String, Tensor>), LmError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 8];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(LmError::Checkpoint(format!("{}: wrong file type", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(LmError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut json = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    config.validate()?;
    let count = read_u32(&mut r)?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| LmError::Checkpoint(e.to_string()))?;
        tensors.insert(name, t);
    }
    Ok((config, tensors))
}

fn take(tensors: &mut HashMap<String, Tensor>, name: &str, init: &Init) -> Result<Arc<Tensor>, LmError> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| LmError::Checkpoint(format!("missing tensor {name}")))?;
    if t.shape() != init.shape() {
        return Err(LmError::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.shape(),
            init.shape()
        )));
    }
    Ok(Arc::new(t))
}

pub fn save_base(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), LmError> {
    write_container(path.as_ref(), BASE_MAGIC, &params.config, &params.base.named())
}

pub fn save_adapters(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), LmError> {
    write_container(path.as_ref(), ADAPTER_MAGIC, &params.config, &params.adapters.named())
}

fn base_from(config: &ModelConfig, tensors: &mut HashMap<String, Tensor>) -> Result<BaseWeights, LmError> {
    let layout = base_layout(config);
    let names = layout.named();
    let mut loaded = names
        .iter()
        .map(|(name, init)| take(tensors, name, init))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter();
    Ok(layout.map(|_| loaded.next().expect("one tensor per name")))
}

fn reject_extra(tensors: &HashMap<String, Tensor>) -> Result<(), LmError> {
    match tensors.keys().min() {
        Some(extra) => Err(LmError::Checkpoint(format!("unexpected tensor {extra}"))),
        None => Ok(()),
    }
}

/// Loads base weights alone, e.g. to fine-tune fresh adapters on them.
pub fn load_base(path: impl AsRef<Path>) -> Result<(ModelConfig, BaseWeights), LmError> {
    let (config, mut tensors) = read_container(path.as_ref(), BASE_MAGIC)?;
    let base = base_from(&config, &mut tensors)?;
    reject_extra(&tensors)?;
    Ok((config, base))
}

/// Loads a base checkpoint and its adapters. Both files must carry the same
/// config and exactly the expected tensor names and shapes.
pub fn load_checkpoint(base_path: impl AsRef<Path>, adapter_path: impl AsRef<Path>) -> Result<ModelParams, LmError> {
    let (config, base) = load_base(base_path)?;
    let (adapter_config, mut adapter_t) = read_container(adapter_path.as_ref(), ADAPTER_MAGIC)?;
    if adapter_config != config {
        return Err(LmError::ConfigMismatch);
    }
    let layout = adapter_layout(&config);
    let names = layout.named();
    let mut loaded = names
        .iter()
        .map(|(name, init)| take(&mut adapter_t, name, init))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter();
    let adapters = layout.map(|_| loaded.next().expect("one tensor per name"));
    reject_extra(&adapter_t)?;
    Ok(ModelParams {
        config,
        base,
        adapters,
    })
}
