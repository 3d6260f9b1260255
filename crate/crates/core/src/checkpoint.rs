//! Model checkpoints and optimizer state files.
//!
//! Checkpoint: `"CRCK"`, version (u32), JSON header length (u32), the JSON
//! header, then every parameter as f32 in declaration order.
//!
//! Optimizer state: `"CRAO"`, version (u32), step (u64), learning rate
//! (f64), tensor count (u32), then first and second moments for each
//! trainable parameter in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::{f32_bytes, Reader};
use crate::model::CricaModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 4] = b"CRCK";
const OPT_MAGIC: &[u8; 4] = b"CRAO";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
}

pub fn encode_checkpoint(model: &CricaModel<f32>, epoch: usize) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        model: model.config.clone(),
        epoch,
    })
    .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in model.params.values() {
        f32_bytes(v.data(), &mut out);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CricaModel<f32>, usize)> {
    let bad = |e: Error| Error::BadCheckpoint(e.to_string());
    let mut r = Reader::new("checkpoint", bytes);
    r.magic(CKPT_MAGIC).map_err(bad)?;
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let len = r.u32().map_err(bad)? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len).map_err(bad)?).map_err(|e| Error::BadCheckpoint(e.to_string()))?;
    let mut model = CricaModel::<f32>::new(header.model, 0).map_err(bad)?;
    let values = model
        .params
        .decls()
        .iter()
        .map(|d| Tensor::new(d.shape.clone(), r.f32s(d.numel())?))
        .collect::<Result<Vec<_>>>()
        .map_err(bad)?;
    r.finish().map_err(bad)?;
    model.params.set_values(values).map_err(bad)?;
    Ok((model, header.epoch))
}

pub fn save_checkpoint(path: &Path, model: &CricaModel<f32>, epoch: usize) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model, epoch)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CricaModel<f32>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::BadCheckpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

pub fn encode_optimizer(opt: &Adam<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    out.extend_from_slice(&opt.lr.to_le_bytes());
    out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
    for (m, v) in opt.m.iter().zip(&opt.v) {
        f32_bytes(m.data(), &mut out);
        f32_bytes(v.data(), &mut out);
    }
    out
}

/// Restores moments for `model`'s trainable parameters.
pub fn decode_optimizer(bytes: &[u8], model: &CricaModel<f32>, config: AdamConfig) -> Result<Adam<f32>> {
    let bad = |e: Error| Error::BadCheckpoint(e.to_string());
    let mut r = Reader::new("optimizer state", bytes);
    r.magic(OPT_MAGIC).map_err(bad)?;
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported optimizer version {version}")));
    }
    let step = u64::from_le_bytes(r.take(8).map_err(bad)?.try_into().expect("8 bytes"));
    let lr = f64::from_le_bytes(r.take(8).map_err(bad)?.try_into().expect("8 bytes"));
    let count = r.u32().map_err(bad)? as usize;
    let mut opt = Adam::new(config, &model.params);
    if count != opt.ids.len() {
        return Err(Error::BadCheckpoint(format!(
            "optimizer has {count} tensors, model has {} trainable",
            opt.ids.len()
        )));
    }
    for i in 0..count {
        let shape = opt.m[i].shape().to_vec();
        let n = opt.m[i].numel();
        opt.m[i] = Tensor::new(shape.clone(), r.f32s(n).map_err(bad)?)?;
        opt.v[i] = Tensor::new(shape, r.f32s(n).map_err(bad)?)?;
    }
    r.finish().map_err(bad)?;
    opt.step = step;
    opt.lr = lr;
    Ok(opt)
}

pub fn save_optimizer(path: &Path, opt: &Adam<f32>) -> Result<()> {
    Ok(fs::write(path, encode_optimizer(opt))?)
}

pub fn load_optimizer(path: &Path, model: &CricaModel<f32>, config: AdamConfig) -> Result<Adam<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::BadCheckpoint(format!("{}: {e}", path.display())))?;
    decode_optimizer(&bytes, model, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::small(16, 4, 8, 1, 2)
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = CricaModel::<f32>::new(tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&model, 4).unwrap();
        let (back, epoch) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(epoch, 4);
        assert_eq!(back.config, model.config);
        assert_eq!(back.params.values(), model.params.values());
        assert_eq!(encode_checkpoint(&back, 4).unwrap(), bytes);

        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 4]), Err(Error::BadCheckpoint(_))));
        let mut garbled = bytes.clone();
        garbled[0] = 0;
        assert!(matches!(decode_checkpoint(&garbled), Err(Error::BadCheckpoint(_))));
    }

    #[test]
    fn optimizer_round_trip() {
        let model = CricaModel::<f32>::new(tiny(), 3).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &model.params);
        opt.step = 17;
        opt.lr = 2.5e-5;
        opt.m[0].data_mut()[0] = 0.25;
        opt.v[1].data_mut()[0] = 0.5;
        let back = decode_optimizer(&encode_optimizer(&opt), &model, AdamConfig::default()).unwrap();
        assert_eq!(back, opt);

        let mut other_cfg = tiny();
        other_cfg.use_crica = false;
        let other = CricaModel::<f32>::new(other_cfg, 3).unwrap();
        assert!(decode_optimizer(&encode_optimizer(&opt), &other, AdamConfig::default()).is_err());
    }
}
