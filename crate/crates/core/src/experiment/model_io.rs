//! Binary model container.
//!
//! ```text
//! magic      8 bytes   "ENSRMLP\0"
//! version    u32 LE    1
//! depth      u32 LE    number of layer dims (L + 1)
//! dims       u32 LE × depth
//! per layer  weights (row-major) then biases, f64 LE
//! ```
//!
//! Alongside `<stem>.bin` a `<stem>.json` sidecar records the training
//! configuration and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{MlpModel, Params};
use crate::train::{Hypothesis, TrainConfig};

pub const MODEL_MAGIC: &[u8; 8] = b"ENSRMLP\0";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_model(model: &MlpModel) -> Vec<u8> {
    let dims = model.layer_dims();
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + 8 * model.params().len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let p = model.params();
    for (w, b) in p.weights.iter().zip(&p.biases) {
        for v in w.iter().chain(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<MlpModel> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format(format!("model truncated at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let u32_le = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = u32_le(take(4)?);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let depth = u32_le(take(4)?) as usize;
    if depth > 64 {
        return Err(Error::Format(format!("implausible layer count {depth}")));
    }
    let dims = (0..depth)
        .map(|_| take(4).map(|b| u32_le(b) as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut params = Params::zeros(&dims);
    for l in 0..params.weights.len() {
        for v in params.weights[l]
            .iter_mut()
            .chain(params.biases[l].iter_mut())
        {
            let b = take(8)?;
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    MlpModel::from_params(dims, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config_hash: String,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub train_loss_curve: Vec<f64>,
}

/// Writes `<dir>/<stem>.bin` and `<dir>/<stem>.json`.
pub fn save_hypothesis(
    dir: &Path,
    stem: &str,
    h: &Hypothesis,
    config: &TrainConfig,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(format!("{stem}.bin"));
    std::fs::write(&bin, encode_model(&h.model)).map_err(|e| Error::io(&bin, e))?;
    let sidecar = ModelSidecar {
        config_hash: h.config_hash.clone(),
        seed: h.seed,
        train_config: config.with_seed(h.seed),
        train_loss_curve: h.train_loss_curve.clone(),
    };
    let json_path = bin.with_extension("json");
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(bin)
}

/// Loads a model file. Without a sidecar the hypothesis is tagged by its
/// architecture only.
pub fn load_hypothesis(path: &Path) -> Result<Hypothesis> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode_model(&bytes)?;
    let json_path = path.with_extension("json");
    if json_path.exists() {
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
        if sidecar.train_config.layer_dims != model.layer_dims() {
            return Err(Error::Protocol(format!(
                "{} describes a different architecture than its model",
                json_path.display()
            )));
        }
        return Ok(Hypothesis {
            model,
            config_hash: sidecar.config_hash,
            seed: sidecar.seed,
            train_loss_curve: sidecar.train_loss_curve,
        });
    }
    let arch = model
        .layer_dims()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("-");
    Ok(Hypothesis {
        model,
        config_hash: format!("arch-{arch}"),
        seed: 0,
        train_loss_curve: Vec::new(),
    })
}
