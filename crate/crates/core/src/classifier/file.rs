//! `PDRM` model files: magic, version, JSON manifest of the layer stack,
//! then every weight and bias as little-endian `f64` in manifest order,
//! then a CRC32 of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Model};
use crate::error::{FormatError, Result};
use crate::io;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"PDRM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_shape: Option<Vec<usize>>,
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let manifest = Manifest {
        input_shape: model.input_shape,
        classes: model.classes,
        layers: model
            .layers
            .iter()
            .map(|l| LayerEntry {
                name: l.name.clone(),
                spec: l.spec,
                weight_shape: l.weight.as_ref().map(|t| t.shape().to_vec()),
                bias_shape: l.bias.as_ref().map(|t| t.shape().to_vec()),
            })
            .collect(),
    };
    let mut values = Vec::with_capacity(model.param_count());
    for l in &model.layers {
        for t in l.weight.iter().chain(l.bias.iter()) {
            values.extend_from_slice(t.data());
        }
    }
    let text = serde_json::to_string(&manifest).expect("manifest serialises");
    io::encode(MODEL_MAGIC, MODEL_VERSION, &text, &values)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (text, values) = io::decode(bytes, MODEL_MAGIC, MODEL_VERSION)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut model =
        Model::zeros(manifest.input_shape, manifest.layers.iter().map(|l| (l.name.clone(), l.spec)).collect())?;
    if model.classes != manifest.classes {
        return Err(FormatError::Manifest(format!(
            "manifest says {} classes, layers produce {}",
            manifest.classes, model.classes
        ))
        .into());
    }
    let mut cursor = 0;
    for (layer, entry) in model.layers.iter_mut().zip(&manifest.layers) {
        for (slot, declared) in [(&mut layer.weight, &entry.weight_shape), (&mut layer.bias, &entry.bias_shape)] {
            let Some(t) = slot.as_mut() else { continue };
            if declared.as_deref() != Some(t.shape()) {
                return Err(FormatError::Manifest(format!(
                    "layer `{}`: declared shape {declared:?}, expected {:?}",
                    entry.name,
                    t.shape()
                ))
                .into());
            }
            let n = t.numel();
            let chunk = values.get(cursor..cursor + n).ok_or_else(|| {
                FormatError::Manifest(format!("parameter payload too short at layer `{}`", entry.name))
            })?;
            *t = Tensor::from_parts(t.shape().to_vec(), chunk.to_vec());
            cursor += n;
        }
    }
    if cursor != values.len() {
        return Err(FormatError::Manifest(format!("{} unused parameter values", values.len() - cursor)).into());
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    io::write_file(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    decode_model(&io::read_file(path.as_ref())?)
}
