//! Checkpoint container: one JSON document holding the architecture, stage
//! flags, dictionary and every named parameter. Numbers are written with 17
//! significant digits, so a load/save cycle reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelShape, ModelState, Network, StageFlags, Switches};
use crate::error::{IcmError, Result};
use crate::fsutil::{read, write_atomic};
use crate::iec::GlobalDictionary;
use crate::numerics::{NamedTensor, ParamTape, Tensor2};
use crate::sig17;

pub const CHECKPOINT_FORMAT: &str = "icm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    rows: usize,
    cols: usize,
    #[serde(with = "sig17::vector")]
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    shape: ModelShape,
    model: ModelConfig,
    switches: Switches,
    stages: StageFlags,
    dictionary: Option<GlobalDictionary>,
    parameter_count: usize,
    parameters: Vec<StoredTensor>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let parameters: Vec<StoredTensor> = model
        .tape
        .export()
        .into_iter()
        .map(|p| StoredTensor {
            name: p.name,
            rows: p.value.rows(),
            cols: p.value.cols(),
            data: p.value.into_data(),
        })
        .collect();
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        seed: model.seed,
        shape: model.network.shape,
        model: model.network.config.clone(),
        switches: model.switches,
        stages: model.stages,
        dictionary: model.dictionary.clone(),
        parameter_count: parameters.len(),
        parameters,
    };
    let mut bytes = serde_json::to_vec_pretty(&ckpt).map_err(|e| IcmError::Data(format!("serializing checkpoint: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = read(path)?;
    let where_ = path.display();
    let header: Header =
        serde_json::from_slice(&bytes).map_err(|e| IcmError::Data(format!("{where_}: not a readable checkpoint: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(IcmError::Incompatible(format!(
            "{where_}: found {} v{}, this build reads {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            header.format, header.version
        )));
    }
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| IcmError::Data(format!("{where_}: {e}")))?;
    if ckpt.parameter_count != ckpt.parameters.len() {
        return Err(IcmError::Data(format!(
            "{where_}: parameter_count says {} but {} tensors are stored",
            ckpt.parameter_count,
            ckpt.parameters.len()
        )));
    }
    let params = ckpt
        .parameters
        .into_iter()
        .map(|t| {
            let value = Tensor2::from_vec(t.rows, t.cols, t.data)
                .map_err(|e| IcmError::Data(format!("{where_}: tensor {}: {e}", t.name)))?;
            Ok(NamedTensor { name: t.name, value })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tape = ParamTape::new();
    let network = Network::new(&mut tape, ckpt.shape, ckpt.model, ckpt.seed)?;
    tape.import(params)?;
    if let Some(d) = &ckpt.dictionary {
        if d.width() != network.config.d_model || !d.centroids.is_finite() {
            return Err(IcmError::Data(format!("{where_}: dictionary shape {} does not fit d_model", d.centroids.shape_str())));
        }
    }
    Ok(ModelState {
        network,
        tape,
        dictionary: ckpt.dictionary,
        switches: ckpt.switches,
        stages: ckpt.stages,
        seed: ckpt.seed,
    })
}
