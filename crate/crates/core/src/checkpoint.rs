//! Checkpoints as JSON:
//!
//! ```json
//! {
//!   "format": "seqlink-checkpoint",
//!   "version": 1,
//!   "dim": 24,
//!   "config": { "seed": 0, "data": {}, "model": {}, "train": {}, "synthetic": {} },
//!   "params": [ { "name": "policy.b3", "rows": 1, "cols": 48, "data": [1.0] } ]
//! }
//! ```
//!
//! Parameters appear in creation order. Floats are written in shortest
//! round-trip form, so loading restores every value bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Tensor};

const FORMAT: &str = "seqlink-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dim: usize,
    config: Option<RunConfig>,
    params: Vec<ParamRecord>,
}

fn records(ps: &ParamStore) -> Vec<ParamRecord> {
    ps.ids()
        .map(|id| {
            let t = ps.value(id);
            ParamRecord {
                name: ps.name(id).to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            }
        })
        .collect()
}

fn write(path: &Path, file: &CheckpointFile) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(w, file)?;
    Ok(())
}

pub fn save(path: &Path, model: &Model, config: &RunConfig) -> Result<()> {
    write(
        path,
        &CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            dim: model.dim,
            config: Some(config.clone()),
            params: records(&model.params),
        },
    )
}

/// Parameters only, without a config; used for diagnostic dumps.
pub fn save_params(path: &Path, ps: &ParamStore) -> Result<()> {
    let dim = 0;
    write(
        path,
        &CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            dim,
            config: None,
            params: records(ps),
        },
    )
}

pub fn load(path: &Path) -> Result<(Model, RunConfig)> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let config = file
        .config
        .ok_or_else(|| Error::invalid("checkpoint has no run configuration"))?;
    let mut model = Model::new(config.model.clone(), file.dim, config.seed)?;
    if model.params.len() != file.params.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            file.params.len(),
            model.params.len()
        )));
    }
    for rec in file.params {
        let id = model
            .params
            .find(&rec.name)
            .ok_or_else(|| Error::invalid(format!("unexpected tensor `{}`", rec.name)))?;
        let t = Tensor::new(rec.rows, rec.cols, rec.data)?;
        if t.shape() != model.params.value(id).shape() {
            return Err(Error::Shape {
                op: "checkpoint load",
                left: t.shape(),
                right: model.params.value(id).shape(),
            });
        }
        *model.params.value_mut(id) = t;
    }
    Ok((model, config))
}
