//! Binary checkpoints: `RESEQ1`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::data::UserIndex;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReSeq};
use crate::numerics::{Matrix, ParamStore};

pub const MAGIC: &[u8; 6] = b"RESEQ1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: TrainingConfig,
    epoch: usize,
    best_metric: f64,
    u_ids: Vec<String>,
    v_ids: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A restored model with everything needed to score and report.
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub epoch: usize,
    pub best_metric: f64,
    pub u_index: UserIndex,
    pub v_index: UserIndex,
    pub model: ReSeq,
    pub params: ParamStore,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    config: &TrainingConfig,
    epoch: usize,
    best_metric: f64,
    u_index: &UserIndex,
    v_index: &UserIndex,
    params: &ParamStore,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut data = Vec::with_capacity(params.num_scalars() * 8);
    for (_, p) in params.iter() {
        let (r, c) = p.shape();
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            shape: [r, c],
            dtype: "f64le".into(),
            offset: data.len() as u64,
        });
        for x in p.value.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        config: config.clone(),
        epoch,
        best_metric,
        u_ids: u_index.ids().to_vec(),
        v_ids: v_index.ids().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    f.write_all(&data)?;
    f.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(corrupt("missing RESEQ1 magic"));
    }
    let hlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let body = 14usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[14..body])?;
    let data = &bytes[body..];

    let u_index = UserIndex::from_ids(header.u_ids);
    let v_index = UserIndex::from_ids(header.v_ids);
    let mcfg = ModelConfig::from_training(&header.config, u_index.len(), v_index.len());
    let mut params = ParamStore::new();
    // initial values are overwritten below; the seed only fixes the layout
    let model = ReSeq::new(&mut params, &mut ChaCha8Rng::seed_from_u64(0), mcfg)?;
    if params.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            params.len(),
            header.tensors.len()
        )));
    }
    for t in &header.tensors {
        let id = params
            .id(&t.name)
            .ok_or_else(|| corrupt(format!("unexpected tensor `{}`", t.name)))?;
        if t.dtype != "f64le" {
            return Err(corrupt(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
        }
        let [r, c] = t.shape;
        if params.get(id).shape() != (r, c) {
            return Err(corrupt(format!(
                "tensor `{}` has shape {r}x{c}, model expects {:?}",
                t.name,
                params.get(id).shape()
            )));
        }
        let start = t.offset as usize;
        let end = start + 8 * r * c;
        let raw = data
            .get(start..end)
            .ok_or_else(|| corrupt(format!("tensor `{}` runs past end of file", t.name)))?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        params.get_mut(id).value = Matrix::from_vec(r, c, values)?;
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        best_metric: header.best_metric,
        u_index,
        v_index,
        model,
        params,
    })
}
