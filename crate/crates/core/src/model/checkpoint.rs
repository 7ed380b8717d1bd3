//! Binary checkpoints.
//!
//! Layout: magic `GMNC`, u32 format version, u64 header length, a JSON
//! header, then every tensor as little-endian f32 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Gmn;
use super::params::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMNC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (e.g. the selected detection threshold).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub struct Checkpoint<E> {
    pub model: Gmn<E>,
    pub step: u64,
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<E: Elem>(model: &Gmn<E>, step: u64, metadata: serde_json::Value, mut out: impl Write) -> Result<()> {
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for id in params.ids() {
        let t = params.get(id);
        let info = params.info(id);
        tensors.push(TensorEntry {
            name: info.name.clone(),
            kind: info.kind,
            shape: t.shape(),
            offset,
        });
        offset += t.numel();
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        step,
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 4);
    for id in params.ids() {
        for v in params.get(id).data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<E: Elem>(mut input: impl Read) -> Result<Checkpoint<E>> {
    let mut fixed = [0u8; 16];
    input
        .read_exact(&mut fixed)
        .map_err(|_| Error::Checkpoint("truncated preamble".into()))?;
    if &fixed[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Checkpoint("data section is not a whole number of f32".into()));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut model = Gmn::<E>::new(header.config.clone(), 0)?;
    if model.params().len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            model.params().len(),
            header.tensors.len()
        )));
    }
    for entry in &header.tensors {
        let id = model.params().require(&entry.name)?;
        let current = model.params().get(id);
        if current.shape() != entry.shape || model.params().info(id).kind != entry.kind {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                entry.name,
                entry.shape,
                current.shape()
            )));
        }
        let n = current.numel();
        let slice = floats
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the data section", entry.name)))?;
        let values = slice.iter().map(|v| E::from_f32(*v).unwrap()).collect();
        *model.params_mut().get_mut(id) = Tensor::from_vec(entry.shape, values)?;
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        metadata: header.metadata,
    })
}

impl<E: Elem> Gmn<E> {
    pub fn save(&self, path: impl AsRef<Path>, step: u64, metadata: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so readers never see a partial file
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            write_checkpoint(self, step, metadata, &mut f)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint<E>> {
        read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
