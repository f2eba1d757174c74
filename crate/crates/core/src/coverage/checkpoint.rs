use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{CoverageModel, CoverageParams, EncoderSharing, ModelDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;
use crate::textnorm::EmbeddingTable;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub l: usize,
    pub d: usize,
    pub encoder_sharing: EncoderSharing,
    pub vocab_hash: String,
    pub max_union_len: usize,
    pub max_q_len: usize,
    pub max_a_len: usize,
}

impl CheckpointHeader {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            l: self.l,
            d: self.d,
            sharing: self.encoder_sharing,
            max_union_len: self.max_union_len,
            max_q_len: self.max_q_len,
            max_a_len: self.max_a_len,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    #[serde(flatten)]
    header: CheckpointHeader,
    params: Vec<NamedArray>,
}

/// Writes the model as versioned JSON. The embedding table is not stored,
/// only its hash. The file is replaced atomically.
pub fn save_checkpoint(model: &CoverageModel, path: &Path) -> Result<()> {
    let dims = model.dims;
    let file = CheckpointFile {
        header: CheckpointHeader {
            format_version: FORMAT_VERSION,
            l: dims.l,
            d: dims.d,
            encoder_sharing: dims.sharing,
            vocab_hash: model.embeddings.vocab_hash(),
            max_union_len: dims.max_union_len,
            max_q_len: dims.max_q_len,
            max_a_len: dims.max_a_len,
        },
        params: CoverageParams::names(&dims)
            .into_iter()
            .zip(model.params.tensors())
            .map(|(name, t)| NamedArray {
                name,
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<CheckpointFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            file.header.format_version
        )));
    }
    Ok(file)
}

/// Reads only the header, e.g. to learn `d` before loading embeddings.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_file(path)?.header)
}

/// Rebuilds a model, checking the embedding table against the stored hash and
/// every parameter against the shapes implied by the header.
pub fn load_checkpoint(path: &Path, embeddings: Arc<EmbeddingTable>) -> Result<CoverageModel> {
    let file = read_file(path)?;
    let dims = file.header.dims();
    dims.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    if embeddings.dim() != dims.d {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {}-dimensional embeddings, got {}",
            dims.d,
            embeddings.dim()
        )));
    }
    let hash = embeddings.vocab_hash();
    if hash != file.header.vocab_hash {
        return Err(Error::Checkpoint(format!(
            "embedding table hash {hash} does not match checkpoint {}",
            file.header.vocab_hash
        )));
    }
    let mut model = CoverageModel::zeros(dims, embeddings)?;
    let names = CoverageParams::names(&dims);
    if file.params.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter arrays, found {}",
            names.len(),
            file.params.len()
        )));
    }
    for ((name, slot), arr) in names.iter().zip(model.params.tensors_mut()).zip(file.params) {
        if &arr.name != name {
            return Err(Error::Checkpoint(format!(
                "expected parameter `{name}`, found `{}`",
                arr.name
            )));
        }
        if (arr.rows, arr.cols) != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {}x{}, expected {}x{}",
                arr.rows,
                arr.cols,
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = Tensor2::new(arr.rows, arr.cols, arr.data)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    Ok(model)
}
