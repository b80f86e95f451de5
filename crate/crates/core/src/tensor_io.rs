//! Reading and writing 2-D f64 tensors in safetensors files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};

/// Tensors by name plus the free-form string metadata of the file header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Array2<f64>>,
    pub metadata: BTreeMap<String, String>,
}

fn tensor_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Tensor(format!("{}: {msg}", path.display()))
}

fn to_array(path: &Path, name: &str, view: &TensorView<'_>) -> Result<Array2<f64>> {
    let shape = view.shape();
    let (rows, cols) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        [r, rest @ ..] => (*r, rest.iter().product()),
        [] => (1, 1),
    };
    let data = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        other => return Err(tensor_err(path, format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Array2::from_shape_vec((rows, cols), values).map_err(|e| tensor_err(path, format!("tensor {name}: {e}")))
}

/// Reads the named tensors (all of them when `names` is `None`).
pub fn read(path: &Path, names: Option<&[&str]>) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| tensor_err(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| tensor_err(path, e))?;
    let mut out = TensorFile {
        metadata: header
            .metadata()
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default(),
        ..Default::default()
    };
    let wanted: Vec<String> = match names {
        Some(n) => n.iter().map(|s| s.to_string()).collect(),
        None => st.names().into_iter().cloned().collect(),
    };
    for name in wanted {
        let view = st
            .tensor(&name)
            .map_err(|_| tensor_err(path, format!("missing tensor {name}")))?;
        let arr = to_array(path, &name, &view)?;
        out.tensors.insert(name, arr);
    }
    Ok(out)
}

/// Writes every tensor as little-endian f64.
pub fn write(path: &Path, file: &TensorFile) -> Result<()> {
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = file
        .tensors
        .iter()
        .map(|(name, arr)| {
            let bytes = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), vec![arr.nrows(), arr.ncols()], bytes)
        })
        .collect();
    let mut views = Vec::with_capacity(buffers.len());
    for (name, shape, bytes) in &buffers {
        let view = TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(|e| tensor_err(path, e))?;
        views.push((name.as_str(), view));
    }
    let metadata: Option<HashMap<String, String>> =
        (!file.metadata.is_empty()).then(|| file.metadata.clone().into_iter().collect());
    let bytes = safetensors::serialize(views, &metadata).map_err(|e| tensor_err(path, e))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
