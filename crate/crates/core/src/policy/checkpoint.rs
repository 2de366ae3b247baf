//! Checkpoints: a JSON header next to a flat little-endian `f64` parameter file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

const FORMAT: &str = "ssv-policy";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements into the data file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub d_l: usize,
    pub d_v: usize,
    pub config_hash: String,
    pub step: usize,
    /// File name of the parameter data, relative to the header.
    pub data_file: String,
    pub tensors: Vec<TensorLayout>,
}

fn data_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Writes `<path>` (JSON header) and `<path>` with a `.bin` extension.
pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    config_hash: &str,
    step: usize,
) -> Result<CheckpointHeader> {
    let (d_l, d_v) = (params.d_l(), params.d_v());
    let tensors = vec![
        TensorLayout {
            name: "w_sig".into(),
            rows: d_l,
            cols: d_l,
            offset: 0,
        },
        TensorLayout {
            name: "w_vis".into(),
            rows: d_l,
            cols: d_v,
            offset: d_l * d_l,
        },
        TensorLayout {
            name: "stop".into(),
            rows: d_l,
            cols: 1,
            offset: d_l * d_l + d_l * d_v,
        },
    ];
    let bin = data_path(path);
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        d_l,
        d_v,
        config_hash: config_hash.into(),
        step,
        data_file: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let bytes: Vec<u8> = params.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

/// Reads a checkpoint; `expect` pins `(d_l, d_v)` when given.
pub fn load_checkpoint(
    path: &Path,
    expect: Option<(usize, usize)>,
) -> Result<(CheckpointHeader, PolicyParams)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Version(format!(
            "{}: expected {FORMAT} v{VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    if let Some((d_l, d_v)) = expect {
        if (header.d_l, header.d_v) != (d_l, d_v) {
            return Err(Error::Version(format!(
                "{}: checkpoint dims D_L={} D_v={} do not match configured D_L={d_l} D_v={d_v}",
                path.display(),
                header.d_l,
                header.d_v
            )));
        }
    }
    let bin = path.with_file_name(&header.data_file);
    let raw = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let (d_l, d_v) = (header.d_l, header.d_v);
    let want = d_l * d_l + d_l * d_v + d_l;
    if raw.len() != want * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes of parameters, found {}",
            bin.display(),
            want * 8,
            raw.len()
        )));
    }
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let take = |name: &str| -> Result<&[f64]> {
        let t = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        flat.get(t.offset..t.offset + t.rows * t.cols)
            .ok_or_else(|| Error::Data(format!("tensor {name} runs past the data file")))
    };
    let params = PolicyParams {
        w_sig: Matrix::from_vec(d_l, d_l, take("w_sig")?.to_vec()).map_err(|e| Error::Data(e.to_string()))?,
        w_vis: Matrix::from_vec(d_l, d_v, take("w_vis")?.to_vec()).map_err(|e| Error::Data(e.to_string()))?,
        stop: Vector::new(take("stop")?.to_vec()).map_err(|e| Error::Data(e.to_string()))?,
    };
    Ok((header, params))
}
