//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `FLMC`                              |
//! | 4      | 4    | format version (`u32`)                    |
//! | 8      | 8    | metadata length `m` (`u64`)               |
//! | 16     | m    | JSON metadata                             |
//! | 16 + m | 8 P  | `f64` payload: hidden then readout, row-major |

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Heterogeneity;
use crate::error::{FlmcError, Result};
use crate::nn::{Architecture, ModelParams};

pub const MAGIC: &[u8; 4] = b"FLMC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub round: usize,
    #[serde(default)]
    pub alpha: Option<Heterogeneity>,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    #[serde(default)]
    pub label: Option<String>,
}

impl CheckpointMeta {
    pub fn new(
        architecture: Architecture,
        seed: u64,
        round: usize,
        alpha: Option<Heterogeneity>,
    ) -> Self {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        CheckpointMeta {
            architecture,
            seed,
            round,
            alpha,
            created_unix,
            label: None,
        }
    }
}

pub fn encode(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.architecture != *params.arch() {
        return Err(FlmcError::shape(format!(
            "metadata architecture {:?} differs from parameters {:?}",
            meta.architecture,
            params.arch()
        )));
    }
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 8 * params.arch().num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.iter_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> FlmcError {
    FlmcError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(
            0,
            format!(
                "bad magic {:?}, expected \"FLMC\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let meta_end = (HEADER_LEN as u64)
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            format_err(
                HEADER_LEN,
                format!(
                    "metadata of {meta_len} bytes runs past the end of a {}-byte file",
                    bytes.len()
                ),
            )
        })? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| format_err(HEADER_LEN, format!("invalid metadata: {e}")))?;
    let arch = meta.architecture;
    Architecture::new(arch.input_dim, arch.hidden, arch.output_dim, arch.scaling)
        .map_err(|e| format_err(HEADER_LEN, e.to_string()))?;
    let expected = 8 * arch.num_params();
    let actual = bytes.len() - meta_end;
    if actual != expected {
        return Err(format_err(
            meta_end,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let mut values = bytes[meta_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let hidden: Vec<f64> = values.by_ref().take(arch.hidden * arch.input_dim).collect();
    let readout: Vec<f64> = values.collect();
    let hidden =
        Array2::from_shape_vec((arch.hidden, arch.input_dim), hidden).expect("length checked");
    let readout =
        Array2::from_shape_vec((arch.output_dim, arch.hidden), readout).expect("length checked");
    Ok((ModelParams::new(arch, hidden, readout)?, meta))
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    decode(&fs::read(path)?)
}
