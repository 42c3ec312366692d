//! `SEGV1` binary arrays with an optional `<file>.json` sidecar.
//!
//! Layout: `"SEGV1\n"`, u8 dtype (0 = f32, 1 = u8), u8 rank, rank u32 LE
//! extents, row-major LE payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{MaskVolume, Volume, VolumeMeta};
use crate::error::{Error, Result};

pub const SEGV_MAGIC: &[u8; 6] = b"SEGV1\n";

#[derive(Clone, Debug, PartialEq)]
pub enum SegvPayload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl SegvPayload {
    fn code(&self) -> u8 {
        match self {
            SegvPayload::F32(_) => 0,
            SegvPayload::U8(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SegvPayload::F32(v) => v.len(),
            SegvPayload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegvArray {
    pub dims: Vec<usize>,
    pub payload: SegvPayload,
}

/// Path of the JSON sidecar: `<file>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_segv(arr: &SegvArray) -> Result<Vec<u8>> {
    if arr.dims.len() > u8::MAX as usize || arr.dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::dim(format!("extents {:?} do not fit the SEGV header", arr.dims)));
    }
    if arr.dims.iter().product::<usize>() != arr.payload.len() {
        return Err(Error::dim(format!(
            "{} values for extents {:?}",
            arr.payload.len(),
            arr.dims
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * arr.dims.len() + 4 * arr.payload.len());
    out.extend_from_slice(SEGV_MAGIC);
    out.push(arr.payload.code());
    out.push(arr.dims.len() as u8);
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &arr.payload {
        SegvPayload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        SegvPayload::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode_segv(bytes: &[u8], path: &Path) -> Result<SegvArray> {
    let format = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let corrupt = |message: String| Error::Corruption {
        path: path.to_owned(),
        message,
    };
    if bytes.len() < 8 || &bytes[..6] != SEGV_MAGIC {
        return Err(format("missing SEGV1 magic".into()));
    }
    let (code, rank) = (bytes[6], bytes[7] as usize);
    let width = match code {
        0 => 4,
        1 => 1,
        other => return Err(format(format!("unknown dtype code {other}"))),
    };
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(corrupt(format!("header declares rank {rank} but the file ends early")));
    }
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(width, |acc: usize, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt(format!("extents {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(corrupt(format!(
            "extents {dims:?} need {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let payload = match code {
        0 => SegvPayload::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        _ => SegvPayload::U8(payload.to_vec()),
    };
    Ok(SegvArray { dims, payload })
}

pub fn write_segv(path: &Path, arr: &SegvArray, sidecar: Option<&Value>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_segv(arr)?).map_err(|e| Error::io(path, e))?;
    if let Some(meta) = sidecar {
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads an array and its sidecar, if present.
pub fn read_segv(path: &Path) -> Result<(SegvArray, Option<Value>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let arr = decode_segv(&bytes, path)?;
    let side = sidecar_path(path);
    let meta = match fs::read_to_string(&side) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            message: e.to_string(),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(&side, e)),
    };
    Ok((arr, meta))
}

fn dims3(arr: &SegvArray, path: &Path) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(arr.dims.as_slice()).map_err(|_| Error::Format {
        path: path.to_owned(),
        message: format!("expected a rank-3 volume, got extents {:?}", arr.dims),
    })
}

pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let arr = SegvArray {
        dims: v.dims().to_vec(),
        payload: SegvPayload::F32(v.data().to_vec()),
    };
    write_segv(path, &arr, Some(&serde_json::to_value(&v.meta)?))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (arr, meta) = read_segv(path)?;
    let dims = dims3(&arr, path)?;
    let SegvPayload::F32(data) = arr.payload else {
        return Err(Error::Format {
            path: path.to_owned(),
            message: "expected f32 samples".into(),
        });
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corruption {
            path: path.to_owned(),
            message: "non-finite samples".into(),
        });
    }
    let meta = match meta {
        Some(m) => serde_json::from_value(m).unwrap_or_else(|_| VolumeMeta::new(path.display().to_string())),
        None => VolumeMeta::new(path.display().to_string()),
    };
    Volume::new(dims, data, meta)
}

pub fn save_masks(path: &Path, m: &MaskVolume) -> Result<()> {
    let arr = SegvArray {
        dims: m.dims().to_vec(),
        payload: SegvPayload::U8(m.data().to_vec()),
    };
    write_segv(path, &arr, Some(&serde_json::json!({ "num_classes": m.num_classes() })))
}

/// Class count comes from the sidecar, or `max label + 1` without one.
pub fn load_masks(path: &Path) -> Result<MaskVolume> {
    let (arr, meta) = read_segv(path)?;
    let dims = dims3(&arr, path)?;
    let SegvPayload::U8(data) = arr.payload else {
        return Err(Error::Format {
            path: path.to_owned(),
            message: "expected u8 labels".into(),
        });
    };
    let num_classes = meta
        .as_ref()
        .and_then(|m| m.get("num_classes"))
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .unwrap_or_else(|| data.iter().copied().max().unwrap_or(0) as usize + 1);
    MaskVolume::new(dims, data, num_classes)
}
