use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{init_params, EncoderConfig, ModelParams};
use crate::dataio::{read_all, read_u32, ChannelSet};
use crate::error::{Error, Result};
use crate::objective::CenterState;

pub const CPCK_MAGIC: &[u8; 4] = b"CPCK";
pub const CPCK_VERSION: u32 = 1;

/// JSON sidecar stored next to the tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub channel_set: ChannelSet,
    pub step: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub center: CenterState<f32>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes named tensors as `CPCK` (magic, version, tensor count; then per
/// tensor: name length, UTF-8 name, rank, dims, little-endian f32 data) plus
/// a JSON sidecar with the encoder config and counters.
pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut named: Vec<(String, ArrayD<f32>)> = Vec::new();
    for (prefix, params) in [("student", &ck.student), ("teacher", &ck.teacher)] {
        for (n, t) in params.tensors() {
            named.push((format!("{prefix}.{n}"), t.to_owned()));
        }
    }
    named.push(("center.instance".into(), ck.center.instance.clone().into_dyn()));
    named.push(("center.patch".into(), ck.center.patch.clone().into_dyn()));

    let mut out = Vec::new();
    out.extend_from_slice(CPCK_MAGIC);
    out.extend_from_slice(&CPCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    let mut f = std::fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
    let json = serde_json::to_string_pretty(&ck.meta).expect("meta serializes");
    writeln!(f, "{json}").map_err(|e| Error::io(&mp, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: mp.display().to_string(),
        source: e,
    })?;
    let bytes = read_all(path)?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 12 || &bytes[..4] != CPCK_MAGIC {
        return Err(bad("bad magic"));
    }
    if read_u32(&bytes, 4) != CPCK_VERSION {
        return Err(bad("unknown CPCK version"));
    }
    let count = read_u32(&bytes, 8) as usize;
    let mut pos = 12;
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(bad("truncated tensor header"));
        }
        let v = read_u32(&bytes, *pos);
        *pos += 4;
        Ok(v)
    };
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(bytes.get(pos..pos + len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        pos += len;
        let rank = take_u32(&mut pos)? as usize;
        let dims = (0..rank)
            .map(|_| take_u32(&mut pos).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        pos += 4 * n;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, ArrayD::from_shape_vec(dims, data).expect("sized above"));
    }

    let mut load = |prefix: &str| -> Result<ModelParams<f32>> {
        let mut p = init_params::<f32>(&meta.encoder, 0)?;
        for (n, mut dst) in p.tensors_mut() {
            let key = format!("{prefix}.{n}");
            let src = tensors
                .remove(&key)
                .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::format(path, format!("tensor {key} has shape {:?}", src.shape())));
            }
            dst.assign(&src);
        }
        Ok(p)
    };
    let student = load("student")?;
    let teacher = load("teacher")?;
    let mut vec1 = |key: &str| -> Result<ndarray::Array1<f32>> {
        tensors
            .remove(key)
            .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))?
            .into_dimensionality()
            .map_err(|_| Error::format(path, format!("tensor {key} is not a vector")))
    };
    let center = CenterState {
        instance: vec1("center.instance")?,
        patch: vec1("center.patch")?,
    };
    Ok(Checkpoint {
        meta,
        student,
        teacher,
        center,
    })
}
