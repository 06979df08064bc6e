use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{read_all, read_u32};
use crate::error::{Error, Result};

pub const CPEM_MAGIC: &[u8; 4] = b"CPEM";
pub const CPEM_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingLevel {
    Site,
    Well,
}

/// Post-processing steps already applied to a well-level table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub aligned: bool,
    pub fused: bool,
}

impl Provenance {
    fn bits(self) -> u32 {
        u32::from(self.aligned) | (u32::from(self.fused) << 1)
    }

    fn from_bits(b: u32) -> Option<Self> {
        (b < 4).then_some(Self {
            aligned: b & 1 != 0,
            fused: b & 2 != 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EmbeddingKey {
    pub plate_id: String,
    pub well_position: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_index: Option<u32>,
}

impl EmbeddingKey {
    pub fn site(plate: &str, well: &str, site: u32) -> Self {
        Self {
            plate_id: plate.into(),
            well_position: well.into(),
            site_index: Some(site),
        }
    }

    pub fn well(plate: &str, well: &str) -> Self {
        Self {
            plate_id: plate.into(),
            well_position: well.into(),
            site_index: None,
        }
    }

    pub fn well_key(&self) -> super::WellKey {
        super::WellKey {
            plate_id: self.plate_id.clone(),
            well_position: self.well_position.clone(),
        }
    }
}

/// Rows of fixed-dimension vectors keyed by site or well.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub keys: Vec<EmbeddingKey>,
    pub vectors: Array2<f32>,
    pub level: EmbeddingLevel,
    pub provenance: Provenance,
}

impl EmbeddingTable {
    pub fn new(keys: Vec<EmbeddingKey>, vectors: Array2<f32>, level: EmbeddingLevel) -> Result<Self> {
        let t = Self {
            keys,
            vectors,
            level,
            provenance: Provenance::default(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.len() != self.vectors.nrows() {
            return Err(Error::KeyMismatch(format!(
                "{} keys for {} rows",
                self.keys.len(),
                self.vectors.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for k in &self.keys {
            if !seen.insert(k) {
                return Err(Error::KeyMismatch(format!("duplicate key {k:?}")));
            }
            let has_site = k.site_index.is_some();
            if has_site != (self.level == EmbeddingLevel::Site) {
                return Err(Error::KeyMismatch(format!(
                    "key {k:?} does not match table level {:?}",
                    self.level
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rows restricted to `keep`, in original order.
    pub fn filter(&self, mut keep: impl FnMut(&EmbeddingKey) -> bool) -> EmbeddingTable {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.keys[i])).collect();
        EmbeddingTable {
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            vectors: self.vectors.select(ndarray::Axis(0), &idx),
            level: self.level,
            provenance: self.provenance,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".keys.jsonl");
    PathBuf::from(s)
}

/// Writes the `CPEM` binary (magic, version, rows, dim, level, provenance
/// flags as little-endian u32, then row-major little-endian f32) and a
/// JSON-lines key sidecar next to it.
pub fn write_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    table.validate()?;
    if let Some(v) = table.vectors.iter().find(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("non-finite embedding value {v}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + table.vectors.len() * 4);
    out.extend_from_slice(CPEM_MAGIC);
    let level = match table.level {
        EmbeddingLevel::Site => 0u32,
        EmbeddingLevel::Well => 1,
    };
    for v in [
        CPEM_VERSION,
        table.len() as u32,
        table.dim() as u32,
        level,
        table.provenance.bits(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in table.vectors.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;

    let mut side = Vec::new();
    for k in &table.keys {
        writeln!(side, "{}", serde_json::to_string(k).unwrap()).unwrap();
    }
    let sp = sidecar_path(path);
    std::fs::write(&sp, side).map_err(|e| Error::io(&sp, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than CPEM header"));
    }
    if &bytes[..4] != CPEM_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = read_u32(&bytes, 4);
    if version != CPEM_VERSION {
        return Err(Error::format(path, format!("unknown CPEM version {version}")));
    }
    let rows = read_u32(&bytes, 8) as usize;
    let dim = read_u32(&bytes, 12) as usize;
    let level = match read_u32(&bytes, 16) {
        0 => EmbeddingLevel::Site,
        1 => EmbeddingLevel::Well,
        other => return Err(Error::format(path, format!("unknown level code {other}"))),
    };
    let provenance = Provenance::from_bits(read_u32(&bytes, 20))
        .ok_or_else(|| Error::format(path, "unknown provenance flags"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != rows * dim * 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: rows * dim * 4,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let vectors = Array2::from_shape_vec((rows, dim), data).expect("length checked above");

    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let keys = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                context: format!("{}:{}", sp.display(), i + 1),
                source: e,
            })
        })
        .collect::<Result<Vec<EmbeddingKey>>>()?;
    let table = EmbeddingTable {
        keys,
        vectors,
        level,
        provenance,
    };
    table.validate()?;
    Ok(table)
}
