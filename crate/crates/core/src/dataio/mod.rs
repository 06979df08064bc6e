//! On-disk formats: `CPIM` images, `CPEM` embedding tables and JSON-lines
//! site manifests.

mod embeddings;
mod image;
mod manifest;

pub use embeddings::{
    read_embeddings, sidecar_path, write_embeddings, EmbeddingKey, EmbeddingLevel, EmbeddingTable,
    Provenance, CPEM_MAGIC, CPEM_VERSION,
};
pub use image::{read_image, write_image, CellImage, ChannelKind, CPIM_MAGIC, CPIM_VERSION};
pub use manifest::{
    load_manifest, validate_records, write_manifest, ChannelSet, DatasetManifest, SiteKey,
    SiteRecord, WellKey,
};

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
