use ndarray::{s, Array2, Axis};
use rayon::prelude::*;

use crate::augment::center_resize;
use crate::dataio::{read_image, CellImage, ChannelSet, DatasetManifest, EmbeddingKey, EmbeddingLevel, EmbeddingTable, SiteKey};
use crate::encoder::{batch_patches, forward, Checkpoint, HeadRows, ModelParams};
use crate::error::{Error, Result};

const EMBED_BATCH: usize = 32;

/// Reads every site image of `channel_set`, grouped by well (wells in key
/// order, sites by index).
pub fn load_channel_images(
    manifest: &DatasetManifest,
    channel_set: ChannelSet,
) -> Result<(Vec<Vec<SiteKey>>, Vec<Vec<CellImage>>)> {
    let wells = manifest.wells(channel_set);
    if wells.is_empty() {
        return Err(Error::Manifest(vec![format!("no {channel_set} records in manifest")]));
    }
    let keys: Vec<Vec<SiteKey>> = wells.values().map(|s| s.iter().map(|r| r.site_key()).collect()).collect();
    let images = wells
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|sites| {
            sites
                .iter()
                .map(|r| {
                    let img = read_image(manifest.image_path(r))?;
                    if img.channels() != channel_set.n_channels() {
                        return Err(Error::InvalidImage(format!(
                            "{} has {} channels, {channel_set} expects {}",
                            r.image_path,
                            img.channels(),
                            channel_set.n_channels()
                        )));
                    }
                    Ok(img)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((keys, images))
}

/// `[CLS ‖ mean patch token]` for each image, in input order. Images are
/// center-resized to the encoder resolution.
pub fn embed_images(params: &ModelParams<f32>, images: &[CellImage]) -> Result<Array2<f32>> {
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let n = cfg.n_patches();
    let mut out = Array2::zeros((images.len(), 2 * d));
    for (chunk_idx, chunk) in images.chunks(EMBED_BATCH).enumerate() {
        let resized: Vec<CellImage> = chunk.iter().map(|im| center_resize(im, cfg.image_size)).collect();
        let refs: Vec<&CellImage> = resized.iter().collect();
        let x = batch_patches::<f32>(&refs, cfg)?;
        let (o, _) = forward(params, x, chunk.len(), None, HeadRows::None)?;
        for b in 0..chunk.len() {
            let row = chunk_idx * EMBED_BATCH + b;
            out.slice_mut(s![row, ..d]).assign(&o.cls.row(b));
            let mean = o
                .patches
                .slice(s![b * n..(b + 1) * n, ..])
                .mapv(f64::from)
                .mean_axis(Axis(0))
                .expect("patches");
            out.slice_mut(s![row, d..]).assign(&mean.mapv(|v| v as f32));
        }
    }
    Ok(out)
}

/// Site-level table of teacher embeddings `[CLS ‖ mean patch]`, one row per
/// site of `channel_set` (wells in key order, sites by index).
pub fn embed_dataset(ck: &Checkpoint, manifest: &DatasetManifest, channel_set: ChannelSet) -> Result<EmbeddingTable> {
    if ck.meta.channel_set != channel_set {
        return Err(Error::Config(format!(
            "checkpoint was trained on {} channels, asked to embed {channel_set}",
            ck.meta.channel_set
        )));
    }
    let (keys, wells) = load_channel_images(manifest, channel_set)?;
    let images: Vec<CellImage> = wells.into_iter().flatten().collect();
    let vectors = embed_images(&ck.teacher, &images)?;
    let keys = keys
        .into_iter()
        .flatten()
        .map(|k| EmbeddingKey::site(&k.plate_id, &k.well_position, k.site_index))
        .collect();
    EmbeddingTable::new(keys, vectors, EmbeddingLevel::Site)
}
