use ndarray::{s, Array1, Array2, Axis};

use super::layers::{
    attention_bwd, attention_fwd, ffn_bwd, ffn_fwd, head_bwd, head_fwd, layer_norm_bwd,
    layer_norm_fwd, linear_bwd, linear_fwd, AttnCache, FfnCache, HeadCache, LnCache,
};
use super::{ModelParams, Scalar};
use crate::augment::PatchMask;
use crate::dataio::CellImage;
use crate::error::{Error, Result};

/// Flattens `image` into `(n_patches, P·P·C)` rows. Patches are row-major
/// over the grid; each row is ordered `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(image: &CellImage, patch: usize) -> Array2<T> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for dy in 0..patch {
                let start = ((gy * patch + dy) * w + gx * patch) * c;
                for &v in &image.pixels()[start..start + patch * c] {
                    row[k] = T::of(f64::from(v));
                    k += 1;
                }
            }
        }
    }
    out
}

/// Stacks the patch rows of several images after checking their shape.
pub fn batch_patches<T: Scalar>(
    images: &[&CellImage],
    cfg: &super::EncoderConfig,
) -> Result<Array2<T>> {
    let n = cfg.n_patches();
    let mut out = Array2::zeros((images.len() * n, cfg.patch_dim()));
    for (b, img) in images.iter().enumerate() {
        if img.height() != cfg.image_size
            || img.width() != cfg.image_size
            || img.channels() != cfg.in_channels
        {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match encoder input {}x{}x{}",
                img.height(),
                img.width(),
                img.channels(),
                cfg.image_size,
                cfg.image_size,
                cfg.in_channels
            )));
        }
        out.slice_mut(s![b * n..(b + 1) * n, ..])
            .assign(&patchify::<T>(img, cfg.patch_size));
    }
    Ok(out)
}

/// Which patch tokens go through the patch head.
#[derive(Debug, Clone)]
pub enum HeadRows {
    All,
    None,
    /// The masked positions of each image.
    Masked,
    /// `(image, patch)` pairs.
    Explicit(Vec<(usize, usize)>),
}

/// Outputs for a batch of `B` images with `N` patches each.
#[derive(Debug, Clone)]
pub struct BatchOutputs<T> {
    /// Final-norm CLS tokens, `(B, D)`.
    pub cls: Array2<T>,
    /// Final-norm patch tokens, `(B·N, D)`.
    pub patches: Array2<T>,
    /// Instance-head logits, `(B, K)`.
    pub cls_logits: Array2<T>,
    /// Patch-head logits for `patch_rows`, `(R, K)`.
    pub patch_logits: Array2<T>,
    pub patch_rows: Vec<(usize, usize)>,
}

/// Single-image outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutputs {
    pub cls: Array1<f32>,
    pub patches: Array2<f32>,
    pub cls_logits: Array1<f32>,
    pub patch_logits: Array2<f32>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    attn: AttnCache<T>,
    attn_out: Array2<T>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    ffn: FfnCache<T>,
}

/// Intermediates retained for [`backward`].
pub struct ForwardCache<T> {
    batch: usize,
    patches_in: Array2<T>,
    masked: Vec<bool>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    instance: HeadCache<T>,
    patch: Option<HeadCache<T>>,
    patch_rows: Vec<(usize, usize)>,
}

/// Gradients of the loss with respect to the model outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub cls: Option<Array2<T>>,
    pub cls_logits: Option<Array2<T>>,
    pub patch_logits: Option<Array2<T>>,
}

/// Batched forward pass. `patches` holds `batch · n_patches` rows from
/// [`batch_patches`]; masked patch embeddings are replaced by the mask token
/// before the transformer blocks.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    patches: Array2<T>,
    batch: usize,
    masks: Option<&[PatchMask]>,
    rows: HeadRows,
) -> Result<(BatchOutputs<T>, ForwardCache<T>)> {
    let cfg = &params.config;
    let n = cfg.n_patches();
    let t = cfg.n_tokens();
    let d = cfg.embed_dim;
    if patches.dim() != (batch * n, cfg.patch_dim()) {
        return Err(Error::Shape(format!(
            "patch matrix {:?}, expected ({}, {})",
            patches.dim(),
            batch * n,
            cfg.patch_dim()
        )));
    }
    let mut masked = vec![false; batch * n];
    if let Some(ms) = masks {
        if ms.len() != batch {
            return Err(Error::Shape(format!("{} masks for {batch} images", ms.len())));
        }
        for (b, m) in ms.iter().enumerate() {
            if m.masked.len() != n {
                return Err(Error::Shape(format!("mask of {} patches, expected {n}", m.masked.len())));
            }
            masked[b * n..(b + 1) * n].copy_from_slice(&m.masked);
        }
    }
    let patch_rows = match rows {
        HeadRows::All => (0..batch).flat_map(|b| (0..n).map(move |p| (b, p))).collect(),
        HeadRows::None => Vec::new(),
        HeadRows::Masked => (0..batch * n).filter(|&i| masked[i]).map(|i| (i / n, i % n)).collect(),
        HeadRows::Explicit(r) => {
            if let Some(bad) = r.iter().find(|&&(b, p)| b >= batch || p >= n) {
                return Err(Error::Shape(format!("patch row {bad:?} out of range")));
            }
            r
        }
    };

    let embedded = linear_fwd(&params.patch_embed, &patches.view());
    let mut x = Array2::zeros((batch * t, d));
    for b in 0..batch {
        let mut tok = x.slice_mut(s![b * t..(b + 1) * t, ..]);
        tok.assign(&params.pos_embed);
        let mut cls = tok.row_mut(0);
        cls += &params.cls_token;
        for p in 0..n {
            let mut row = tok.row_mut(p + 1);
            if masked[b * n + p] {
                row += &params.mask_token;
            } else {
                row += &embedded.row(b * n + p);
            }
        }
    }

    let eps = T::of(cfg.layer_norm_eps);
    let mut block_caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (h1, ln1) = layer_norm_fwd(&blk.norm1, &x.view(), eps);
        let qkv = linear_fwd(&blk.qkv, &h1.view());
        let (attn_out, attn) = attention_fwd(&qkv, batch, t, cfg.n_heads);
        x += &linear_fwd(&blk.proj, &attn_out.view());
        let (h2, ln2) = layer_norm_fwd(&blk.norm2, &x.view(), eps);
        let (f, ffn) = ffn_fwd(&blk.ffn, &h2.view());
        x += &f;
        block_caches.push(BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            attn_out,
            ln2,
            h2,
            ffn,
        });
    }
    let (y, final_ln) = layer_norm_fwd(&params.norm, &x.view(), eps);

    let cls_idx: Vec<usize> = (0..batch).map(|b| b * t).collect();
    let cls = y.select(Axis(0), &cls_idx);
    let patch_idx: Vec<usize> = (0..batch).flat_map(|b| (1..t).map(move |p| b * t + p)).collect();
    let patch_tokens = y.select(Axis(0), &patch_idx);

    let (cls_logits, instance) = head_fwd(&params.instance_head, cls.clone());
    let (patch_logits, patch) = if patch_rows.is_empty() {
        (Array2::zeros((0, cfg.n_prototypes)), None)
    } else {
        let idx: Vec<usize> = patch_rows.iter().map(|&(b, p)| b * n + p).collect();
        let (l, c) = head_fwd(&params.patch_head, patch_tokens.select(Axis(0), &idx));
        (l, Some(c))
    };

    let outputs = BatchOutputs {
        cls,
        patches: patch_tokens,
        cls_logits,
        patch_logits,
        patch_rows: patch_rows.clone(),
    };
    let cache = ForwardCache {
        batch,
        patches_in: patches,
        masked,
        blocks: block_caches,
        final_ln,
        instance,
        patch,
        patch_rows,
    };
    Ok((outputs, cache))
}

/// Backpropagates output gradients, accumulating parameter gradients into
/// `grads`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    out_grads: &OutputGrads<T>,
    grads: &mut ModelParams<T>,
) -> Result<()> {
    let cfg = &params.config;
    let batch = cache.batch;
    let n = cfg.n_patches();
    let t = cfg.n_tokens();
    let d = cfg.embed_dim;

    let mut dy = Array2::<T>::zeros((batch * t, d));
    let mut dcls = Array2::<T>::zeros((batch, d));
    if let Some(g) = &out_grads.cls {
        if g.dim() != (batch, d) {
            return Err(Error::Shape(format!("cls gradient {:?}", g.dim())));
        }
        dcls += g;
    }
    if let Some(g) = &out_grads.cls_logits {
        if g.dim() != (batch, cfg.n_prototypes) {
            return Err(Error::Shape(format!("cls logit gradient {:?}", g.dim())));
        }
        dcls += &head_bwd(&params.instance_head, &cache.instance, &g.view(), &mut grads.instance_head);
    }
    for b in 0..batch {
        dy.row_mut(b * t).assign(&dcls.row(b));
    }
    if let Some(g) = &out_grads.patch_logits {
        if g.dim() != (cache.patch_rows.len(), cfg.n_prototypes) {
            return Err(Error::Shape(format!("patch logit gradient {:?}", g.dim())));
        }
        if let Some(pc) = &cache.patch {
            let dp = head_bwd(&params.patch_head, pc, &g.view(), &mut grads.patch_head);
            for (r, &(b, p)) in cache.patch_rows.iter().enumerate() {
                let mut row = dy.row_mut(b * t + 1 + p);
                row += &dp.row(r);
            }
        }
    }

    let mut dx = layer_norm_bwd(&params.norm, &cache.final_ln, &dy.view(), &mut grads.norm);
    for ((blk, bc), g) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        let dh2 = ffn_bwd(&blk.ffn, &bc.h2.view(), &bc.ffn, &dx.view(), &mut g.ffn);
        dx += &layer_norm_bwd(&blk.norm2, &bc.ln2, &dh2.view(), &mut g.norm2);
        let dattn = linear_bwd(&blk.proj, &bc.attn_out.view(), &dx.view(), &mut g.proj, true).unwrap();
        let dqkv = attention_bwd(&bc.qkv, &bc.attn, &dattn.view(), batch, t, cfg.n_heads);
        let dh1 = linear_bwd(&blk.qkv, &bc.h1.view(), &dqkv.view(), &mut g.qkv, true).unwrap();
        dx += &layer_norm_bwd(&blk.norm1, &bc.ln1, &dh1.view(), &mut g.norm1);
    }

    let mut demb = Array2::<T>::zeros((batch * n, d));
    for b in 0..batch {
        let tok = dx.slice(s![b * t..(b + 1) * t, ..]);
        grads.pos_embed += &tok;
        grads.cls_token += &tok.row(0);
        for p in 0..n {
            if cache.masked[b * n + p] {
                grads.mask_token += &tok.row(p + 1);
            } else {
                demb.row_mut(b * n + p).assign(&tok.row(p + 1));
            }
        }
    }
    linear_bwd(
        &params.patch_embed,
        &cache.patches_in.view(),
        &demb.view(),
        &mut grads.patch_embed,
        false,
    );
    Ok(())
}

/// Encodes one image; every patch token goes through the patch head.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    image: &CellImage,
    mask: Option<&PatchMask>,
) -> Result<TokenOutputs> {
    let x = batch_patches::<T>(&[image], &params.config)?;
    let masks = mask.map(|m| std::slice::from_ref(m));
    let (out, _) = forward(params, x, 1, masks, HeadRows::All)?;
    let f = |a: &Array2<T>| a.mapv(|v| v.f64() as f32);
    Ok(TokenOutputs {
        cls: f(&out.cls).row(0).to_owned(),
        patches: f(&out.patches),
        cls_logits: f(&out.cls_logits).row(0).to_owned(),
        patch_logits: f(&out.patch_logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ChannelKind;
    use crate::encoder::{init_params, EncoderConfig, FfnType};
    use rand::Rng;

    fn toy(depth: usize, ffn: FfnType) -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depth,
            n_heads: 2,
            ffn_type: ffn,
            ffn_hidden_dim: 12,
            n_prototypes: 10,
            head_hidden_dim: 12,
            head_bottleneck_dim: 6,
            ..Default::default()
        }
    }

    fn image(seed: u64, size: usize, c: usize) -> CellImage {
        let mut rng = crate::rng::stream(seed, &[]);
        CellImage::from_fn(size, size, vec![ChannelKind::Brightfield; c], |_, _, _| rng.random())
    }

    #[test]
    fn output_shapes() {
        let p = init_params::<f32>(&EncoderConfig::default(), 0).unwrap();
        let out = encode(&p, &image(1, 64, 5), None).unwrap();
        assert_eq!(out.cls.len(), 96);
        assert_eq!(out.patches.dim(), (64, 96));
        assert_eq!(out.cls_logits.len(), 1024);
        assert_eq!(out.patch_logits.dim(), (64, 1024));
        assert!(out.cls.iter().chain(out.patch_logits.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn empty_mask_is_a_no_op_and_mask_changes_outputs() {
        let p = init_params::<f64>(&toy(2, FfnType::Mlp), 0).unwrap();
        let img = image(2, 16, 3);
        let plain = encode(&p, &img, None).unwrap();
        let empty = PatchMask::empty(4, 4);
        assert_eq!(encode(&p, &img, Some(&empty)).unwrap(), plain);
        let mut m = empty.clone();
        m.masked[5] = true;
        assert_ne!(encode(&p, &img, Some(&m)).unwrap(), plain);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let p = init_params::<f32>(&toy(1, FfnType::Mlp), 0).unwrap();
        assert!(matches!(encode(&p, &image(1, 32, 3), None), Err(Error::Shape(_))));
        assert!(matches!(encode(&p, &image(1, 16, 5), None), Err(Error::Shape(_))));
    }

    #[test]
    fn patch_permutation_equivariance_without_positions() {
        for ffn in [FfnType::Mlp, FfnType::Swiglu] {
            let mut p = init_params::<f64>(&toy(2, ffn), 5).unwrap();
            p.pos_embed.fill(0.0);
            let img = image(3, 16, 3);
            // swap patch (0,1) with patch (2,3)
            let swapped = CellImage::from_fn(16, 16, img.kinds().to_vec(), |y, x, c| {
                let (gy, gx) = (y / 4, x / 4);
                let (sy, sx) = match (gy, gx) {
                    (0, 1) => (2, 3),
                    (2, 3) => (0, 1),
                    other => other,
                };
                img.get(sy * 4 + y % 4, sx * 4 + x % 4, c)
            });
            let a = encode(&p, &img, None).unwrap();
            let b = encode(&p, &swapped, None).unwrap();
            let (i, j) = (1, 2 * 4 + 3);
            for k in 0..16 {
                let kk = if k == i { j } else if k == j { i } else { k };
                for (x, y) in a.patches.row(k).iter().zip(b.patches.row(kk)) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
            for (x, y) in a.cls.iter().zip(&b.cls) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batched_forward_matches_single_image_forward() {
        let p = init_params::<f64>(&toy(2, FfnType::Swiglu), 1).unwrap();
        let imgs = [image(10, 16, 3), image(11, 16, 3), image(12, 16, 3)];
        let refs: Vec<&CellImage> = imgs.iter().collect();
        let x = batch_patches::<f64>(&refs, &p.config).unwrap();
        let (out, _) = forward(&p, x, 3, None, HeadRows::None).unwrap();
        for (b, img) in imgs.iter().enumerate() {
            let single = encode(&p, img, None).unwrap();
            for (x, y) in out.cls.row(b).iter().zip(&single.cls) {
                assert!((*x as f32 - y).abs() < 1e-6);
            }
        }
    }

    /// Random linear functional of all outputs, differentiated both ways.
    #[test]
    fn backward_matches_finite_differences() {
        for ffn in [FfnType::Mlp, FfnType::Swiglu] {
            let p = init_params::<f64>(&toy(1, ffn), 2).unwrap();
            let imgs = [image(20, 16, 3), image(21, 16, 3)];
            let refs: Vec<&CellImage> = imgs.iter().collect();
            let x = batch_patches::<f64>(&refs, &p.config).unwrap();
            let mut m0 = PatchMask::empty(4, 4);
            m0.masked[3] = true;
            m0.masked[7] = true;
            let masks = vec![m0, PatchMask::empty(4, 4)];
            let rows = HeadRows::Explicit(vec![(0, 3), (1, 0), (1, 9)]);
            let mut rng = crate::rng::stream(3, &[]);
            let mut rand_like = |r: usize, c: usize| {
                Array2::from_shape_simple_fn((r, c), || rng.random::<f64>() - 0.5)
            };
            let w_cls = rand_like(2, 8);
            let w_logit = rand_like(2, 10);
            let w_patch = rand_like(3, 10);
            let objective = |p: &ModelParams<f64>| {
                let (o, _) = forward(p, x.clone(), 2, Some(&masks), rows.clone()).unwrap();
                (&o.cls * &w_cls).sum() + (&o.cls_logits * &w_logit).sum() + (&o.patch_logits * &w_patch).sum()
            };
            let (_, cache) = forward(&p, x.clone(), 2, Some(&masks), rows.clone()).unwrap();
            let mut g = p.zeros_like();
            let og = OutputGrads {
                cls: Some(w_cls.clone()),
                cls_logits: Some(w_logit.clone()),
                patch_logits: Some(w_patch.clone()),
            };
            backward(&p, &cache, &og, &mut g).unwrap();

            let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
            for (ti, name) in names.iter().enumerate() {
                let len = p.tensors()[ti].1.len();
                let mut num = Vec::with_capacity(len);
                for k in 0..len {
                    let h = 1e-5;
                    let mut plus = p.clone();
                    *plus.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() += h;
                    let mut minus = p.clone();
                    *minus.tensors_mut()[ti].1.iter_mut().nth(k).unwrap() -= h;
                    num.push((objective(&plus) - objective(&minus)) / (2.0 * h));
                }
                let ana: Vec<f64> = g.tensors()[ti].1.iter().copied().collect();
                let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
                assert!(diff <= 1e-4 * scale.max(1e-8) || diff < 1e-9, "{ffn:?} {name}: diff {diff} scale {scale}");
            }
        }
    }
}
