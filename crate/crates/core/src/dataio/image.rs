use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_all, read_u32};
use crate::error::{Error, Result};

pub const CPIM_MAGIC: &[u8; 4] = b"CPIM";
pub const CPIM_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Fluorescent,
    Brightfield,
}

impl ChannelKind {
    fn code(self) -> u8 {
        match self {
            ChannelKind::Fluorescent => 0,
            ChannelKind::Brightfield => 1,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        match b {
            0 => Some(ChannelKind::Fluorescent),
            1 => Some(ChannelKind::Brightfield),
            _ => None,
        }
    }
}

/// A `H × W × C` intensity image, channels fastest, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellImage {
    height: usize,
    width: usize,
    kinds: Vec<ChannelKind>,
    pixels: Vec<f32>,
}

impl CellImage {
    /// Builds a validated image. Pixels are row-major with channels fastest.
    pub fn new(
        height: usize,
        width: usize,
        kinds: Vec<ChannelKind>,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let img = Self {
            height,
            width,
            kinds,
            pixels,
        };
        img.validate()?;
        Ok(img)
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, kinds: Vec<ChannelKind>, value: f32) -> Self {
        let n = height * width * kinds.len();
        Self {
            height,
            width,
            kinds,
            pixels: vec![value; n],
        }
    }

    /// Builds an image from `f(y, x, c)`; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        kinds: Vec<ChannelKind>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let c = kinds.len();
        let mut pixels = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    pixels.push(f(y, x, ch).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            kinds,
            pixels,
        }
    }

    /// Internal constructor for augmentation outputs that are already in range.
    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        kinds: Vec<ChannelKind>,
        pixels: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * kinds.len());
        Self {
            height,
            width,
            kinds,
            pixels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::InvalidImage("image has no channels".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidImage("image has zero extent".into()));
        }
        let expected = self.height * self.width * self.kinds.len();
        if self.pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "pixel buffer has {} values, expected {expected}",
                self.pixels.len()
            )));
        }
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite pixel at flat index {i}")));
        }
        if let Some(i) = self.pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "pixel {} at flat index {i} outside [0, 1]",
                self.pixels[i]
            )));
        }
        Ok(())
    }

    /// Checks the channel layout used by the encoders: 5 fluorescent, 3
    /// brightfield, or 5 fluorescent followed by 3 brightfield.
    pub fn validate_channel_layout(&self) -> Result<()> {
        use ChannelKind::*;
        let k = &self.kinds;
        let ok = match k.len() {
            5 => k.iter().all(|&c| c == Fluorescent),
            3 => k.iter().all(|&c| c == Brightfield),
            8 => k[..5].iter().all(|&c| c == Fluorescent) && k[5..].iter().all(|&c| c == Brightfield),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidImage(format!("unsupported channel layout {k:?}")))
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[ChannelKind] {
        &self.kinds
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.kinds.len() + c]
    }

    pub fn same_shape(&self, other: &CellImage) -> bool {
        self.height == other.height && self.width == other.width && self.kinds == other.kinds
    }

    /// Per-channel mean intensity.
    pub fn channel_means(&self) -> Vec<f64> {
        let c = self.channels();
        let mut sums = vec![0.0f64; c];
        for px in self.pixels.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += f64::from(v);
            }
        }
        let n = (self.height * self.width) as f64;
        sums.iter().map(|s| s / n).collect()
    }

    /// Keeps the channels in `range`, in order.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> CellImage {
        let c = self.channels();
        let mut pixels = Vec::with_capacity(self.height * self.width * range.len());
        for px in self.pixels.chunks_exact(c) {
            pixels.extend_from_slice(&px[range.clone()]);
        }
        CellImage::from_parts(self.height, self.width, self.kinds[range].to_vec(), pixels)
    }

    /// Stacks the channels of `self` and `other` (same spatial extent).
    pub fn concat_channels(&self, other: &CellImage) -> Result<CellImage> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let (ca, cb) = (self.channels(), other.channels());
        let mut pixels = Vec::with_capacity(self.pixels.len() + other.pixels.len());
        for (a, b) in self.pixels.chunks_exact(ca).zip(other.pixels.chunks_exact(cb)) {
            pixels.extend_from_slice(a);
            pixels.extend_from_slice(b);
        }
        let mut kinds = self.kinds.clone();
        kinds.extend_from_slice(&other.kinds);
        Ok(CellImage::from_parts(self.height, self.width, kinds, pixels))
    }
}

/// Serializes `image` as `CPIM`: a 20-byte header (magic, version, H, W, C as
/// little-endian u32), `H·W·C` little-endian f32 pixels, then one kind byte
/// per channel.
pub fn encode_image(image: &CellImage) -> Result<Vec<u8>> {
    if let Some(i) = image.pixels.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidImage(format!("non-finite pixel at flat index {i}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + image.pixels.len() * 4 + image.channels());
    out.extend_from_slice(CPIM_MAGIC);
    for v in [
        CPIM_VERSION,
        image.height as u32,
        image.width as u32,
        image.channels() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend(image.kinds.iter().map(|k| k.code()));
    Ok(out)
}

pub fn write_image(image: &CellImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<CellImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than CPIM header"));
    }
    if &bytes[..4] != CPIM_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        ));
    }
    let version = read_u32(bytes, 4);
    if version != CPIM_VERSION {
        return Err(Error::format(path, format!("unknown CPIM version {version}")));
    }
    let h = read_u32(bytes, 8) as usize;
    let w = read_u32(bytes, 12) as usize;
    let c = read_u32(bytes, 16) as usize;
    let n = h * w * c;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < n * 4 + c {
        return Err(Error::Truncated {
            path: path.into(),
            expected: n * 4 + c,
            found: payload.len(),
        });
    }
    if payload.len() > n * 4 + c {
        return Err(Error::format(path, "trailing bytes after channel kinds"));
    }
    let pixels: Vec<f32> = payload[..n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let kinds = payload[n * 4..]
        .iter()
        .map(|&b| {
            ChannelKind::from_code(b)
                .ok_or_else(|| Error::format(path, format!("channel kind byte {b} not in {{0, 1}}")))
        })
        .collect::<Result<Vec<_>>>()?;
    CellImage::new(h, w, kinds, pixels)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<CellImage> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    decode_image(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(n: usize) -> Vec<ChannelKind> {
        vec![ChannelKind::Fluorescent; n]
    }

    #[test]
    fn zero_image_layout() {
        let img = CellImage::filled(2, 2, kinds(1), 0.0);
        let bytes = encode_image(&img).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 16 + 1);
        assert_eq!(&bytes[..4], b"CPIM");
        assert!(bytes[HEADER_LEN..HEADER_LEN + 16].iter().all(|&b| b == 0));
        assert_eq!(bytes[HEADER_LEN + 16], 0);
    }

    #[test]
    fn header_of_eight_channel_image() {
        let mut k = kinds(5);
        k.extend([ChannelKind::Brightfield; 3]);
        let img = CellImage::filled(64, 64, k, 0.25);
        let bytes = encode_image(&img).unwrap();
        assert_eq!(read_u32(&bytes, 8), 64);
        assert_eq!(read_u32(&bytes, 12), 64);
        assert_eq!(read_u32(&bytes, 16), 8);
        assert_eq!(bytes.len() - HEADER_LEN - 8, 131_072);
        assert_eq!(&bytes[bytes.len() - 3..], &[1, 1, 1]);
    }

    #[test]
    fn rejects_bad_magic_truncation_version_and_kind() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.cpim");
        let img = CellImage::filled(4, 4, kinds(3), 0.5);
        let good = encode_image(&img).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format { .. })));

        std::fs::write(&p, &good[..good.len() - 10]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        let err = read_image(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 1] = 2;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_pixels_are_rejected_on_write() {
        let mut img = CellImage::filled(2, 2, kinds(1), 0.0);
        img.pixels_mut()[1] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_image(&img, dir.path().join("nan.cpim")),
            Err(Error::InvalidImage(_))
        ));
    }

    #[test]
    fn channel_layout_rules() {
        let mut k = kinds(5);
        k.extend([ChannelKind::Brightfield; 3]);
        assert!(CellImage::filled(16, 16, k.clone(), 0.0).validate_channel_layout().is_ok());
        k.swap(0, 7);
        assert!(CellImage::filled(16, 16, k, 0.0).validate_channel_layout().is_err());
        assert!(CellImage::filled(16, 16, kinds(4), 0.0).validate_channel_layout().is_err());
    }

    proptest! {
        #[test]
        fn write_read_is_bitwise_identity(
            h in 1usize..9, w in 1usize..9, c in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, &[]);
            let kinds: Vec<_> = (0..c)
                .map(|_| if rng.random_bool(0.5) { ChannelKind::Fluorescent } else { ChannelKind::Brightfield })
                .collect();
            let img = CellImage::from_fn(h, w, kinds, |_, _, _| rng.random::<f32>());
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("img.cpim");
            write_image(&img, &p).unwrap();
            let back = read_image(&p).unwrap();
            prop_assert_eq!(back.kinds(), img.kinds());
            let a: Vec<u32> = img.pixels().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.pixels().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
