//! Image I/O, crops, multi-scale pyramids, and seed derivation.
//!
//! Images are `f64` tensors of shape `(N, 3, H, W)` with entries in `[0, 1]`.
//! Feature maps reuse the same layout with arbitrary channel counts and
//! unbounded values. Everything random is a pure function of `(input, seed)`.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Multi-scale style pyramid: exactly 4 levels, level `i` at `(H/2^i, W/2^i)`
/// for `i = 0..4`, level 0 being the source image.
pub struct StylePyramid {
    levels: Vec<Tensor>,
}

impl StylePyramid {
    /// The 4 levels, finest (source resolution) first.
    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    /// Level by index, 0 = source resolution, 3 = coarsest (1/8 size).
    pub fn level(&self, i: usize) -> Result<&Tensor> {
        self.levels
            .get(i)
            .ok_or_else(|| Error::config(format!("pyramid has 4 levels, requested index {i}")))
    }
}

/// Checks the image-tensor invariants: rank 4, C = 3, finite, in `[0, 1]`.
pub fn assert_image(t: &Tensor) -> Result<()> {
    let dims = t.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::dim(format!(
            "expected image of shape (N,3,H,W), got {dims:?}"
        )));
    }
    let flat: Vec<f64> = t.flatten_all()?.to_vec1()?;
    for &v in &flat {
        if !v.is_finite() {
            return Err(Error::dim("image contains non-finite values".to_string()));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::dim(format!("image value {v} outside [0,1]")));
        }
    }
    Ok(())
}

/// Native `(height, width)` of an image file, without decoding pixel data.
pub fn image_dims(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

/// Loads a PNG or JPEG, bilinearly resizes to `(h, w)`, and returns a
/// `(1, 3, h, w)` tensor with entries in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>, size: (usize, usize), device: &Device) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (h, w) = size;
    let rgb = img
        .resize_exact(w as u32, h as u32, FilterType::Triangle)
        .to_rgb8();
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?)
}

/// Writes a single `(1, 3, H, W)` image tensor as PNG, clamping to `[0, 1]`
/// and quantizing to 8 bits. `load_image(save_image(x))` round-trips within
/// `1/255` per channel.
pub fn save_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dims = img.dims();
    if dims.len() != 4 || dims[0] != 1 || dims[1] != 3 {
        return Err(Error::dim(format!(
            "save_image expects shape (1,3,H,W), got {dims:?}"
        )));
    }
    let (h, w) = (dims[2], dims[3]);
    let flat: Vec<f64> = img.flatten_all()?.to_vec1()?;
    let mut buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            let v = flat[c * h * w + y * w + x].clamp(0.0, 1.0);
            px.0[c] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}

/// Contiguous random crop of size `(h, w)`; offsets are a pure function of
/// `seed`, so identical seeds give bitwise-identical crops.
pub fn random_crop(img: &Tensor, size: (usize, usize), seed: u64) -> Result<Tensor> {
    let dims = img.dims();
    if dims.len() != 4 {
        return Err(Error::dim(format!("expected rank-4 tensor, got {dims:?}")));
    }
    let (big_h, big_w) = (dims[2], dims[3]);
    let (h, w) = size;
    if h > big_h || w > big_w {
        return Err(Error::dim(format!(
            "crop {h}x{w} exceeds image {big_h}x{big_w}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let y = rng.gen_range(0..=big_h - h);
    let x = rng.gen_range(0..=big_w - w);
    Ok(img.narrow(2, y, h)?.narrow(3, x, w)?.contiguous()?)
}

/// Builds the 4-level style pyramid by repeated 2×2 area averaging.
/// Requires H and W divisible by 8 so every level has integral size.
pub fn build_pyramid(style: &Tensor) -> Result<StylePyramid> {
    let dims = style.dims();
    if dims.len() != 4 {
        return Err(Error::dim(format!("expected rank-4 tensor, got {dims:?}")));
    }
    let (h, w) = (dims[2], dims[3]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::dim(format!(
            "pyramid needs H and W divisible by 8, got {h}x{w}"
        )));
    }
    let mut levels = vec![style.clone()];
    for _ in 0..3 {
        let prev = levels.last().expect("non-empty");
        levels.push(prev.avg_pool2d(2)?);
    }
    Ok(StylePyramid { levels })
}

/// Lists image files (png/jpg/jpeg, case-insensitive) in a directory,
/// sorted lexicographically by filename for deterministic enumeration.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// ChaCha20 RNG from a bare seed. The shared source of randomness for crops
/// and sampling; the tensor backend's own RNG is never used.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from `(base, label, index)`.
///
/// Training uses this for per-step sampling (`derive_seed(seed, "crop", step)`),
/// which keeps resumed runs identical to uninterrupted ones without
/// serializing RNG state.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
