//! Feature extractors.
//!
//! Two networks live here: a VGG-layout convolutional pyramid used for
//! content features and perceptual losses (frozen by default, optionally
//! trainable for the learnable-style-encoder ablation), and the perception
//! encoder (PE) — a two-stage patch embedder whose stages split channels
//! into a low-frequency branch (pooled self-attention) and two
//! high-frequency branches (max-pool + pointwise FC, and pointwise FC +
//! depthwise conv).

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::params::{Init, Scope};
use crate::scin::{self, Msa};

/// The five tap points of the perceptual pyramid, shallow to deep.
pub const PERCEPTUAL_LAYERS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

/// Channel count of perceptual layer `k ∈ 1..=5` at base width `w`:
/// `w, 2w, 4w, 8w, 8w`.
pub fn perceptual_channels(width: usize, k: usize) -> usize {
    width * [1, 2, 4, 8, 8][k - 1]
}

/// RGB normalization applied before the perceptual pyramid (standard
/// ImageNet statistics, kept so pretrained weights drop in unchanged).
const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// VGG-layout feature pyramid: five 3×3 conv + ReLU taps with 2×2 max-pool
/// between them, so tap `k` has `2^{k-1}·w` channels at `H/2^{k-1}`.
pub struct PerceptualExtractor {
    convs: Vec<(Tensor, Tensor)>,
    width: usize,
}

impl PerceptualExtractor {
    /// Builds the pyramid at base width `width`. Construct under a frozen
    /// scope for the standard fixed extractor, or a trainable scope for the
    /// learnable-style-encoder ablation.
    pub fn new(scope: &mut Scope, width: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for k in 1..=5 {
            let out_ch = perceptual_channels(width, k);
            let mut s = scope.sub(&format!("conv{k}"));
            let w = s.param("weight", &[out_ch, in_ch, 3, 3], Init::FanIn)?;
            let b = s.param("bias", &[out_ch], Init::Zeros)?;
            convs.push((w, b));
            in_ch = out_ch;
        }
        Ok(PerceptualExtractor { convs, width })
    }

    /// Base width `w` (paper layout uses 64).
    pub fn width(&self) -> usize {
        self.width
    }

    /// Extracts the requested tap points for a 3-channel image in `[0,1]`.
    /// Unknown layer names are configuration errors.
    pub fn features(&self, img: &Tensor, layers: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let dims = img.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::dim(format!(
                "perceptual extractor expects (N,3,H,W), got {dims:?}"
            )));
        }
        let mut depth = 0;
        for name in layers {
            let k = PERCEPTUAL_LAYERS
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::config(format!("unknown perceptual layer {name}")))?;
            depth = depth.max(k + 1);
        }

        let mean = Tensor::from_vec(RGB_MEAN.to_vec(), (1, 3, 1, 1), img.device())?;
        let std = Tensor::from_vec(RGB_STD.to_vec(), (1, 3, 1, 1), img.device())?;
        let mut x = img.broadcast_sub(&mean)?.broadcast_div(&std)?;

        let mut out = BTreeMap::new();
        for (k, (w, b)) in self.convs.iter().take(depth).enumerate() {
            if k > 0 {
                x = max_pool_2x2(&x)?;
            }
            x = x
                .conv2d(w, 1, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                .relu()?;
            let name = PERCEPTUAL_LAYERS[k];
            if layers.contains(&name) {
                out.insert(name.to_string(), x.clone());
            }
        }
        Ok(out)
    }

    /// Single-layer convenience wrapper around [`Self::features`].
    pub fn layer(&self, img: &Tensor, name: &str) -> Result<Tensor> {
        let mut map = self.features(img, &[name])?;
        map.remove(name)
            .ok_or_else(|| Error::config(format!("unknown perceptual layer {name}")))
    }
}

/// Max pool with 2×2 window and stride 2. Built from the four phase views
/// combined by elementwise maxima rather than the fused pooling kernel,
/// whose backward pass scales gradients down by the window area.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "2x2 max pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let phases = x.reshape((n, c, h / 2, 2, w / 2, 2))?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..2 {
        for dx in 0..2 {
            let view = phases
                .narrow(3, dy, 1)?
                .narrow(5, dx, 1)?
                .contiguous()?
                .reshape((n, c, h / 2, w / 2))?;
            acc = Some(match acc {
                None => view,
                Some(a) => a.maximum(&view)?,
            });
        }
    }
    Ok(acc.expect("four phases"))
}

/// Max pool with 3×3 window, stride 1, padding 1 — spatial size preserved.
/// Built from a replicate pad and nine shifted elementwise maxima, which has
/// identical semantics to padding with −∞ (replicated values duplicate
/// in-window entries, so they never win a maximum on their own).
pub fn max_pool_3x3_same(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let view = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                None => view,
                Some(a) => a.maximum(&view)?,
            });
        }
    }
    Ok(acc.expect("nine windows"))
}

/// PE style features: two stages of the frequency-split mixer.
pub struct StyleFeature {
    /// Stage-1 feature, `(N, 8w, H/4, W/4)`.
    pub stage1: Tensor,
    /// Stage-2 feature, `(N, 8w, H/8, W/8)` — the grid that matches the
    /// relu4_1 content feature and feeds cross-attention fusion.
    pub stage2: Tensor,
}

/// One frequency-split mixer stage. Splits `C` channels into a
/// low-frequency half and two high-frequency quarters, mixes each branch,
/// and concatenates back to `C` channels at unchanged spatial size.
pub struct PeStage {
    low_msa: Msa,
    h1_fc_w: Tensor,
    h1_fc_b: Tensor,
    h2_fc_w: Tensor,
    h2_fc_b: Tensor,
    h2_dw_w: Tensor,
    h2_dw_b: Tensor,
}

impl PeStage {
    /// Builds a stage for `channels` (must be divisible by 4) with
    /// `n_heads` attention heads on the low-frequency branch.
    pub fn new(scope: &mut Scope, channels: usize, n_heads: usize) -> Result<Self> {
        if channels % 4 != 0 {
            return Err(Error::dim(format!(
                "frequency-split stage needs channels divisible by 4, got {channels}"
            )));
        }
        let half = channels / 2;
        let quarter = channels / 4;
        Ok(PeStage {
            low_msa: Msa::new(&mut scope.sub("low_msa"), half, n_heads)?,
            h1_fc_w: scope.param("h1_fc.weight", &[quarter, quarter, 1, 1], Init::FanIn)?,
            h1_fc_b: scope.param("h1_fc.bias", &[quarter], Init::Zeros)?,
            h2_fc_w: scope.param("h2_fc.weight", &[quarter, quarter, 1, 1], Init::FanIn)?,
            h2_fc_b: scope.param("h2_fc.bias", &[quarter], Init::Zeros)?,
            h2_dw_w: scope.param("h2_dw.weight", &[quarter, 1, 3, 3], Init::FanIn)?,
            h2_dw_b: scope.param("h2_dw.bias", &[quarter], Init::Zeros)?,
        })
    }

    /// High-frequency mixers:
    /// `Y_h1 = FC(MaxPool3x3(F_h1))`, `Y_h2 = DwConv3x3(FC(F_h2))`.
    /// The FCs are pointwise (1×1) convolutions acting across channels.
    pub fn high_freq_mixers(&self, f_h1: &Tensor, f_h2: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_h1.dims() != f_h2.dims() {
            return Err(Error::dim(format!(
                "high-frequency branches must share shapes, got {:?} vs {:?}",
                f_h1.dims(),
                f_h2.dims()
            )));
        }
        let y_h1 = max_pool_3x3_same(f_h1)?
            .conv2d(&self.h1_fc_w, 0, 1, 1, 1)?
            .broadcast_add(&self.h1_fc_b.reshape((1, (), 1, 1))?)?;
        let quarter = self.h2_dw_w.dims4()?.0;
        let y_h2 = f_h2
            .conv2d(&self.h2_fc_w, 0, 1, 1, 1)?
            .broadcast_add(&self.h2_fc_b.reshape((1, (), 1, 1))?)?
            .conv2d(&self.h2_dw_w, 1, 1, 1, quarter)?
            .broadcast_add(&self.h2_dw_b.reshape((1, (), 1, 1))?)?;
        Ok((y_h1, y_h2))
    }

    /// Low-frequency mixer: `Y_l = Upsample(MSA(AvePool(F_l)))` — 2×2 area
    /// pooling, tokens over the pooled grid, one bare self-attention block,
    /// nearest ×2 upsample back to input size.
    pub fn low_freq_mixer(&self, f_l: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = f_l.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "low-frequency mixer needs even spatial size, got {h}x{w}"
            )));
        }
        let pooled = f_l.avg_pool2d(2)?;
        let (ph, pw) = (h / 2, w / 2);
        let tokens = pooled
            .reshape((n, c, ph * pw))?
            .transpose(1, 2)?
            .contiguous()?;
        let mixed = self.low_msa.forward(&tokens)?;
        let grid = mixed
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, c, ph, pw))?;
        Ok(grid.upsample_nearest2d(h, w)?)
    }

    /// Full stage: split channels `[0,C/2) | [C/2,3C/4) | [3C/4,C)` into
    /// `F_l | F_h1 | F_h2`, mix, and concatenate `Y_l | Y_h1 | Y_h2`.
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = f.dims4()?;
        if c % 4 != 0 {
            return Err(Error::dim(format!(
                "frequency-split stage needs channels divisible by 4, got {c}"
            )));
        }
        let half = c / 2;
        let quarter = c / 4;
        let f_l = f.narrow(1, 0, half)?;
        let f_h1 = f.narrow(1, half, quarter)?.contiguous()?;
        let f_h2 = f.narrow(1, half + quarter, quarter)?.contiguous()?;
        let y_l = self.low_freq_mixer(&f_l)?;
        let (y_h1, y_h2) = self.high_freq_mixers(&f_h1, &f_h2)?;
        Ok(Tensor::cat(&[&y_l, &y_h1, &y_h2], 1)?)
    }
}

/// The perception encoder: 4×4 patch embedding into `8w` channels, one
/// frequency-split stage, a stride-2 embedding, and a second stage.
pub struct PerceptionEncoder {
    patch_w: Tensor,
    patch_b: Tensor,
    down_w: Tensor,
    down_b: Tensor,
    stage1: PeStage,
    stage2: PeStage,
}

impl PerceptionEncoder {
    /// Builds the encoder at base width `width` (feature channels `8w`).
    pub fn new(scope: &mut Scope, width: usize, n_heads: usize) -> Result<Self> {
        let ch = 8 * width;
        Ok(PerceptionEncoder {
            patch_w: scope.param("patch.weight", &[ch, 3, 4, 4], Init::FanIn)?,
            patch_b: scope.param("patch.bias", &[ch], Init::Zeros)?,
            down_w: scope.param("down.weight", &[ch, ch, 3, 3], Init::FanIn)?,
            down_b: scope.param("down.bias", &[ch], Init::Zeros)?,
            stage1: PeStage::new(&mut scope.sub("stage1"), ch, n_heads)?,
            stage2: PeStage::new(&mut scope.sub("stage2"), ch, n_heads)?,
        })
    }

    /// Encodes a 3-channel style image (spatial dims divisible by 8) into
    /// the two stage features at `H/4` and `H/8`.
    pub fn forward(&self, style: &Tensor) -> Result<StyleFeature> {
        let dims = style.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::dim(format!(
                "perception encoder expects (N,3,H,W), got {dims:?}"
            )));
        }
        let (h, w) = (dims[2], dims[3]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::dim(format!(
                "perception encoder needs H, W divisible by 8, got {h}x{w}"
            )));
        }
        let embedded = style
            .conv2d(&self.patch_w, 0, 4, 1, 1)?
            .broadcast_add(&self.patch_b.reshape((1, (), 1, 1))?)?;
        let stage1 = self.stage1.forward(&embedded)?;
        let down = stage1
            .conv2d(&self.down_w, 1, 2, 1, 1)?
            .broadcast_add(&self.down_b.reshape((1, (), 1, 1))?)?;
        let stage2 = self.stage2.forward(&down)?;
        Ok(StyleFeature { stage1, stage2 })
    }
}

/// Identity matrix as a tensor, used by tests and oracles.
pub fn eye(dim: usize, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0.0f64; dim * dim];
    for i in 0..dim {
        data[i * dim + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (dim, dim), device)?)
}

/// Instance statistics re-export point used by style losses; keeps the
/// extractor module self-descriptive for callers that only import it.
pub use scin::instance_stats;
