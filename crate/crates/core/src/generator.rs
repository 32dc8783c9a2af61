//! The stylization generator: content features and style features are fused
//! by cross-attention, then decoded by four upsampling blocks, each preceded
//! by a style realignment (SCIN) at its scale.

use candle_core::Tensor;
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::{PerceptionEncoder, PerceptualExtractor};
use crate::imaging::{build_pyramid, StylePyramid};
use crate::params::{Init, ParamStore, Scope};
use crate::scin::{adain, attention, instance_norm, StyleRealigner};

/// Where the style feature fed to cross-attention fusion comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSource {
    /// The perception encoder's stage-2 feature (default).
    Pe,
    /// The perceptual pyramid's relu4_1 feature of the style image.
    Vgg,
}

/// Architecture hyperparameters. All channel counts derive from `width`:
/// the perceptual pyramid runs `w..8w`, token and fused-feature dims are
/// `8w`, and the decoder narrows `8w → 4w → 2w → w → 3`. `width = 64`
/// reproduces the reference 512-channel layout; the desk-scale default is
/// 16.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base channel width `w`.
    pub width: usize,
    /// Attention head count for the style transformer and PE mixers.
    pub heads: usize,
    /// ε folded into instance statistics.
    pub epsilon: f64,
    /// Use the raw token sequence as the attention residual instead of the
    /// query projection.
    pub residual_from_input: bool,
    /// Style feature source for fusion.
    pub style_source: StyleSource,
    /// Train the perceptual extractor instead of freezing it
    /// (the learnable-style-encoder ablation).
    pub learnable_extractor: bool,
    /// Realign decoder features with learned affine parameters (default);
    /// when false, each decoder block matches the style's perceptual
    /// moments at its scale instead.
    #[serde(default = "default_true")]
    pub use_scin: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 16,
            heads: 4,
            epsilon: crate::scin::DEFAULT_EPSILON,
            residual_from_input: false,
            style_source: StyleSource::Pe,
            learnable_extractor: false,
            use_scin: true,
        }
    }
}

impl ModelConfig {
    /// Feature channels at the fusion grid (`8w`).
    pub fn fused_channels(&self) -> usize {
        8 * self.width
    }

    /// Channel count entering decoder block `i ∈ 1..=4`: `8w, 4w, 2w, w`.
    pub fn decoder_channels(&self) -> [usize; 4] {
        [8 * self.width, 4 * self.width, 2 * self.width, self.width]
    }
}

/// SANet-style cross-attention: queries from the normalized content feature,
/// keys from the normalized style feature, values from the raw style
/// feature, all through pointwise convolutions; the attended value is
/// projected and added residually to the content feature.
pub struct CrossAttentionFusion {
    q_w: Tensor,
    k_w: Tensor,
    v_w: Tensor,
    o_w: Tensor,
    o_b: Tensor,
    epsilon: f64,
}

impl CrossAttentionFusion {
    /// Builds projections for `channels`-wide features.
    pub fn new(scope: &mut Scope, channels: usize, epsilon: f64) -> Result<Self> {
        let shape = [channels, channels, 1, 1];
        Ok(CrossAttentionFusion {
            q_w: scope.param("q.weight", &shape, Init::FanIn)?,
            k_w: scope.param("k.weight", &shape, Init::FanIn)?,
            v_w: scope.param("v.weight", &shape, Init::FanIn)?,
            o_w: scope.param("o.weight", &shape, Init::FanIn)?,
            o_b: scope.param("o.bias", &[channels], Init::Zeros)?,
            epsilon,
        })
    }

    /// Fuses a content feature `(N,C,Hc,Wc)` with a style feature
    /// `(N,C,Hs,Ws)`; grids may differ, channels must match.
    pub fn fuse(&self, f_c: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        let (n, c, hc, wc) = f_c.dims4()?;
        let (ns, cs, hs, ws) = f_s.dims4()?;
        if n != ns || c != cs {
            return Err(Error::dim(format!(
                "fusion needs matching batch/channels, got {:?} vs {:?}",
                f_c.dims(),
                f_s.dims()
            )));
        }
        let q = instance_norm(f_c, self.epsilon)?.conv2d(&self.q_w, 0, 1, 1, 1)?;
        let k = instance_norm(f_s, self.epsilon)?.conv2d(&self.k_w, 0, 1, 1, 1)?;
        let v = f_s.conv2d(&self.v_w, 0, 1, 1, 1)?;
        let to_tokens = |t: &Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((n, c, l))?.transpose(1, 2)?.contiguous()?)
        };
        let qt = to_tokens(&q, hc * wc)?;
        let kt = to_tokens(&k, hs * ws)?;
        let vt = to_tokens(&v, hs * ws)?;
        let mixed = attention(&qt, &kt, &vt, 1, 1.0 / (c as f64).sqrt())?;
        let grid = mixed.transpose(1, 2)?.contiguous()?.reshape((n, c, hc, wc))?;
        let out = grid
            .conv2d(&self.o_w, 0, 1, 1, 1)?
            .broadcast_add(&self.o_b.reshape((1, (), 1, 1))?)?;
        Ok((f_c + out)?)
    }
}

/// Four-block upsampling decoder. Block `i` realigns its input against the
/// pyramid level matched to its scale (coarsest level at the deepest block),
/// upsamples ×2 (blocks 1–3), and convolves 3×3; blocks 1–3 end in ReLU, the
/// final block emits 3 channels through a sigmoid, so outputs live in [0,1].
pub struct Decoder {
    convs: Vec<(Tensor, Tensor)>,
}

impl Decoder {
    /// Builds the conv stack `8w → 4w → 2w → w → 3`.
    pub fn new(scope: &mut Scope, width: usize) -> Result<Self> {
        let chain = [8 * width, 4 * width, 2 * width, width, 3];
        let mut convs = Vec::new();
        for i in 0..4 {
            let mut s = scope.sub(&format!("block{}", i + 1));
            let w = s.param("weight", &[chain[i + 1], chain[i], 3, 3], Init::FanIn)?;
            let b = s.param("bias", &[chain[i + 1]], Init::Zeros)?;
            convs.push((w, b));
        }
        Ok(Decoder { convs })
    }

    /// Decodes a fused feature (grid `H/8`) into an image (grid `H`).
    pub fn decode(
        &self,
        f_cs: &Tensor,
        pyramid: &StylePyramid,
        realigner: &StyleRealigner,
    ) -> Result<Tensor> {
        let mut x = f_cs.clone();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let block = i + 1;
            // Block 1 (coarsest feature grid) gets pyramid level 3 (1/8
            // size); block 4 (finest) gets level 0 (source resolution).
            let level = pyramid.level(4 - block)?;
            x = realigner.realign(&x, level, block)?;
            if block < 4 {
                let (_, _, h, wd) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * wd)?;
            }
            x = x
                .conv2d(w, 1, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?;
            x = if block < 4 { x.relu()? } else { sigmoid(&x)? };
        }
        Ok(x)
    }

    /// Realignment-free decode: block `i` matches the moments of the style's
    /// perceptual feature at its scale (`style_features`, deepest first, must
    /// have channel counts `8w, 4w, 2w, w`).
    pub fn decode_adain(
        &self,
        f_cs: &Tensor,
        style_features: &[Tensor; 4],
        epsilon: f64,
    ) -> Result<Tensor> {
        let mut x = f_cs.clone();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let block = i + 1;
            x = adain(&x, &style_features[i], epsilon)?;
            if block < 4 {
                let (_, _, h, wd) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * wd)?;
            }
            x = x
                .conv2d(w, 1, 1, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?;
            x = if block < 4 { x.relu()? } else { sigmoid(&x)? };
        }
        Ok(x)
    }
}

/// The full stylization network: extractors, fusion, realignment, decoder.
pub struct Generator {
    /// Perceptual pyramid (content features and loss features).
    pub vgg: PerceptualExtractor,
    /// Perception encoder (style features).
    pub pe: PerceptionEncoder,
    /// Cross-attention fusion.
    pub fusion: CrossAttentionFusion,
    /// Style realignment stack shared by the decoder blocks.
    pub realigner: StyleRealigner,
    /// Upsampling decoder.
    pub decoder: Decoder,
    config: ModelConfig,
}

impl Generator {
    /// Builds every sub-network inside `store`. The perceptual extractor is
    /// created frozen unless `config.learnable_extractor` is set; everything
    /// else is trainable.
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        let mut root = store.root();
        let vgg = if config.learnable_extractor {
            PerceptualExtractor::new(&mut root.sub("vgg"), config.width)?
        } else {
            PerceptualExtractor::new(&mut root.frozen("vgg"), config.width)?
        };
        let pe = PerceptionEncoder::new(&mut root.sub("pe"), config.width, config.heads)?;
        let fusion = CrossAttentionFusion::new(
            &mut root.sub("fusion"),
            config.fused_channels(),
            config.epsilon,
        )?;
        let realigner = StyleRealigner::new(
            &mut root.sub("scin"),
            config.fused_channels(),
            config.heads,
            &config.decoder_channels(),
            config.residual_from_input,
            config.epsilon,
        )?;
        let decoder = Decoder::new(&mut root.sub("decoder"), config.width)?;
        Ok(Generator {
            vgg,
            pe,
            fusion,
            realigner,
            decoder,
            config,
        })
    }

    /// The configuration this generator was built with.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The style feature used for fusion, per the configured source.
    pub fn style_feature(&self, i_s: &Tensor) -> Result<Tensor> {
        match self.config.style_source {
            StyleSource::Pe => Ok(self.pe.forward(i_s)?.stage2),
            StyleSource::Vgg => self.vgg.layer(i_s, "relu4_1"),
        }
    }

    /// Full forward pass: content image + style image → stylized image with
    /// the content image's spatial size. Both inputs must be 3-channel with
    /// dims divisible by 8.
    pub fn stylize(&self, i_c: &Tensor, i_s: &Tensor) -> Result<Tensor> {
        for (name, img) in [("content", i_c), ("style", i_s)] {
            let d = img.dims();
            if d.len() != 4 || d[1] != 3 {
                return Err(Error::dim(format!(
                    "{name} image must be (N,3,H,W), got {d:?}"
                )));
            }
            if d[2] % 8 != 0 || d[3] % 8 != 0 {
                return Err(Error::dim(format!(
                    "{name} image dims must be divisible by 8, got {}x{}",
                    d[2], d[3]
                )));
            }
        }
        let f_c = self.vgg.layer(i_c, "relu4_1")?;
        let f_s = self.style_feature(i_s)?;
        let f_cs = self.fusion.fuse(&f_c, &f_s)?;
        if self.config.use_scin {
            let pyramid = build_pyramid(i_s)?;
            self.decoder.decode(&f_cs, &pyramid, &self.realigner)
        } else {
            let taps = ["relu4_1", "relu3_1", "relu2_1", "relu1_1"];
            let feats = self.vgg.features(i_s, &taps)?;
            let per_block = [
                feats["relu4_1"].clone(),
                feats["relu3_1"].clone(),
                feats["relu2_1"].clone(),
                feats["relu1_1"].clone(),
            ];
            self.decoder
                .decode_adain(&f_cs, &per_block, self.config.epsilon)
        }
    }
}
