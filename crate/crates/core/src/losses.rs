//! Loss functions: perceptual content and style terms, patch-level
//! adversarial losses, the self-reconstruction identity term, and the
//! weighted total objective.
//!
//! All distances are mean-reduced squared L2 — smooth everywhere, so
//! finite-difference gradient checks are well-posed even at zero distance.

use candle_core::Tensor;
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::{PerceptualExtractor, PERCEPTUAL_LAYERS};
use crate::generator::Generator;
use crate::params::{Init, Scope};
use crate::scin::{instance_stats, DEFAULT_EPSILON};

/// Weights of the total objective and the identity term's internal pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// λ₁, multiplies the style loss.
    pub style: f64,
    /// λ₂, multiplies the content loss.
    pub content: f64,
    /// λ₃, multiplies the identity loss.
    pub identity: f64,
    /// λ₄, multiplies the generator's adversarial loss.
    pub adversarial: f64,
    /// λ₅, multiplies the contrastive loss.
    pub contrastive: f64,
    /// Pixel-reconstruction weight inside the identity loss.
    pub identity_pixel: f64,
    /// Feature-reconstruction weight inside the identity loss.
    pub identity_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            style: 1.0,
            content: 1.0,
            identity: 5.0,
            adversarial: 1.0,
            contrastive: 0.3,
            identity_pixel: 50.0,
            identity_feature: 1.0,
        }
    }
}

impl LossWeights {
    /// All weights must be non-negative.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("style", self.style),
            ("content", self.content),
            ("identity", self.identity),
            ("adversarial", self.adversarial),
            ("contrastive", self.contrastive),
            ("identity_pixel", self.identity_pixel),
            ("identity_feature", self.identity_feature),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!(
                    "loss weight {name} must be ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared difference of two same-shaped tensors, as a scalar tensor.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "mse over mismatched shapes {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean-reduced squared distance between the channelwise statistics (mean
/// and standard deviation) of two feature maps. Spatial sizes may differ;
/// the statistics compare per channel.
pub fn style_stat_distance(f_a: &Tensor, f_b: &Tensor) -> Result<Tensor> {
    let sa = instance_stats(f_a, DEFAULT_EPSILON)?;
    let sb = instance_stats(f_b, DEFAULT_EPSILON)?;
    Ok((mse(&sa.mu, &sb.mu)? + mse(&sa.sigma, &sb.sigma)?)?)
}

/// Content loss: summed feature distances at the two deepest perceptual
/// taps, relu4_1 and relu5_1.
pub fn content_loss(
    i_cs: &Tensor,
    i_c: &Tensor,
    extractor: &PerceptualExtractor,
) -> Result<Tensor> {
    let layers = ["relu4_1", "relu5_1"];
    let fa = extractor.features(i_cs, &layers)?;
    let fb = extractor.features(i_c, &layers)?;
    let mut total = mse(&fa["relu4_1"], &fb["relu4_1"])?;
    total = (total + mse(&fa["relu5_1"], &fb["relu5_1"])?)?;
    Ok(total)
}

/// Style loss: statistics distances summed over all five perceptual taps.
pub fn style_loss(i_cs: &Tensor, i_s: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    let fa = extractor.features(i_cs, &PERCEPTUAL_LAYERS)?;
    let fb = extractor.features(i_s, &PERCEPTUAL_LAYERS)?;
    let mut total: Option<Tensor> = None;
    for layer in PERCEPTUAL_LAYERS {
        let term = style_stat_distance(&fa[layer], &fb[layer])?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("five layers"))
}

/// Patch-level discriminator: stride-2 4×4 convolutions with LeakyReLU(0.2)
/// narrowing `3 → w → 2w → 4w`, then a stride-1 4×4 conv to one channel and
/// a sigmoid. Outputs a realness grid in `(δ, 1−δ)` with spatial size > 1
/// for inputs of 24 pixels and up.
pub struct Discriminator {
    convs: Vec<(Tensor, Tensor)>,
    final_w: Tensor,
    final_b: Tensor,
}

/// Clamp bound keeping `log D` and `log(1−D)` finite.
pub const SCORE_CLAMP: f64 = 1e-7;

impl Discriminator {
    /// Builds the critic at base width `width`.
    pub fn new(scope: &mut Scope, width: usize) -> Result<Self> {
        let chain = [3, width, 2 * width, 4 * width];
        let mut convs = Vec::new();
        for i in 0..3 {
            let mut s = scope.sub(&format!("conv{}", i + 1));
            let w = s.param("weight", &[chain[i + 1], chain[i], 4, 4], Init::FanIn)?;
            let b = s.param("bias", &[chain[i + 1]], Init::Zeros)?;
            convs.push((w, b));
        }
        let mut s = scope.sub("final");
        let final_w = s.param("weight", &[1, 4 * width, 4, 4], Init::FanIn)?;
        let final_b = s.param("bias", &[1], Init::Zeros)?;
        Ok(Discriminator {
            convs,
            final_w,
            final_b,
        })
    }

    /// Spatial size of the score grid for an (H, W) input, or `None` when
    /// the input is too small to convolve.
    fn patch_grid(mut h: usize, mut w: usize) -> Option<(usize, usize)> {
        for _ in 0..3 {
            if h < 2 || w < 2 {
                return None;
            }
            // k4 s2 p1: out = (in + 2 − 4)/2 + 1.
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
        if h < 2 || w < 2 {
            return None;
        }
        // k4 s1 p1: out = in − 1.
        Some((h - 1, w - 1))
    }

    fn forward(&self, imgs: &Tensor, detach_weights: bool) -> Result<Tensor> {
        let dims = imgs.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::dim(format!(
                "discriminator expects (N,3,H,W), got {dims:?}"
            )));
        }
        match Self::patch_grid(dims[2], dims[3]) {
            Some((gh, gw)) if gh * gw > 1 => {}
            _ => {
                return Err(Error::dim(format!(
                    "discriminator needs a patch grid larger than 1x1 for {}x{} input; use inputs of at least 24 pixels",
                    dims[2], dims[3]
                )))
            }
        }
        let grab = |t: &Tensor| if detach_weights { t.detach() } else { t.clone() };
        let mut x = imgs.clone();
        for (w, b) in &self.convs {
            x = x
                .conv2d(&grab(w), 1, 2, 1, 1)?
                .broadcast_add(&grab(b).reshape((1, (), 1, 1))?)?;
            // LeakyReLU(0.2) as max(x, 0.2x).
            x = x.maximum(&x.affine(0.2, 0.0)?)?;
        }
        let logits = x
            .conv2d(&grab(&self.final_w), 1, 1, 1, 1)?
            .broadcast_add(&grab(&self.final_b).reshape((1, (), 1, 1))?)?;
        Ok(sigmoid(&logits)?.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)?)
    }

    /// Realness score grid; gradients flow into the critic's weights.
    pub fn score(&self, imgs: &Tensor) -> Result<Tensor> {
        self.forward(imgs, false)
    }

    /// Realness score grid with weights detached: gradients flow through
    /// the critic into the images, never into its parameters.
    pub fn score_frozen(&self, imgs: &Tensor) -> Result<Tensor> {
        self.forward(imgs, true)
    }
}

/// Critic objective from score grids: `−E[log D(real)] − E[log(1 − D(fake))]`.
pub fn discriminator_loss(scores_real: &Tensor, scores_fake: &Tensor) -> Result<Tensor> {
    let real_term = scores_real.log()?.mean_all()?.affine(-1.0, 0.0)?;
    let fake_term = scores_fake
        .affine(-1.0, 1.0)?
        .log()?
        .mean_all()?
        .affine(-1.0, 0.0)?;
    Ok((real_term + fake_term)?)
}

/// Non-saturating generator objective from fake scores: `−E[log D(fake)]`.
pub fn generator_adversarial_loss(scores_fake: &Tensor) -> Result<Tensor> {
    Ok(scores_fake.log()?.mean_all()?.affine(-1.0, 0.0)?)
}

/// Both adversarial losses with the gradient-separation contracts applied:
/// the critic sees detached fakes (its loss never reaches the generator),
/// and the generator loss runs the critic with detached weights (it never
/// reaches the critic's parameters).
pub fn adversarial_losses(
    fake: &Tensor,
    real: &Tensor,
    d: &Discriminator,
) -> Result<(Tensor, Tensor)> {
    if fake.dims()[0] == 0 || real.dims()[0] == 0 {
        return Err(Error::dim("adversarial losses need non-empty batches".to_string()));
    }
    let d_loss = discriminator_loss(&d.score(real)?, &d.score(&fake.detach())?)?;
    let g_loss = generator_adversarial_loss(&d.score_frozen(fake)?)?;
    Ok((g_loss, d_loss))
}

/// Identity loss from precomputed self-stylizations `I_cc = G(c, c)` and
/// `I_ss = G(s, s)`: weighted pixel reconstruction plus feature
/// reconstruction over all five perceptual taps.
pub fn identity_loss_from(
    i_cc: &Tensor,
    i_ss: &Tensor,
    i_c: &Tensor,
    i_s: &Tensor,
    extractor: &PerceptualExtractor,
    pixel_weight: f64,
    feature_weight: f64,
) -> Result<Tensor> {
    let pixel = (mse(i_cc, i_c)? + mse(i_ss, i_s)?)?;
    let f_cc = extractor.features(i_cc, &PERCEPTUAL_LAYERS)?;
    let f_c = extractor.features(i_c, &PERCEPTUAL_LAYERS)?;
    let f_ss = extractor.features(i_ss, &PERCEPTUAL_LAYERS)?;
    let f_s = extractor.features(i_s, &PERCEPTUAL_LAYERS)?;
    let mut feat: Option<Tensor> = None;
    for layer in PERCEPTUAL_LAYERS {
        let term = (mse(&f_cc[layer], &f_c[layer])? + mse(&f_ss[layer], &f_s[layer])?)?;
        feat = Some(match feat {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let feat = feat.expect("five layers");
    Ok((pixel.affine(pixel_weight, 0.0)? + feat.affine(feature_weight, 0.0)?)?)
}

/// Identity loss: stylizing an image with itself must reproduce it, both in
/// pixels and in features. This is the self-stylization reading; see
/// [`identity_loss_to_inputs`] for the alternative that anchors the
/// cross-stylization to both of its inputs directly.
pub fn identity_loss(
    generator: &Generator,
    i_c: &Tensor,
    i_s: &Tensor,
    extractor: &PerceptualExtractor,
    pixel_weight: f64,
    feature_weight: f64,
) -> Result<Tensor> {
    let i_cc = generator.stylize(i_c, i_c)?;
    let i_ss = generator.stylize(i_s, i_s)?;
    identity_loss_from(&i_cc, &i_ss, i_c, i_s, extractor, pixel_weight, feature_weight)
}

/// Alternative identity form: anchors one stylization `I_cs` to *both* of
/// its inputs (pixel and five-tap feature distance to `I_c` and to `I_s`).
///
/// This variant fights the style objective head-on — a faithful stylization
/// cannot match content and style pixels simultaneously, and at high pixel
/// weight it collapses stylization toward averaging the inputs. It is kept
/// for comparison studies only; training uses [`identity_loss`], which
/// penalizes self-stylizations `G(c, c)` and `G(s, s)` instead and is
/// neutral to the style objective.
pub fn identity_loss_to_inputs(
    i_cs: &Tensor,
    i_c: &Tensor,
    i_s: &Tensor,
    extractor: &PerceptualExtractor,
    pixel_weight: f64,
    feature_weight: f64,
) -> Result<Tensor> {
    identity_loss_from(i_cs, i_cs, i_c, i_s, extractor, pixel_weight, feature_weight)
}

/// The weighted component losses as tensors, ready for backprop.
pub struct LossTerms {
    pub style: Tensor,
    pub content: Tensor,
    pub identity: Tensor,
    pub adversarial_g: Tensor,
    pub contrastive: Tensor,
}

/// Named scalar losses plus the weighted total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    pub content: f64,
    pub style: f64,
    pub identity: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBundle {
    /// Recomputes the weighted total from the stored components in the same
    /// fixed order the tensor path uses. The result must match `total`
    /// bitwise.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        self.style * w.style
            + self.content * w.content
            + self.identity * w.identity
            + self.adversarial_g * w.adversarial
            + self.contrastive * w.contrastive
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.reshape(())?.to_vec0()?)
}

/// Combines component losses into the weighted total (a tensor for
/// backprop) and a reported [`LossBundle`]. Any non-finite component is an
/// error naming the component. The weighted sum is accumulated in a fixed
/// left-to-right order so the bundle's `total` is bit-reproducible.
pub fn total_loss(
    terms: &LossTerms,
    adversarial_d: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBundle)> {
    weights.validate()?;
    let named = [
        ("style", &terms.style),
        ("content", &terms.content),
        ("identity", &terms.identity),
        ("adversarial_g", &terms.adversarial_g),
        ("adversarial_d", adversarial_d),
        ("contrastive", &terms.contrastive),
    ];
    for (name, t) in named {
        if !scalar(t)?.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    let total = terms
        .style
        .affine(weights.style, 0.0)?
        .add(&terms.content.affine(weights.content, 0.0)?)?
        .add(&terms.identity.affine(weights.identity, 0.0)?)?
        .add(&terms.adversarial_g.affine(weights.adversarial, 0.0)?)?
        .add(&terms.contrastive.affine(weights.contrastive, 0.0)?)?;
    let bundle = LossBundle {
        content: scalar(&terms.content)?,
        style: scalar(&terms.style)?,
        identity: scalar(&terms.identity)?,
        adversarial_g: scalar(&terms.adversarial_g)?,
        adversarial_d: scalar(adversarial_d)?,
        contrastive: scalar(&terms.contrastive)?,
        total: scalar(&total)?,
    };
    Ok((total, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::ModelConfig;
    use crate::imaging::seeded_rng;
    use crate::params::ParamStore;
    use candle_core::{Device, Var};
    use rand::Rng;

    fn cpu() -> Device {
        Device::Cpu
    }

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_vec(data, shape, &cpu()).unwrap()
    }

    fn vgg(seed: u64, width: usize) -> (ParamStore, PerceptualExtractor) {
        let mut ps = ParamStore::new(seed, &cpu());
        let v = PerceptualExtractor::new(&mut ps.root().frozen("vgg"), width).unwrap();
        (ps, v)
    }

    #[test]
    fn content_loss_zero_at_identity_and_symmetric() {
        let (_ps, v) = vgg(1, 4);
        let x = rand_image(&[1, 3, 32, 32], 2);
        let y = rand_image(&[1, 3, 32, 32], 3);
        let zero: f64 = content_loss(&x, &x, &v).unwrap().to_vec0().unwrap();
        assert_eq!(zero, 0.0);
        let ab: f64 = content_loss(&x, &y, &v).unwrap().to_vec0().unwrap();
        let ba: f64 = content_loss(&y, &x, &v).unwrap().to_vec0().unwrap();
        assert!((ab - ba).abs() < 1e-12, "squared distance is symmetric");
        assert!(ab > 0.0);
    }

    #[test]
    fn content_loss_matches_compositional_oracle() {
        let (_ps, v) = vgg(4, 4);
        let x = rand_image(&[1, 3, 32, 32], 5);
        let y = rand_image(&[1, 3, 32, 32], 6);
        let got: f64 = content_loss(&x, &y, &v).unwrap().to_vec0().unwrap();
        let mut want = 0.0;
        for layer in ["relu4_1", "relu5_1"] {
            let fa: Vec<f64> = v.layer(&x, layer).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let fb: Vec<f64> = v.layer(&y, layer).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let se: f64 = fa.iter().zip(&fb).map(|(a, b)| (a - b) * (a - b)).sum();
            want += se / fa.len() as f64;
        }
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn style_loss_zero_at_identity_and_shuffle_invariant_stats() {
        let (_ps, v) = vgg(7, 4);
        let x = rand_image(&[1, 3, 32, 32], 8);
        let zero: f64 = style_loss(&x, &x, &v).unwrap().to_vec0().unwrap();
        assert_eq!(zero, 0.0);

        // Channelwise statistics ignore spatial arrangement: a feature map
        // and its per-channel spatial shuffle have ≈ zero stat distance.
        let f = rand_image(&[1, 4, 4, 4], 9);
        let fv: Vec<f64> = f.flatten_all().unwrap().to_vec1().unwrap();
        let mut shuffled = fv.clone();
        let mut rng = seeded_rng(10);
        for c in 0..4 {
            let s = &mut shuffled[c * 16..(c + 1) * 16];
            for i in (1..16).rev() {
                s.swap(i, rng.gen_range(0..=i));
            }
        }
        let g = Tensor::from_vec(shuffled, (1, 4, 4, 4), &cpu()).unwrap();
        let d: f64 = style_stat_distance(&f, &g).unwrap().to_vec0().unwrap();
        assert!(d < 1e-9, "stats are permutation invariant, got {d}");
    }

    #[test]
    fn style_loss_matches_stats_oracle() {
        let (_ps, v) = vgg(11, 4);
        let x = rand_image(&[1, 3, 32, 32], 12);
        let y = rand_image(&[1, 3, 32, 32], 13);
        let got: f64 = style_loss(&x, &y, &v).unwrap().to_vec0().unwrap();

        let mut want = 0.0;
        for layer in PERCEPTUAL_LAYERS {
            let fa = v.layer(&x, layer).unwrap();
            let fb = v.layer(&y, layer).unwrap();
            let stats = |t: &Tensor| -> (Vec<f64>, Vec<f64>) {
                let d = t.dims4().unwrap();
                let vals: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
                let (c, hw) = (d.1, d.2 * d.3);
                let mut mus = Vec::new();
                let mut sigmas = Vec::new();
                for ch in 0..c {
                    let s = &vals[ch * hw..(ch + 1) * hw];
                    let m = s.iter().sum::<f64>() / hw as f64;
                    let var = s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
                    mus.push(m);
                    sigmas.push((var + DEFAULT_EPSILON).sqrt());
                }
                (mus, sigmas)
            };
            let (ma, sa) = stats(&fa);
            let (mb, sb) = stats(&fb);
            let c = ma.len() as f64;
            want += ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c;
            want += sa.iter().zip(&sb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c;
        }
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    fn fresh_discriminator(seed: u64) -> (ParamStore, Discriminator) {
        let mut ps = ParamStore::new(seed, &cpu());
        let d = Discriminator::new(&mut ps.root().sub("critic"), 4).unwrap();
        (ps, d)
    }

    #[test]
    fn indifferent_critic_gives_analytic_losses() {
        let (mut ps, d) = fresh_discriminator(20);
        // Zero the final layer: logits ≡ 0, scores ≡ 0.5 exactly.
        let mut values = ps.export();
        values.insert(
            "critic.final.weight".into(),
            Tensor::zeros((1, 16, 4, 4), candle_core::DType::F64, &cpu()).unwrap(),
        );
        ps.import(&values).unwrap();
        let fake = rand_image(&[1, 3, 32, 32], 21);
        let real = rand_image(&[1, 3, 32, 32], 22);
        let (g, dl) = adversarial_losses(&fake, &real, &d).unwrap();
        let g: f64 = g.to_vec0().unwrap();
        let dl: f64 = dl.to_vec0().unwrap();
        assert!((g - 2f64.ln()).abs() < 1e-12, "g_loss at D≡0.5 is ln 2, got {g}");
        assert!((dl - 2.0 * 2f64.ln()).abs() < 1e-12, "d_loss at D≡0.5 is 2·ln 2, got {dl}");
    }

    #[test]
    fn perfect_scores_drive_critic_loss_to_zero() {
        let real = Tensor::full(1.0 - SCORE_CLAMP, (1, 1, 3, 3), &cpu()).unwrap();
        let fake = Tensor::full(SCORE_CLAMP, (1, 1, 3, 3), &cpu()).unwrap();
        let d: f64 = discriminator_loss(&real, &fake).unwrap().to_vec0().unwrap();
        assert!(d.abs() < 1e-6, "perfect separation gives ≈ 0, got {d}");
    }

    #[test]
    fn score_grid_is_patch_based_and_bounded() {
        let (_ps, d) = fresh_discriminator(23);
        let img = rand_image(&[2, 3, 64, 64], 24);
        let s = d.score(&img).unwrap();
        assert_eq!(s.dims(), &[2, 1, 7, 7]);
        let v: Vec<f64> = s.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        // Too-small inputs collapse the grid and are rejected.
        let tiny = rand_image(&[1, 3, 8, 8], 25);
        assert!(matches!(d.score(&tiny), Err(Error::Dimension(_))));
    }

    #[test]
    fn adversarial_gradients_separate_generator_and_critic() {
        let (ps, d) = fresh_discriminator(26);
        // A stand-in generator parameter: fake = gen_param ⊙ noise.
        let gen_param = Var::from_tensor(&rand_image(&[1, 3, 32, 32], 27)).unwrap();
        let noise = rand_image(&[1, 3, 32, 32], 28);
        let fake = gen_param.as_tensor().mul(&noise).unwrap();
        let real = rand_image(&[1, 3, 32, 32], 29);
        let (g_loss, d_loss) = adversarial_losses(&fake, &real, &d).unwrap();

        let d_grads = d_loss.backward().unwrap();
        assert!(
            d_grads.get(&gen_param).is_none(),
            "critic loss must not reach generator parameters"
        );
        let mut critic_touched = false;
        for (_, var) in ps.trainable_vars_under("critic") {
            if d_grads.get(&var).is_some() {
                critic_touched = true;
            }
        }
        assert!(critic_touched, "critic loss must reach critic parameters");

        let g_grads = g_loss.backward().unwrap();
        assert!(
            g_grads.get(&gen_param).is_some(),
            "generator loss must reach generator parameters"
        );
        for (name, var) in ps.trainable_vars_under("critic") {
            assert!(
                g_grads.get(&var).is_none(),
                "generator loss must not reach critic parameter {name}"
            );
        }
    }

    #[test]
    fn identity_loss_zero_for_identity_map_and_matches_oracle() {
        let (_ps, v) = vgg(30, 4);
        let c = rand_image(&[1, 3, 32, 32], 31);
        let s = rand_image(&[1, 3, 32, 32], 32);
        let zero: f64 = identity_loss_from(&c, &s, &c, &s, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert_eq!(zero, 0.0, "an identity generator has zero identity loss");

        let mut ps = ParamStore::new(33, &cpu());
        let g = Generator::new(
            &mut ps,
            ModelConfig {
                width: 4,
                heads: 2,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let got: f64 = identity_loss(&g, &c, &s, &v, 50.0, 1.0).unwrap().to_vec0().unwrap();
        let i_cc = g.stylize(&c, &c).unwrap();
        let i_ss = g.stylize(&s, &s).unwrap();
        let want: f64 = identity_loss_from(&i_cc, &i_ss, &c, &s, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn dual_anchor_identity_conflicts_where_self_stylization_is_neutral() {
        let (_ps, v) = vgg(60, 4);
        let c = rand_image(&[1, 3, 32, 32], 61);
        let s = rand_image(&[1, 3, 32, 32], 62);

        // A perfect reconstruction of the content is exactly what the
        // self-stylization form rewards but the dual-anchor form punishes:
        // the stylization still differs from the style input.
        let anchored: f64 = identity_loss_to_inputs(&c, &c, &s, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert!(anchored > 1.0, "distance to the style anchor remains: {anchored}");

        // It vanishes only in the degenerate case where content, style, and
        // stylization all coincide.
        let zero: f64 = identity_loss_to_inputs(&c, &c, &c, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert_eq!(zero, 0.0);

        // The two forms are genuinely different objectives.
        let i_cs = rand_image(&[1, 3, 32, 32], 63);
        let dual: f64 = identity_loss_to_inputs(&i_cs, &c, &s, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        let selfform: f64 = identity_loss_from(&c, &s, &c, &s, &v, 50.0, 1.0)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert_ne!(dual, selfform);
    }

    fn unit_terms() -> LossTerms {
        let one = || Tensor::full(1.0f64, (), &cpu()).unwrap();
        LossTerms {
            style: one(),
            content: one(),
            identity: one(),
            adversarial_g: one(),
            contrastive: one(),
        }
    }

    #[test]
    fn total_weights_components_and_decomposes_bitwise() {
        let weights = LossWeights::default();
        let terms = unit_terms();
        let d = Tensor::full(1.0f64, (), &cpu()).unwrap();
        let (total_t, bundle) = total_loss(&terms, &d, &weights).unwrap();
        let total: f64 = total_t.to_vec0().unwrap();
        assert!((total - 8.3).abs() < 1e-12, "1+1+5+1+0.3 = 8.3, got {total}");
        assert_eq!(
            bundle.total.to_bits(),
            bundle.recompute_total(&weights).to_bits(),
            "stored total must equal the recomputed weighted sum bitwise"
        );

        let zero_weights = LossWeights {
            style: 0.0,
            content: 0.0,
            identity: 0.0,
            adversarial: 0.0,
            contrastive: 0.0,
            ..weights
        };
        let (zt, _) = total_loss(&terms, &d, &zero_weights).unwrap();
        let z: f64 = zt.to_vec0().unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn non_finite_component_is_named() {
        let weights = LossWeights::default();
        let mut terms = unit_terms();
        terms.style = Tensor::full(f64::NAN, (), &cpu()).unwrap();
        let d = Tensor::full(1.0f64, (), &cpu()).unwrap();
        let err = total_loss(&terms, &d, &weights).unwrap_err();
        match err {
            Error::NonFinite(what) => assert!(what.contains("style"), "got {what}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn weights_must_be_non_negative() {
        let bad = LossWeights {
            style: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
