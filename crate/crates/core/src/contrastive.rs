//! Instance-based contrastive learning over a grid of stylizations.
//!
//! An `n×n` grid holds every combination of `n` styles (rows) and `n`
//! contents (columns). A frozen instance encoder embeds each stylization;
//! two projection heads map embeddings into a style view and a content view.
//! In the style view, stylizations sharing a style row attract and pairs
//! differing in both indices repel; the content view is symmetric over
//! columns. Both views are InfoNCE losses over cosine similarities at
//! temperature τ.
//!
//! Every reduction over set-valued terms (negative sums, the final mean)
//! sorts its operands by value before summing, so the loss is *bitwise*
//! invariant under relabeling of style or content indices — not merely up
//! to float reassociation.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// Temperature controlling push/pull strength.
pub const DEFAULT_TAU: f64 = 0.3;

/// Output dimension of the frozen instance encoder.
pub const D_EMBED: usize = 512;

/// Output dimension of the projection heads.
pub const D_PROJ: usize = 128;

/// Frozen convolutional instance encoder (a desk-scale stand-in for a
/// pretrained image embedder): four stride-2 3×3 convs `3→64→128→256→512`
/// with ReLU, then global average pooling to a `D_EMBED` vector.
///
/// Construct it under a frozen scope; its weights must never train.
pub struct InstanceEncoder {
    convs: Vec<(Tensor, Tensor)>,
}

impl InstanceEncoder {
    /// Builds the encoder's conv stack.
    pub fn new(scope: &mut Scope) -> Result<Self> {
        let chain = [3usize, 64, 128, 256, D_EMBED];
        let mut convs = Vec::new();
        for i in 0..4 {
            let mut s = scope.sub(&format!("conv{}", i + 1));
            let w = s.param("weight", &[chain[i + 1], chain[i], 3, 3], Init::FanIn)?;
            let b = s.param("bias", &[chain[i + 1]], Init::Zeros)?;
            convs.push((w, b));
        }
        Ok(InstanceEncoder { convs })
    }

    /// Embeds a batch of 3-channel images into `(N, D_EMBED)`. Gradients
    /// flow through the images; the weights are detached by their scope.
    pub fn embed(&self, imgs: &Tensor) -> Result<Tensor> {
        let dims = imgs.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::dim(format!(
                "instance encoder expects (N,3,H,W), got {dims:?}"
            )));
        }
        let mut x = imgs.clone();
        for (w, b) in &self.convs {
            x = x
                .conv2d(w, 1, 2, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                .relu()?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }
}

/// Two-layer perceptron `D_EMBED → 256 → D_PROJ` with ReLU, followed by L2
/// normalization, so outputs are unit vectors.
pub struct ProjectionHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl ProjectionHead {
    /// Builds one head.
    pub fn new(scope: &mut Scope) -> Result<Self> {
        Ok(ProjectionHead {
            w1: scope.param("w1", &[D_EMBED, 256], Init::FanIn)?,
            b1: scope.param("b1", &[256], Init::Zeros)?,
            w2: scope.param("w2", &[256, D_PROJ], Init::FanIn)?,
            b2: scope.param("b2", &[D_PROJ], Init::Zeros)?,
        })
    }

    /// Projects `(N, D_EMBED)` embeddings to unit-norm `(N, D_PROJ)` rows.
    pub fn project(&self, e: &Tensor) -> Result<Tensor> {
        let h = e.matmul(&self.w1)?.broadcast_add(&self.b1)?.relu()?;
        let y = h.matmul(&self.w2)?.broadcast_add(&self.b2)?;
        let norm = (y.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(y.broadcast_div(&norm)?)
    }
}

/// The style-view and content-view projection heads.
pub struct ProjectionHeads {
    /// Head whose view groups stylizations by shared style.
    pub style: ProjectionHead,
    /// Head whose view groups stylizations by shared content.
    pub content: ProjectionHead,
}

impl ProjectionHeads {
    /// Builds both heads.
    pub fn new(scope: &mut Scope) -> Result<Self> {
        Ok(ProjectionHeads {
            style: ProjectionHead::new(&mut scope.sub("style"))?,
            content: ProjectionHead::new(&mut scope.sub("content"))?,
        })
    }
}

/// An `n×n` batch of stylizations: entry `(i, j)` is content `j` rendered in
/// style `i`.
pub struct StylizationGrid {
    images: Vec<Tensor>,
    n: usize,
}

impl StylizationGrid {
    /// Assembles a grid from row-major entries (`images[i*n + j]` holds
    /// style `i` × content `j`).
    pub fn from_entries(images: Vec<Tensor>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!(
                "contrastive grid needs n ≥ 2 (no positives exist otherwise), got n = {n}"
            )));
        }
        if images.len() != n * n {
            return Err(Error::dim(format!(
                "grid of size {n} needs {} entries, got {}",
                n * n,
                images.len()
            )));
        }
        Ok(StylizationGrid { images, n })
    }

    /// Grid side length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry for style `i`, content `j`.
    pub fn entry(&self, i: usize, j: usize) -> Result<&Tensor> {
        if i >= self.n || j >= self.n {
            return Err(Error::dim(format!(
                "grid index ({i},{j}) outside {0}x{0}",
                self.n
            )));
        }
        Ok(&self.images[i * self.n + j])
    }

    /// All entries, row-major, concatenated into one `(n², 3, H, W)` batch.
    pub fn batched(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.images.iter().collect();
        Ok(Tensor::cat(&refs, 0)?)
    }
}

/// Builds the full stylization grid by calling `stylize(content_j, style_i)`
/// for every pair. `n ≥ 2` is required.
pub fn build_grid<F>(stylize: F, contents: &[Tensor], styles: &[Tensor]) -> Result<StylizationGrid>
where
    F: Fn(&Tensor, &Tensor) -> Result<Tensor>,
{
    if contents.len() != styles.len() {
        return Err(Error::dim(format!(
            "grid needs equal counts, got {} contents vs {} styles",
            contents.len(),
            styles.len()
        )));
    }
    let n = styles.len();
    if n < 2 {
        return Err(Error::config(format!(
            "contrastive grid needs n ≥ 2 (no positives exist otherwise), got n = {n}"
        )));
    }
    let mut images = Vec::with_capacity(n * n);
    for style in styles {
        for content in contents {
            images.push(stylize(content, style)?);
        }
    }
    StylizationGrid::from_entries(images, n)
}

/// Sums a 1-D tensor after sorting it by value. The sum of a sorted
/// sequence is independent of the operands' original order, which makes
/// downstream losses exactly invariant under index relabelings. Sorting is
/// a differentiable gather, so gradients pass through untouched.
fn sorted_sum(t: &Tensor) -> Result<Tensor> {
    let idx = t.arg_sort_last_dim(true)?;
    let sorted = t.gather(&idx, D::Minus1)?;
    Ok(sorted.sum_keepdim(D::Minus1)?)
}

/// One InfoNCE view over projected grid embeddings `m: (n², d)`.
///
/// For each anchor, `mates(anchor_index)` lists its positives and
/// `rivals(anchor_index)` its negatives (flat grid indices). Each
/// (anchor, positive) pair contributes
/// `−log( exp(s_ap/τ) / (exp(s_ap/τ) + Σ_neg exp(s_an/τ)) )`,
/// and the view is the mean over pairs. With `self_similarity_form`, every
/// exponent uses the *named element's own* inner product instead of the
/// pair similarity — a printed-formula reading kept for comparison; it is
/// constant for unit-norm embeddings.
fn info_nce_view(
    m: &Tensor,
    n: usize,
    tau: f64,
    mates: impl Fn(usize) -> Vec<usize>,
    rivals: impl Fn(usize) -> Vec<usize>,
    self_similarity_form: bool,
) -> Result<Tensor> {
    let device = m.device();
    let sim = m.matmul(&m.t()?.contiguous()?)?; // (n², n²) inner products
    let total = n * n;
    let mut terms: Vec<Tensor> = Vec::new();
    for a in 0..total {
        let row = if self_similarity_form {
            // Each pair term reads the partner's self inner product.
            let diag_idx: Vec<u32> = (0..total as u32).collect();
            let idx = Tensor::from_vec(diag_idx, total, device)?;
            sim.gather(&idx.reshape((total, 1))?, 1)?.reshape(total)?
        } else {
            sim.narrow(0, a, 1)?.reshape(total)?
        };
        let rival_idx = rivals(a);
        let rivals_t = Tensor::from_vec(
            rival_idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            rival_idx.len(),
            device,
        )?;
        let rival_exps = row.index_select(&rivals_t, 0)?.affine(1.0 / tau, 0.0)?.exp()?;
        let denom_rest = sorted_sum(&rival_exps)?; // (1,)
        for p in mates(a) {
            let logit = row.narrow(0, p, 1)?.affine(1.0 / tau, 0.0)?;
            let e_ap = logit.exp()?;
            let term = ((e_ap + &denom_rest)?.log()? - logit)?;
            terms.push(term);
        }
    }
    let stacked = Tensor::cat(&terms.iter().collect::<Vec<_>>(), 0)?;
    let count = stacked.dims1()? as f64;
    Ok(sorted_sum(&stacked)?.affine(1.0 / count, 0.0)?.reshape(())?)
}

/// The contrastive loss over pre-projected embeddings.
///
/// `m_s`, `m_c`: `(n², d)` style-view and content-view projections of the
/// grid, row-major (`i·n + j` = style `i`, content `j`). In the style view,
/// anchor `(i,j)` attracts `(i,j′≠j)` and repels `(i′≠i, j′≠j)`; the
/// content view swaps the roles of `i` and `j`. Entries sharing exactly one
/// index with the anchor are neither positives nor negatives.
pub fn icl_loss_from_projected(
    m_s: &Tensor,
    m_c: &Tensor,
    n: usize,
    tau: f64,
    self_similarity_form: bool,
) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::config(format!(
            "contrastive loss needs n ≥ 2, got n = {n}"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be > 0, got {tau}")));
    }
    for (name, m) in [("style", m_s), ("content", m_c)] {
        let rows = m.dims2()?.0;
        if rows != n * n {
            return Err(Error::dim(format!(
                "{name} projections need {} rows for n = {n}, got {rows}",
                n * n
            )));
        }
    }
    let style_view = info_nce_view(
        m_s,
        n,
        tau,
        |a| {
            let (i, j) = (a / n, a % n);
            (0..n).filter(|&j2| j2 != j).map(|j2| i * n + j2).collect()
        },
        |a| {
            let (i, j) = (a / n, a % n);
            let mut v = Vec::new();
            for i2 in 0..n {
                for j2 in 0..n {
                    if i2 != i && j2 != j {
                        v.push(i2 * n + j2);
                    }
                }
            }
            v
        },
        self_similarity_form,
    )?;
    let content_view = info_nce_view(
        m_c,
        n,
        tau,
        |a| {
            let (i, j) = (a / n, a % n);
            (0..n).filter(|&i2| i2 != i).map(|i2| i2 * n + j).collect()
        },
        |a| {
            let (i, j) = (a / n, a % n);
            let mut v = Vec::new();
            for i2 in 0..n {
                for j2 in 0..n {
                    if i2 != i && j2 != j {
                        v.push(i2 * n + j2);
                    }
                }
            }
            v
        },
        self_similarity_form,
    )?;
    Ok((style_view + content_view)?)
}

/// Full contrastive loss of a stylization grid: embed every entry with the
/// frozen encoder, project into both views, and score.
pub fn icl_loss(
    grid: &StylizationGrid,
    encoder: &InstanceEncoder,
    heads: &ProjectionHeads,
    tau: f64,
    self_similarity_form: bool,
) -> Result<Tensor> {
    let embeddings = encoder.embed(&grid.batched()?)?;
    let m_s = heads.style.project(&embeddings)?;
    let m_c = heads.content.project(&embeddings)?;
    icl_loss_from_projected(&m_s, &m_c, grid.n(), tau, self_similarity_form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::seeded_rng;
    use crate::params::ParamStore;
    use candle_core::{Device, Var};
    use rand::Rng;

    fn cpu() -> Device {
        Device::Cpu
    }

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.gen::<f64>()).collect();
        Tensor::from_vec(data, (1, 3, 32, 32), &cpu()).unwrap()
    }

    fn rand_rows(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..rows * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(data, (rows, d), &cpu()).unwrap()
    }

    fn stack(seed: u64) -> (ParamStore, InstanceEncoder, ProjectionHeads) {
        let mut ps = ParamStore::new(seed, &cpu());
        let enc = InstanceEncoder::new(&mut ps.root().frozen("instance_encoder")).unwrap();
        let heads = ProjectionHeads::new(&mut ps.root().sub("projection")).unwrap();
        (ps, enc, heads)
    }

    #[test]
    fn encoder_is_frozen_and_deterministic() {
        let (ps, enc, _heads) = stack(1);
        assert!(ps.trainable_vars_under("instance_encoder").is_empty());
        let img = rand_image(2);
        let a = enc.embed(&img).unwrap();
        let b = enc.embed(&img).unwrap();
        assert_eq!(a.dims(), &[1, D_EMBED]);
        let av: Vec<f64> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f64> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn distinct_images_have_cosine_below_one() {
        let (_ps, enc, heads) = stack(3);
        let imgs = Tensor::cat(&[&rand_image(4), &rand_image(5)], 0).unwrap();
        let m = heads.style.project(&enc.embed(&imgs).unwrap()).unwrap();
        let sim = m.matmul(&m.t().unwrap().contiguous().unwrap()).unwrap();
        let s: Vec<Vec<f64>> = sim.to_vec2().unwrap();
        assert!(s[0][1] < 1.0 - 1e-9, "distinct images must not collapse, cos = {}", s[0][1]);
    }

    #[test]
    fn projections_are_unit_norm() {
        let (_ps, _enc, heads) = stack(6);
        let e = rand_rows(5, D_EMBED, 7);
        let m = heads.content.project(&e).unwrap();
        let norms = m.sqr().unwrap().sum(D::Minus1).unwrap();
        let nv: Vec<f64> = norms.to_vec1().unwrap();
        assert!(nv.iter().all(|&v| (v - 1.0).abs() < 1e-6), "unit norm within 1e-6");
    }

    #[test]
    fn grid_bookkeeping_and_size_validation() {
        let blend = |c: &Tensor, s: &Tensor| -> Result<Tensor> {
            Ok((c.affine(0.7, 0.0)? + s.affine(0.3, 0.0)?)?)
        };
        let contents = vec![rand_image(10), rand_image(11)];
        let styles = vec![rand_image(12), rand_image(13)];
        let grid = build_grid(blend, &contents, &styles).unwrap();
        assert_eq!(grid.n(), 2);
        for i in 0..2 {
            for j in 0..2 {
                let want = blend(&contents[j], &styles[i]).unwrap();
                let got = grid.entry(i, j).unwrap();
                let wv: Vec<f64> = want.flatten_all().unwrap().to_vec1().unwrap();
                let gv: Vec<f64> = got.flatten_all().unwrap().to_vec1().unwrap();
                assert_eq!(wv, gv, "entry ({i},{j}) must be stylize(c_{j}, s_{i})");
            }
        }
        assert!(matches!(
            build_grid(blend, &contents[..1], &styles[..1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_embeddings_give_the_analytic_uniform_value() {
        // All projected rows equal → every similarity is 1 → each view's
        // term is log(1 + #negatives); n = 2 has one negative per anchor.
        let row: Vec<f64> = vec![0.5; D_PROJ];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let norm = (0.25f64 * D_PROJ as f64).sqrt();
        let m = Tensor::from_vec(data, (4, D_PROJ), &cpu())
            .unwrap()
            .affine(1.0 / norm, 0.0)
            .unwrap();
        let loss = icl_loss_from_projected(&m, &m, 2, DEFAULT_TAU, false).unwrap();
        let l: f64 = loss.to_vec0().unwrap();
        assert!(
            (l - 2.0 * 2f64.ln()).abs() < 1e-9,
            "uniform similarities must give 2·ln 2, got {l}"
        );
    }

    #[test]
    fn matches_brute_force_oracle_at_n2() {
        let n = 2;
        let m_s = rand_rows(4, 6, 20);
        let m_c = rand_rows(4, 6, 21);
        let tau = DEFAULT_TAU;
        let loss: f64 = icl_loss_from_projected(&m_s, &m_c, n, tau, false)
            .unwrap()
            .to_vec0()
            .unwrap();

        let sv: Vec<Vec<f64>> = m_s.to_vec2().unwrap();
        let cv: Vec<Vec<f64>> = m_c.to_vec2().unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let view = |m: &Vec<Vec<f64>>, by_style: bool| {
            let mut terms = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let a = i * n + j;
                    // positives share the view's index; negatives differ in both
                    let mates: Vec<usize> = if by_style {
                        (0..n).filter(|&j2| j2 != j).map(|j2| i * n + j2).collect()
                    } else {
                        (0..n).filter(|&i2| i2 != i).map(|i2| i2 * n + j).collect()
                    };
                    let mut rivals = Vec::new();
                    for i2 in 0..n {
                        for j2 in 0..n {
                            if i2 != i && j2 != j {
                                rivals.push(i2 * n + j2);
                            }
                        }
                    }
                    for p in mates {
                        let e_ap = (dot(&m[a], &m[p]) / tau).exp();
                        let denom: f64 =
                            e_ap + rivals.iter().map(|&r| (dot(&m[a], &m[r]) / tau).exp()).sum::<f64>();
                        terms.push(-(e_ap / denom).ln());
                    }
                }
            }
            terms.iter().sum::<f64>() / terms.len() as f64
        };
        let want = view(&sv, true) + view(&cv, false);
        assert!(
            (loss - want).abs() < 1e-6,
            "loss {loss} vs brute force {want}"
        );
    }

    #[test]
    fn bitwise_invariant_under_style_relabeling() {
        let (_ps, enc, heads) = stack(30);
        let images: Vec<Tensor> = (0..9).map(|k| rand_image(40 + k)).collect();
        let grid = StylizationGrid::from_entries(images.clone(), 3).unwrap();
        let loss_a: f64 = icl_loss(&grid, &enc, &heads, DEFAULT_TAU, false)
            .unwrap()
            .to_vec0()
            .unwrap();

        // Swap style rows 0 and 2 — a pure relabeling.
        let mut permuted = Vec::new();
        for i in [2usize, 1, 0] {
            for j in 0..3 {
                permuted.push(images[i * 3 + j].clone());
            }
        }
        let grid_p = StylizationGrid::from_entries(permuted, 3).unwrap();
        let loss_b: f64 = icl_loss(&grid_p, &enc, &heads, DEFAULT_TAU, false)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert_eq!(
            loss_a.to_bits(),
            loss_b.to_bits(),
            "relabeling styles must not move the loss at all: {loss_a} vs {loss_b}"
        );
    }

    #[test]
    fn temperature_enters_nontrivially() {
        let m_s = rand_rows(4, 8, 50);
        let m_c = rand_rows(4, 8, 51);
        let a: f64 = icl_loss_from_projected(&m_s, &m_c, 2, 0.3, false)
            .unwrap()
            .to_vec0()
            .unwrap();
        let b: f64 = icl_loss_from_projected(&m_s, &m_c, 2, 0.6, false)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert!((a - b).abs() > 1e-9, "doubling τ must change the loss");
    }

    #[test]
    fn printed_self_similarity_form_is_constant_on_unit_vectors() {
        let m = rand_rows(4, 8, 60);
        let norm = (m.sqr().unwrap().sum_keepdim(D::Minus1).unwrap() + 1e-12)
            .unwrap()
            .sqrt()
            .unwrap();
        let m = m.broadcast_div(&norm).unwrap();
        let loss: f64 = icl_loss_from_projected(&m, &m, 2, DEFAULT_TAU, true)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert!(
            (loss - 2.0 * 2f64.ln()).abs() < 1e-9,
            "self-similarity exponents are constant for unit vectors, got {loss}"
        );
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let m_s = Var::from_tensor(&rand_rows(4, 8, 70)).unwrap();
        let m_c = Var::from_tensor(&rand_rows(4, 8, 71)).unwrap();
        let loss = icl_loss_from_projected(m_s.as_tensor(), m_c.as_tensor(), 2, 0.3, false).unwrap();
        let before: f64 = loss.to_vec0().unwrap();
        let grads = loss.backward().unwrap();
        let lr = 1e-2;
        for var in [&m_s, &m_c] {
            let g = grads.get(var).expect("loss must reach the embeddings");
            var.set(&(var.as_tensor() - g.affine(lr, 0.0).unwrap()).unwrap()).unwrap();
        }
        let after: f64 = icl_loss_from_projected(m_s.as_tensor(), m_c.as_tensor(), 2, 0.3, false)
            .unwrap()
            .to_vec0()
            .unwrap();
        assert!(after < before, "small step along −∇ must reduce the loss ({before} → {after})");
    }

    #[test]
    fn rejects_undersized_grids_and_bad_tau() {
        let m = rand_rows(1, 8, 80);
        assert!(matches!(
            icl_loss_from_projected(&m, &m, 1, 0.3, false),
            Err(Error::Config(_))
        ));
        let m4 = rand_rows(4, 8, 81);
        assert!(matches!(
            icl_loss_from_projected(&m4, &m4, 2, 0.0, false),
            Err(Error::Config(_))
        ));
    }
}
