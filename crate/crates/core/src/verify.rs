//! Verification suite: every numerical contract checked against an
//! independent reimplementation — plain-loop arithmetic for forward oracles,
//! central differences for gradients. Each check reports its tolerance and
//! the worst error it measured.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::icl_loss_from_projected;
use crate::error::{Error, Result};
use crate::extractors::PerceptualExtractor;
use crate::generator::CrossAttentionFusion;
use crate::imaging::seeded_rng;
use crate::losses::style_loss;
use crate::params::ParamStore;
use crate::scin::{
    adain, attention_weights, instance_norm, instance_stats, scin_apply, Msa, StyleRealigner,
};

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    /// What was checked.
    pub name: String,
    /// Largest error the check accepts.
    pub tolerance: f64,
    /// Worst error actually measured.
    pub measured: f64,
    /// Whether `measured` is acceptable.
    pub pass: bool,
}

impl CheckResult {
    fn within(name: &str, tolerance: f64, measured: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            tolerance,
            measured,
            pass: measured.is_finite() && measured <= tolerance,
        }
    }
}

fn cpu_rand(shape: &[usize], seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1()?)
}

/// Instance statistics must stay strictly positive on constant (zero
/// variance) inputs — the ε under the square root is what guarantees it.
pub fn check_sigma_positivity(epsilon: f64, device: &Device) -> Result<CheckResult> {
    let constant = Tensor::full(0.7f64, (2, 3, 4, 4), device)?;
    let stats = instance_stats(&constant, epsilon)?;
    let sigmas = flat(&stats.sigma)?;
    let min = sigmas.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(CheckResult {
        name: "sigma_positivity".to_string(),
        tolerance: 0.0,
        measured: min,
        pass: min > 0.0,
    })
}

/// Moment transfer: over 100 random shape-varied pairs, the output of
/// moment matching carries the style's channel statistics.
pub fn check_adain_moments(epsilon: f64, device: &Device) -> Result<CheckResult> {
    let mut rng = seeded_rng(11);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let n = rng.gen_range(1..=3);
        let c = *[1usize, 2, 5, 8].get(rng.gen_range(0..4)).unwrap();
        let (hc, wc) = (rng.gen_range(2..=9), rng.gen_range(2..=9));
        let (hs, ws) = (rng.gen_range(2..=9), rng.gen_range(2..=9));
        let f_c = cpu_rand(&[n, c, hc, wc], 1000 + trial, device)?;
        let f_s = cpu_rand(&[n, c, hs, ws], 2000 + trial, device)?;
        let out = adain(&f_c, &f_s, epsilon)?;
        let got = instance_stats(&out, epsilon)?;
        let want = instance_stats(&f_s, epsilon)?;
        for (a, b) in [(&got.mu, &want.mu), (&got.sigma, &want.sigma)] {
            for (x, y) in flat(a)?.iter().zip(flat(b)?.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(CheckResult::within("adain_moments", 1e-4, worst))
}

/// A neutral affine pair `(γ≡1, β≡0)` must reproduce instance
/// normalization exactly (bit for bit).
pub fn check_scin_neutrality(epsilon: f64, device: &Device) -> Result<CheckResult> {
    let f = cpu_rand(&[2, 5, 6, 7], 21, device)?;
    let gamma = Tensor::ones((2, 5, 1, 1), DType::F64, device)?;
    let beta = Tensor::zeros((2, 5, 1, 1), DType::F64, device)?;
    let scin = flat(&scin_apply(&f, &gamma, &beta, epsilon)?)?;
    let plain = flat(&instance_norm(&f, epsilon)?)?;
    let mut worst = 0.0f64;
    for (a, b) in scin.iter().zip(&plain) {
        if a.to_bits() != b.to_bits() {
            worst = worst.max((a - b).abs().max(f64::MIN_POSITIVE));
        }
    }
    Ok(CheckResult::within("scin_neutrality", 0.0, worst))
}

/// Feeding the style's own statistics as the affine parameters reproduces
/// direct moment matching.
pub fn check_scin_matches_adain(epsilon: f64, device: &Device) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let f_c = cpu_rand(&[2, 4, 5, 5], 3000 + trial, device)?;
        let f_s = cpu_rand(&[2, 4, 6, 3], 4000 + trial, device)?;
        let stats = instance_stats(&f_s, epsilon)?;
        let via_scin = flat(&scin_apply(&f_c, &stats.sigma, &stats.mu, epsilon)?)?;
        let direct = flat(&adain(&f_c, &f_s, epsilon)?)?;
        for (a, b) in via_scin.iter().zip(&direct) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckResult::within("scin_matches_adain", 1e-6, worst))
}

/// Every attention row is a probability distribution.
pub fn check_attention_rows(device: &Device) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for (heads, seed) in [(1usize, 31u64), (2, 32), (4, 33)] {
        let q = cpu_rand(&[2, 5, 8], seed, device)?;
        let k = cpu_rand(&[2, 7, 8], seed + 100, device)?;
        let d = 8 / heads;
        let w = attention_weights(&q, &k, heads, 1.0 / (d as f64).sqrt())?;
        let sums = flat(&w.sum(candle_core::D::Minus1)?)?;
        for s in sums {
            worst = worst.max((s - 1.0).abs());
        }
    }
    Ok(CheckResult::within("attention_rows_sum_to_one", 1e-6, worst))
}

// ---- plain-loop linear algebra for the forward oracles ----

/// `a (r×k) @ b (k×c)`, both row-major.
fn loops_matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * c + j];
            }
            out[i * c + j] = acc;
        }
    }
    out
}

fn loops_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Multi-head attention (tokens `L×C`, weights `C×C`), entirely in loops.
fn loops_msa(tokens: &[f64], l: usize, c: usize, heads: usize, w: &MsaWeights) -> Vec<f64> {
    let q = loops_matmul(tokens, &w.q, l, c, c);
    let k = loops_matmul(tokens, &w.k, l, c, c);
    let v = loops_matmul(tokens, &w.v, l, c, c);
    let mixed = loops_attention(&q, &k, &v, l, l, c, heads);
    loops_matmul(&mixed, &w.o, l, c, c)
}

/// Scaled dot-product attention per head: queries `lq×c`, keys/values
/// `lk×c`, `heads` equal channel slices, scale `1/√(c/heads)`.
fn loops_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; lq * c];
    for h in 0..heads {
        for i in 0..lq {
            let mut scores = vec![0.0; lk];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                *s = acc * scale;
            }
            loops_softmax_row(&mut scores);
            for t in 0..d {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    acc += s * v[j * c + h * d + t];
                }
                out[i * c + h * d + t] = acc;
            }
        }
    }
    out
}

fn loops_layer_norm(x: &[f64], g: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, out_row) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let denom = (var + 1e-5).sqrt();
        for i in 0..c {
            out_row[i] = (row[i] - mu) / denom * g[i] + b[i];
        }
    }
    out
}

struct MsaWeights {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
}

fn msa_weights(store: &ParamStore, prefix: &str) -> Result<MsaWeights> {
    let all = store.export();
    let get = |suffix: &str| -> Result<Vec<f64>> {
        let name = format!("{prefix}.{suffix}");
        flat(all
            .get(&name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?)
    };
    Ok(MsaWeights {
        q: get("w_q")?,
        k: get("w_k")?,
        v: get("w_v")?,
        o: get("w_o")?,
    })
}

/// Multi-head attention vs. the loop implementation on a 4-token sequence.
pub fn check_attention_oracle(device: &Device) -> Result<CheckResult> {
    let (l, c, heads) = (4usize, 8usize, 2usize);
    let mut store = ParamStore::new(41, device);
    let msa = Msa::new(&mut store.root().sub("msa"), c, heads)?;
    let tokens = cpu_rand(&[1, l, c], 42, device)?;
    let got = flat(&msa.forward(&tokens)?)?;
    let want = loops_msa(&flat(&tokens)?, l, c, heads, &msa_weights(&store, "msa")?);
    let mut worst = 0.0f64;
    for (a, b) in got.iter().zip(&want) {
        worst = worst.max((a - b).abs());
    }
    Ok(CheckResult::within("attention_matches_loops", 1e-5, worst))
}

/// The full style token encoder — patch embedding, positions, attention,
/// residual, layer norms, feed-forward — vs. plain loops, on a style image
/// that tokenizes to a 2×2 patch grid.
pub fn check_style_encode_oracle(device: &Device) -> Result<CheckResult> {
    let (dim, heads) = (8usize, 2usize);
    let mut store = ParamStore::new(51, device);
    let realigner = StyleRealigner::new(
        &mut store.root().sub("sr"),
        dim,
        heads,
        &[4],
        false,
        crate::scin::DEFAULT_EPSILON,
    )?;
    let style = cpu_rand(&[1, 3, 16, 16], 52, device)?;
    let got = flat(&realigner.encode(&style)?)?;

    let all = store.export();
    let get = |name: &str| -> Result<Vec<f64>> {
        flat(all
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?)
    };

    // Patch embedding: 8×8 patches of a 16×16 image form a 2×2 token grid.
    let img = flat(&style)?;
    let (h, w, gh, gw, p) = (16usize, 16usize, 2usize, 2usize, 8usize);
    let patch_w = get("sr.patch.weight")?; // (dim, 3, 8, 8)
    let patch_b = get("sr.patch.bias")?;
    let pos_row = get("sr.pos_row")?; // (MAX, dim)
    let pos_col = get("sr.pos_col")?;
    let l = gh * gw;
    let mut tokens = vec![0.0; l * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            for cc in 0..dim {
                let mut acc = patch_b[cc];
                for ic in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            let iv = img[(ic * h + gy * p + ky) * w + gx * p + kx];
                            let wv = patch_w[((cc * 3 + ic) * p + ky) * p + kx];
                            acc += iv * wv;
                        }
                    }
                }
                tokens[(gy * gw + gx) * dim + cc] =
                    acc + pos_row[gy * dim + cc] + pos_col[gx * dim + cc];
            }
        }
    }

    // Encoder block: post-norm attention with query residual, then FFN.
    let weights = msa_weights(&store, "sr.encoder.msa")?;
    let attn = loops_msa(&tokens, l, dim, heads, &weights);
    let query = loops_matmul(&tokens, &weights.q, l, dim, dim);
    let mut y1_in = vec![0.0; l * dim];
    for i in 0..l * dim {
        y1_in[i] = attn[i] + query[i];
    }
    let y1 = loops_layer_norm(
        &y1_in,
        &get("sr.encoder.ln1.scale")?,
        &get("sr.encoder.ln1.shift")?,
        dim,
    );
    let w1 = get("sr.encoder.ffn_w1")?;
    let b1 = get("sr.encoder.ffn_b1")?;
    let w2 = get("sr.encoder.ffn_w2")?;
    let b2 = get("sr.encoder.ffn_b2")?;
    let mut hidden = loops_matmul(&y1, &w1, l, dim, dim);
    for (i, v) in hidden.iter_mut().enumerate() {
        *v = (*v + b1[i % dim]).max(0.0);
    }
    let mut ffn = loops_matmul(&hidden, &w2, l, dim, dim);
    for (i, v) in ffn.iter_mut().enumerate() {
        *v += b2[i % dim] + y1[i];
    }
    let want = loops_layer_norm(
        &ffn,
        &get("sr.encoder.ln2.scale")?,
        &get("sr.encoder.ln2.shift")?,
        dim,
    );

    let mut worst = 0.0f64;
    for (a, b) in got.iter().zip(&want) {
        worst = worst.max((a - b).abs());
    }
    Ok(CheckResult::within("style_encode_matches_loops", 1e-5, worst))
}

/// Cross-attention fusion vs. plain loops on 2×2 feature grids.
pub fn check_fusion_oracle(device: &Device) -> Result<CheckResult> {
    let c = 8usize;
    let epsilon = crate::scin::DEFAULT_EPSILON;
    let mut store = ParamStore::new(61, device);
    let fusion = CrossAttentionFusion::new(&mut store.root().sub("fu"), c, epsilon)?;
    let f_c = cpu_rand(&[1, c, 2, 2], 62, device)?;
    let f_s = cpu_rand(&[1, c, 2, 2], 63, device)?;
    let got = flat(&fusion.fuse(&f_c, &f_s)?)?;

    let all = store.export();
    let get = |name: &str| -> Result<Vec<f64>> {
        flat(all
            .get(name)
            .ok_or_else(|| Error::Mismatch(format!("missing parameter {name}")))?)
    };
    let l = 4usize;
    // Channel-major (C, L) grids → per-channel instance normalization.
    let normalize = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let s = &x[ch * l..(ch + 1) * l];
            let mu = s.iter().sum::<f64>() / l as f64;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
            let denom = (var + epsilon).sqrt();
            for i in 0..l {
                out[ch * l + i] = (s[i] - mu) / denom;
            }
        }
        out
    };
    // 1×1 conv = channel mixing per position: out[c'][p] = Σ_c W[c'][c]·x[c][p].
    let conv1x1 = |wt: &[f64], x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; c * l];
        for co in 0..c {
            for pix in 0..l {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += wt[co * c + ci] * x[ci * l + pix];
                }
                out[co * l + pix] = acc;
            }
        }
        out
    };
    let xc = flat(&f_c)?;
    let xs = flat(&f_s)?;
    let q = conv1x1(&get("fu.q.weight")?, &normalize(&xc));
    let k = conv1x1(&get("fu.k.weight")?, &normalize(&xs));
    let v = conv1x1(&get("fu.v.weight")?, &xs);
    // To token-major (L, C) for attention over positions, single head.
    let to_tokens = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; l * c];
        for ch in 0..c {
            for pix in 0..l {
                out[pix * c + ch] = x[ch * l + pix];
            }
        }
        out
    };
    let mixed = loops_attention(&to_tokens(&q), &to_tokens(&k), &to_tokens(&v), l, l, c, 1);
    // Back to channel-major, output projection with bias, residual.
    let mut grid = vec![0.0; c * l];
    for ch in 0..c {
        for pix in 0..l {
            grid[ch * l + pix] = mixed[pix * c + ch];
        }
    }
    let ob = get("fu.o.bias")?;
    let projected = conv1x1(&get("fu.o.weight")?, &grid);
    let mut want = vec![0.0; c * l];
    for ch in 0..c {
        for pix in 0..l {
            want[ch * l + pix] = xc[ch * l + pix] + projected[ch * l + pix] + ob[ch];
        }
    }

    let mut worst = 0.0f64;
    for (a, b) in got.iter().zip(&want) {
        worst = worst.max((a - b).abs());
    }
    Ok(CheckResult::within("fusion_matches_loops", 1e-5, worst))
}

fn unit_rows(rows: usize, d: usize, seed: u64, device: &Device) -> Result<Tensor> {
    let mut rng = seeded_rng(seed);
    let mut data = vec![0.0; rows * d];
    for row in data.chunks_mut(d) {
        let mut norm = 0.0;
        for v in row.iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
            norm += *v * *v;
        }
        let norm = norm.sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(Tensor::from_vec(data, (rows, d), device)?)
}

/// Brute-force InfoNCE enumeration over both grid views.
fn loops_icl(m_s: &[Vec<f64>], m_c: &[Vec<f64>], n: usize, tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for (m, style_view) in [(m_s, true), (m_c, false)] {
        let mut terms = Vec::new();
        for a in 0..n * n {
            let (i, j) = (a / n, a % n);
            let mates: Vec<usize> = if style_view {
                (0..n).filter(|&j2| j2 != j).map(|j2| i * n + j2).collect()
            } else {
                (0..n).filter(|&i2| i2 != i).map(|i2| i2 * n + j).collect()
            };
            let rivals: Vec<usize> = (0..n * n)
                .filter(|&b| b / n != i && b % n != j)
                .collect();
            for &p in &mates {
                let logit = dot(&m[a], &m[p]) / tau;
                let mut denom = logit.exp();
                for &r in &rivals {
                    denom += (dot(&m[a], &m[r]) / tau).exp();
                }
                terms.push(denom.ln() - logit);
            }
        }
        total += terms.iter().sum::<f64>() / terms.len() as f64;
    }
    total
}

fn rows_of(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_vec2()?)
}

/// Contrastive loss vs. brute-force enumeration for n ∈ {2, 3} at the
/// default temperature.
pub fn check_icl_oracle(device: &Device) -> Result<CheckResult> {
    let tau = crate::contrastive::DEFAULT_TAU;
    let d = 6usize;
    let mut worst = 0.0f64;
    for n in [2usize, 3] {
        let m_s = unit_rows(n * n, d, 70 + n as u64, device)?;
        let m_c = unit_rows(n * n, d, 80 + n as u64, device)?;
        let got: f64 = icl_loss_from_projected(&m_s, &m_c, n, tau, false)?.to_vec0()?;
        let want = loops_icl(&rows_of(&m_s)?, &rows_of(&m_c)?, n, tau);
        worst = worst.max((got - want).abs());
    }
    Ok(CheckResult::within("icl_matches_enumeration", 1e-6, worst))
}

/// Relabeling the grid's style/content indices must not change the loss at
/// all — the reduction order is value-sorted, so the sum is exact.
pub fn check_icl_relabel_invariance(device: &Device) -> Result<CheckResult> {
    let tau = crate::contrastive::DEFAULT_TAU;
    let (n, d) = (3usize, 6usize);
    let m_s = unit_rows(n * n, d, 91, device)?;
    let m_c = unit_rows(n * n, d, 92, device)?;
    let base: f64 = icl_loss_from_projected(&m_s, &m_c, n, tau, false)?.to_vec0()?;

    // Relabel styles by π = (1 2 0) and contents by σ = (2 0 1).
    let pi = [1usize, 2, 0];
    let sigma = [2usize, 0, 1];
    let permute = |m: &Tensor| -> Result<Tensor> {
        let rows = rows_of(m)?;
        let mut out = vec![vec![0.0; d]; n * n];
        for i in 0..n {
            for j in 0..n {
                out[pi[i] * n + sigma[j]] = rows[i * n + j].clone();
            }
        }
        Ok(Tensor::from_vec(
            out.concat(),
            (n * n, d),
            m.device(),
        )?)
    };
    let relabeled: f64 =
        icl_loss_from_projected(&permute(&m_s)?, &permute(&m_c)?, n, tau, false)?.to_vec0()?;
    let measured = if base.to_bits() == relabeled.to_bits() {
        0.0
    } else {
        (base - relabeled).abs().max(f64::MIN_POSITIVE)
    };
    Ok(CheckResult::within("icl_relabel_invariance", 0.0, measured))
}

// ---- central-difference gradient checks ----

/// Compares analytic gradients against central differences at the given
/// coordinates of each listed variable. Returns the worst relative error.
///
/// Coordinates whose forward and backward differences disagree are skipped:
/// there the function has a kink (ReLU, max) within `h`, where central
/// differences are not a valid derivative estimate.
fn max_grad_error<F>(loss_fn: F, targets: &[(&Var, Vec<usize>)], h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = loss_fn()?;
    let l0: f64 = loss.reshape(())?.to_vec0()?;
    let grads = loss.backward()?;
    let mut worst = 0.0f64;
    for (var, coords) in targets {
        let analytic = match grads.get(var) {
            Some(g) => flat(g)?,
            None => vec![0.0; var.elem_count()],
        };
        let base = flat(var.as_tensor())?;
        let dims = var.dims().to_vec();
        for &i in coords {
            let mut plus = base.clone();
            plus[i] += h;
            var.set(&Tensor::from_vec(plus, dims.clone(), var.device())?)?;
            let lp: f64 = loss_fn()?.reshape(())?.to_vec0()?;
            let mut minus = base.clone();
            minus[i] -= h;
            var.set(&Tensor::from_vec(minus, dims.clone(), var.device())?)?;
            let lm: f64 = loss_fn()?.reshape(())?.to_vec0()?;
            var.set(&Tensor::from_vec(base.clone(), dims.clone(), var.device())?)?;
            let fwd = (lp - l0) / h;
            let bwd = (l0 - lm) / h;
            let one_sided_gap = (fwd - bwd).abs();
            if one_sided_gap > 0.25 * fwd.abs().max(bwd.abs()).max(1e-4) {
                continue; // kink within h of this point
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let scale = fd.abs().max(a.abs());
            if scale < 1e-8 {
                continue; // below finite-difference resolution
            }
            worst = worst.max((fd - a).abs() / scale.max(1e-6));
        }
    }
    Ok(worst)
}

fn every(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride).collect()
}

/// Gradients of the affine realignment core wrt its feature and both
/// affine inputs.
pub fn check_grad_scin_apply(device: &Device) -> Result<CheckResult> {
    let epsilon = crate::scin::DEFAULT_EPSILON;
    let f = Var::from_tensor(&cpu_rand(&[1, 2, 3, 3], 101, device)?)?;
    let gamma = Var::from_tensor(&cpu_rand(&[1, 2, 1, 1], 102, device)?)?;
    let beta = Var::from_tensor(&cpu_rand(&[1, 2, 1, 1], 103, device)?)?;
    let loss = || -> Result<Tensor> {
        Ok(scin_apply(f.as_tensor(), gamma.as_tensor(), beta.as_tensor(), epsilon)?
            .sqr()?
            .sum_all()?)
    };
    let worst = max_grad_error(
        loss,
        &[
            (&f, every(18, 1)),
            (&gamma, every(2, 1)),
            (&beta, every(2, 1)),
        ],
        1e-5,
    )?;
    Ok(CheckResult::within("grad_scin_apply", 1e-3, worst))
}

/// Gradients of full realignment wrt the realigned feature and the style
/// level feeding the tokenizer/transformer/affine-head path.
pub fn check_grad_realign(device: &Device) -> Result<CheckResult> {
    let mut store = ParamStore::new(111, device);
    let realigner = StyleRealigner::new(
        &mut store.root().sub("sr"),
        8,
        2,
        &[4],
        false,
        crate::scin::DEFAULT_EPSILON,
    )?;
    let f = Var::from_tensor(&cpu_rand(&[1, 4, 4, 4], 112, device)?)?;
    let level = Var::from_tensor(&cpu_rand(&[1, 3, 8, 8], 113, device)?)?;
    let loss = || -> Result<Tensor> {
        Ok(realigner
            .realign(f.as_tensor(), level.as_tensor(), 1)?
            .sqr()?
            .sum_all()?)
    };
    let worst = max_grad_error(
        loss,
        &[(&f, every(64, 1)), (&level, every(192, 8))],
        1e-5,
    )?;
    Ok(CheckResult::within("grad_realign", 1e-3, worst))
}

/// Gradients of the contrastive loss wrt both projection matrices.
pub fn check_grad_icl(device: &Device) -> Result<CheckResult> {
    let tau = crate::contrastive::DEFAULT_TAU;
    let m_s = Var::from_tensor(&unit_rows(4, 4, 121, device)?)?;
    let m_c = Var::from_tensor(&unit_rows(4, 4, 122, device)?)?;
    let loss = || -> Result<Tensor> {
        icl_loss_from_projected(m_s.as_tensor(), m_c.as_tensor(), 2, tau, false)
    };
    let worst = max_grad_error(loss, &[(&m_s, every(16, 1)), (&m_c, every(16, 1))], 1e-5)?;
    Ok(CheckResult::within("grad_icl", 1e-3, worst))
}

/// Gradients of the style loss wrt the stylized image, through every
/// perceptual tap and the statistic distances.
pub fn check_grad_style_loss(device: &Device) -> Result<CheckResult> {
    let mut store = ParamStore::new(131, device);
    let extractor = PerceptualExtractor::new(&mut store.root().frozen("vgg"), 2)?;
    let i_cs = Var::from_tensor(&cpu_rand(&[1, 3, 16, 16], 132, device)?)?;
    let i_s = cpu_rand(&[1, 3, 16, 16], 133, device)?;
    let loss = || -> Result<Tensor> { style_loss(i_cs.as_tensor(), &i_s, &extractor) };
    let worst = max_grad_error(loss, &[(&i_cs, every(768, 16))], 1e-5)?;
    Ok(CheckResult::within("grad_style_loss", 1e-3, worst))
}

/// Runs the whole suite. `epsilon` feeds the statistics-dependent checks;
/// passing 0 demonstrates why the ε matters (sigma positivity fails).
pub fn run_checks(epsilon: f64, device: &Device) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_sigma_positivity(epsilon, device)?,
        check_adain_moments(epsilon, device)?,
        check_scin_neutrality(epsilon, device)?,
        check_scin_matches_adain(epsilon, device)?,
        check_attention_rows(device)?,
        check_attention_oracle(device)?,
        check_style_encode_oracle(device)?,
        check_fusion_oracle(device)?,
        check_icl_oracle(device)?,
        check_icl_relabel_invariance(device)?,
        check_grad_scin_apply(device)?,
        check_grad_realign(device)?,
        check_grad_icl(device)?,
        check_grad_style_loss(device)?,
    ])
}
