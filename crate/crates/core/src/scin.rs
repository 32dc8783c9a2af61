//! Instance statistics, AdaIN, the transformer style encoder, and
//! style-consistency instance normalization (SCIN).
//!
//! The chain is: tokenize a style image → one transformer encoder block →
//! mean-pool → per-decoder-scale affine heads emit `(γ, β)` → apply
//! `γ ⊙ IN(F) + β` to the feature being decoded. At initialization the heads
//! emit exactly `(1, 0)`, so SCIN starts as plain instance normalization.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, Scope};

/// Default ε added under the square root of the instance standard deviation.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-instance, per-channel first and second moments.
pub struct InstanceStats {
    /// Mean over spatial positions, shape `(N, C, 1, 1)`.
    pub mu: Tensor,
    /// `sqrt(var + ε)` over spatial positions, shape `(N, C, 1, 1)`.
    pub sigma: Tensor,
    /// The ε that was folded into `sigma`.
    pub epsilon: f64,
}

/// Computes per-instance per-channel mean and `sqrt(var + ε)` over spatial
/// dims. Population variance (divide by `H·W`). Accepts `ε ≥ 0`; the verify
/// suite asserts the `σ > 0` contract that only holds for `ε > 0`.
pub fn instance_stats(x: &Tensor, epsilon: f64) -> Result<InstanceStats> {
    let dims = x.dims();
    if dims.len() != 4 {
        return Err(Error::dim(format!("expected rank-4 tensor, got {dims:?}")));
    }
    let mu = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    let sigma = (var + epsilon)?.sqrt()?;
    Ok(InstanceStats { mu, sigma, epsilon })
}

/// `(x − μ) / σ` per instance-channel.
pub fn instance_norm(x: &Tensor, epsilon: f64) -> Result<Tensor> {
    let stats = instance_stats(x, epsilon)?;
    Ok(x.broadcast_sub(&stats.mu)?.broadcast_div(&stats.sigma)?)
}

/// Adaptive instance normalization: `σ(F_s) · IN(F_c) + μ(F_s)`.
/// Spatial sizes may differ; batch and channel counts must match.
pub fn adain(f_c: &Tensor, f_s: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (dc, ds) = (f_c.dims(), f_s.dims());
    if dc.len() != 4 || ds.len() != 4 || dc[0] != ds[0] || dc[1] != ds[1] {
        return Err(Error::dim(format!(
            "adain needs matching batch/channels, got {dc:?} vs {ds:?}"
        )));
    }
    let style = instance_stats(f_s, epsilon)?;
    Ok(instance_norm(f_c, epsilon)?
        .broadcast_mul(&style.sigma)?
        .broadcast_add(&style.mu)?)
}

/// Softmax attention weights, shape `(N, heads, Lq, Lk)`. Row-stochastic
/// over the last dim by construction.
pub fn attention_weights(q: &Tensor, k: &Tensor, n_heads: usize, scale: f64) -> Result<Tensor> {
    let (n, lq, c) = q.dims3()?;
    let (nk, lk, ck) = k.dims3()?;
    if n != nk || c != ck {
        return Err(Error::dim(format!(
            "attention query {:?} vs key {:?} mismatch",
            q.dims(),
            k.dims()
        )));
    }
    if n_heads == 0 || c % n_heads != 0 {
        return Err(Error::config(format!(
            "token dim {c} not divisible by head count {n_heads}"
        )));
    }
    let d = c / n_heads;
    let qh = q.reshape((n, lq, n_heads, d))?.transpose(1, 2)?.contiguous()?;
    let kh = k.reshape((n, lk, n_heads, d))?.transpose(1, 2)?.contiguous()?;
    let scores = qh.matmul(&kh.transpose(2, 3)?.contiguous()?)?.affine(scale, 0.0)?;
    softmax_rows(&scores)
}

/// Softmax over the last dim, composed from elementwise ops so gradients flow
/// back into the scores. The fused `softmax_last_dim` kernel returns a tensor
/// detached from the autograd graph, which silently starves the query/key
/// weights of gradient. The row max is detached before subtraction: softmax is
/// shift-invariant, so the max carries no gradient of its own and serves only
/// to keep the exponentials in range.
fn softmax_rows(scores: &Tensor) -> Result<Tensor> {
    let max = scores.max_keepdim(D::Minus1)?.detach();
    let exp = scores.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(D::Minus1)?;
    Ok(exp.broadcast_div(&sum)?)
}

/// Multi-head scaled-dot-product attention over token sequences.
/// `q: (N, Lq, C)`, `k, v: (N, Lk, C)` → `(N, Lq, C)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, scale: f64) -> Result<Tensor> {
    let weights = attention_weights(q, k, n_heads, scale)?;
    let (n, lk, c) = v.dims3()?;
    if k.dims3()?.1 != lk {
        return Err(Error::dim("key/value length mismatch".to_string()));
    }
    let d = c / n_heads;
    let vh = v.reshape((n, lk, n_heads, d))?.transpose(1, 2)?.contiguous()?;
    let out = weights.matmul(&vh)?; // (N, heads, Lq, d)
    let lq = out.dims4()?.2;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((n, lq, c))?)
}

/// Applies `x @ w + b` across the last dim of a `(N, L, C)` sequence.
fn seq_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    let (cin, cout) = w.dims2()?;
    if c != cin {
        return Err(Error::dim(format!(
            "linear expects input dim {cin}, got {c}"
        )));
    }
    let y = x.reshape((n * l, c))?.matmul(w)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    Ok(y.reshape((n, l, cout))?)
}

/// Layer normalization over the last dimension with learnable scale/shift.
pub struct LayerNorm {
    g: Tensor,
    b: Tensor,
    eps: f64,
}

impl LayerNorm {
    /// Creates scale (init 1) and shift (init 0) of size `dim`.
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            g: scope.param("scale", &[dim], Init::Ones)?,
            b: scope.param("shift", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes the last dim to zero mean / unit variance, then rescales.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mu)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

/// Multi-head self-attention with learned Q/K/V/output projections.
///
/// Fields are public so tests (and oracles) can assemble instances with
/// hand-picked projection matrices.
pub struct Msa {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub n_heads: usize,
}

impl Msa {
    /// Builds projections for `dim`-dimensional tokens with `n_heads` heads.
    pub fn new(scope: &mut Scope, dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::config(format!(
                "token dim {dim} not divisible by head count {n_heads}"
            )));
        }
        Ok(Msa {
            w_q: scope.param("w_q", &[dim, dim], Init::FanIn)?,
            w_k: scope.param("w_k", &[dim, dim], Init::FanIn)?,
            w_v: scope.param("w_v", &[dim, dim], Init::FanIn)?,
            w_o: scope.param("w_o", &[dim, dim], Init::FanIn)?,
            n_heads,
        })
    }

    /// The query projection of a token sequence.
    pub fn query(&self, tokens: &Tensor) -> Result<Tensor> {
        seq_linear(tokens, &self.w_q, None)
    }

    /// Attention over the projected tokens, including the output projection.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let q = self.query(tokens)?;
        let k = seq_linear(tokens, &self.w_k, None)?;
        let v = seq_linear(tokens, &self.w_v, None)?;
        let d = tokens.dims3()?.2 / self.n_heads;
        let mixed = attention(&q, &k, &v, self.n_heads, 1.0 / (d as f64).sqrt())?;
        seq_linear(&mixed, &self.w_o, None)
    }
}

/// One post-norm transformer encoder block.
///
/// `Y' = LN(MSA(Q, K, V) + Q)`, `Y = LN(FFN(Y') + Y')`, where Q, K, V are
/// learned projections of the input sequence and the FFN is
/// `W₂·ReLU(W₁·x + b₁) + b₂`. The attention residual adds the *query
/// projection* (as written in the source formulation); set
/// `residual_from_input` to add the raw input sequence instead.
pub struct EncoderBlock {
    msa: Msa,
    ffn_w1: Tensor,
    ffn_b1: Tensor,
    ffn_w2: Tensor,
    ffn_b2: Tensor,
    ln1: LayerNorm,
    ln2: LayerNorm,
    residual_from_input: bool,
}

impl EncoderBlock {
    /// Builds a block for `dim`-dimensional tokens with `n_heads` heads.
    pub fn new(
        scope: &mut Scope,
        dim: usize,
        n_heads: usize,
        residual_from_input: bool,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            msa: Msa::new(&mut scope.sub("msa"), dim, n_heads)?,
            ffn_w1: scope.param("ffn_w1", &[dim, dim], Init::FanIn)?,
            ffn_b1: scope.param("ffn_b1", &[dim], Init::Zeros)?,
            ffn_w2: scope.param("ffn_w2", &[dim, dim], Init::FanIn)?,
            ffn_b2: scope.param("ffn_b2", &[dim], Init::Zeros)?,
            ln1: LayerNorm::new(&mut scope.sub("ln1"), dim)?,
            ln2: LayerNorm::new(&mut scope.sub("ln2"), dim)?,
            residual_from_input,
        })
    }

    /// Multi-head self-attention including the output projection.
    pub fn msa(&self, tokens: &Tensor) -> Result<Tensor> {
        self.msa.forward(tokens)
    }

    /// Full encoder block: attention and FFN sub-blocks, each followed by a
    /// residual sum and post-norm.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let attn = self.msa.forward(tokens)?;
        let residual = if self.residual_from_input {
            tokens.clone()
        } else {
            self.msa.query(tokens)?
        };
        let y1 = self.ln1.forward(&(attn + residual)?)?;
        let hidden = seq_linear(&y1, &self.ffn_w1, Some(&self.ffn_b1))?.relu()?;
        let ffn = seq_linear(&hidden, &self.ffn_w2, Some(&self.ffn_b2))?;
        self.ln2.forward(&(ffn + y1)?)
    }
}

/// A `(γ, β)` emitter for one decoder scale: two independent 2-layer FFNs
/// over the pooled style encoding. The final layers are zero-initialized
/// with constant biases `(1, 0)`, so a fresh head emits exactly `γ ≡ 1`,
/// `β ≡ 0`.
pub struct AffineHead {
    gamma_w1: Tensor,
    gamma_b1: Tensor,
    gamma_w2: Tensor,
    gamma_b2: Tensor,
    beta_w1: Tensor,
    beta_b1: Tensor,
    beta_w2: Tensor,
    beta_b2: Tensor,
    out_dim: usize,
}

impl AffineHead {
    /// Head mapping pooled style encodings of size `dim_in` to affine
    /// parameters of size `dim_out` (the channel count at its decoder scale).
    pub fn new(scope: &mut Scope, dim_in: usize, dim_out: usize) -> Result<Self> {
        Ok(AffineHead {
            gamma_w1: scope.param("gamma_w1", &[dim_in, dim_in], Init::FanIn)?,
            gamma_b1: scope.param("gamma_b1", &[dim_in], Init::Zeros)?,
            gamma_w2: scope.param("gamma_w2", &[dim_in, dim_out], Init::Zeros)?,
            gamma_b2: scope.param("gamma_b2", &[dim_out], Init::Ones)?,
            beta_w1: scope.param("beta_w1", &[dim_in, dim_in], Init::FanIn)?,
            beta_b1: scope.param("beta_b1", &[dim_in], Init::Zeros)?,
            beta_w2: scope.param("beta_w2", &[dim_in, dim_out], Init::Zeros)?,
            beta_b2: scope.param("beta_b2", &[dim_out], Init::Zeros)?,
            out_dim: dim_out,
        })
    }

    /// Maps a pooled style encoding `(N, C)` to `γ, β` of shape
    /// `(N, out_dim, 1, 1)`.
    pub fn forward(&self, pooled: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = pooled.dims2()?.0;
        let gamma = pooled
            .matmul(&self.gamma_w1)?
            .broadcast_add(&self.gamma_b1)?
            .relu()?
            .matmul(&self.gamma_w2)?
            .broadcast_add(&self.gamma_b2)?
            .reshape((n, self.out_dim, 1, 1))?;
        let beta = pooled
            .matmul(&self.beta_w1)?
            .broadcast_add(&self.beta_b1)?
            .relu()?
            .matmul(&self.beta_w2)?
            .broadcast_add(&self.beta_b2)?
            .reshape((n, self.out_dim, 1, 1))?;
        Ok((gamma, beta))
    }
}

/// `γ ⊙ IN(F) + β` with `γ, β` of shape `(N, C, 1, 1)`.
pub fn scin_apply(f: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f64) -> Result<Tensor> {
    let c = f
        .dims()
        .get(1)
        .copied()
        .ok_or_else(|| Error::dim("scin_apply expects rank-4 input".to_string()))?;
    if gamma.dims() != [f.dims()[0], c, 1, 1] || beta.dims() != gamma.dims() {
        return Err(Error::dim(format!(
            "affine shape {:?}/{:?} incompatible with feature {:?}",
            gamma.dims(),
            beta.dims(),
            f.dims()
        )));
    }
    Ok(instance_norm(f, epsilon)?
        .broadcast_mul(gamma)?
        .broadcast_add(beta)?)
}

/// Maximum patch rows/columns supported by the learned positional tables.
pub const MAX_PATCH_GRID: usize = 64;

/// Patch size used to tokenize style images for the transformer.
pub const STYLE_PATCH: usize = 8;

/// The full SCIN stack: style tokenizer, shared transformer encoder, and one
/// affine head per decoder scale.
pub struct StyleRealigner {
    patch_w: Tensor,
    patch_b: Tensor,
    pos_row: Tensor,
    pos_col: Tensor,
    encoder: EncoderBlock,
    heads: Vec<AffineHead>,
    epsilon: f64,
}

impl StyleRealigner {
    /// Builds the stack. `dim` is the token width; `scale_channels` lists the
    /// feature channel count at each decoder scale (one affine head each).
    pub fn new(
        scope: &mut Scope,
        dim: usize,
        n_heads: usize,
        scale_channels: &[usize],
        residual_from_input: bool,
        epsilon: f64,
    ) -> Result<Self> {
        let patch_w = scope.param(
            "patch.weight",
            &[dim, 3, STYLE_PATCH, STYLE_PATCH],
            Init::FanIn,
        )?;
        let patch_b = scope.param("patch.bias", &[dim], Init::Zeros)?;
        let pos_row = scope.param(
            "pos_row",
            &[MAX_PATCH_GRID, dim],
            Init::Uniform { lo: -0.02, hi: 0.02 },
        )?;
        let pos_col = scope.param(
            "pos_col",
            &[MAX_PATCH_GRID, dim],
            Init::Uniform { lo: -0.02, hi: 0.02 },
        )?;
        let encoder = EncoderBlock::new(&mut scope.sub("encoder"), dim, n_heads, residual_from_input)?;
        let mut heads = Vec::new();
        for (i, &ch) in scale_channels.iter().enumerate() {
            heads.push(AffineHead::new(&mut scope.sub(&format!("head{i}")), dim, ch)?);
        }
        Ok(StyleRealigner {
            patch_w,
            patch_b,
            pos_row,
            pos_col,
            encoder,
            heads,
            epsilon,
        })
    }

    /// Tokenizes a 3-channel style image: replicate-pad to a multiple of the
    /// patch size, embed patches by strided convolution, add row+column
    /// positional embeddings. Returns `(N, L, dim)`.
    pub fn tokenize(&self, style: &Tensor) -> Result<Tensor> {
        let dims = style.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::dim(format!(
                "style tokenizer expects (N,3,H,W), got {dims:?}"
            )));
        }
        let (h, w) = (dims[2], dims[3]);
        let pad_h = (STYLE_PATCH - h % STYLE_PATCH) % STYLE_PATCH;
        let pad_w = (STYLE_PATCH - w % STYLE_PATCH) % STYLE_PATCH;
        let padded = style
            .pad_with_same(2, 0, pad_h)?
            .pad_with_same(3, 0, pad_w)?;
        let grid = padded.conv2d(&self.patch_w, 0, STYLE_PATCH, 1, 1)?;
        let grid = grid.broadcast_add(&self.patch_b.reshape((1, (), 1, 1))?)?;
        let (n, c, gh, gw) = grid.dims4()?;
        if gh > MAX_PATCH_GRID || gw > MAX_PATCH_GRID {
            return Err(Error::config(format!(
                "style image yields {gh}x{gw} patches, positional tables hold {MAX_PATCH_GRID}"
            )));
        }
        let tokens = grid.reshape((n, c, gh * gw))?.transpose(1, 2)?.contiguous()?;
        let rows = self.pos_row.narrow(0, 0, gh)?.unsqueeze(1)?; // (gh, 1, dim)
        let cols = self.pos_col.narrow(0, 0, gw)?.unsqueeze(0)?; // (1, gw, dim)
        let pos = rows.broadcast_add(&cols)?.reshape((1, gh * gw, c))?;
        Ok(tokens.broadcast_add(&pos)?)
    }

    /// Tokenize + transformer encode: the style sequence `Y_s`.
    pub fn encode(&self, style: &Tensor) -> Result<Tensor> {
        self.encoder.encode(&self.tokenize(style)?)
    }

    /// `(γ, β)` for decoder scale `layer_index ∈ 1..=len(heads)` from an
    /// encoded style sequence.
    pub fn affine(&self, encoded: &Tensor, layer_index: usize) -> Result<(Tensor, Tensor)> {
        let head = self
            .heads
            .get(layer_index.wrapping_sub(1))
            .ok_or_else(|| {
                Error::config(format!(
                    "affine head index {layer_index} outside 1..={}",
                    self.heads.len()
                ))
            })?;
        head.forward(&encoded.mean(1)?)
    }

    /// Full realignment: encode the matching style pyramid level, emit the
    /// scale's `(γ, β)`, and apply `γ ⊙ IN(F) + β`.
    pub fn realign(&self, f: &Tensor, style_level: &Tensor, layer_index: usize) -> Result<Tensor> {
        let encoded = self.encode(style_level)?;
        let (gamma, beta) = self.affine(&encoded, layer_index)?;
        scin_apply(f, &gamma, &beta, self.epsilon)
    }

    /// The ε used for the instance statistics inside [`Self::realign`].
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}
