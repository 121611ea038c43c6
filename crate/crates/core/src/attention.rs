//! Multi-head attention with additive distance bias, ViT-style encoders,
//! cross-encoders, and the masked multimodal decoder.
//!
//! Encoders carry no additive positional embedding: position enters only
//! through the bias, so they run unchanged on grids of any size. The decoder
//! is the one place a 2-D sinusoidal embedding is added.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{cross_bias, self_bias, BiasTensor, PatchGrid, SlopeSchedule};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Norm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// How raw query-key dot products are scaled before the bias is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `d^(-1/2)`, the usual transformer scaling.
    #[default]
    InvSqrtD,
    /// `d^(+1/2)`, the factor exactly as written in the attention-score formula.
    SqrtDLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub scale_mode: ScaleMode,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize, scale_mode: ScaleMode) -> Result<Self> {
        if heads == 0 || model_dim == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(Self {
            heads,
            model_dim,
            scale_mode,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn scale(&self) -> f64 {
        let d = self.head_dim() as f64;
        match self.scale_mode {
            ScaleMode::InvSqrtD => 1.0 / d.sqrt(),
            ScaleMode::SqrtDLiteral => d.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_px: usize,
    pub in_channels: usize,
    pub scale_mode: ScaleMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.patch_px == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "patch_px and in_channels must be positive".into(),
            ));
        }
        self.attention().map(|_| ())
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.heads, self.model_dim, self.scale_mode)
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.model_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_px * self.patch_px
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Radar,
    Lores,
    Hires,
    Joint,
    Fused,
}

/// Ordered token embeddings `[L×D]` on a patch grid.
#[derive(Debug, Clone, Copy)]
pub struct TokenStream {
    pub tokens: Var,
    pub grid: PatchGrid,
    pub modality: Modality,
}

impl TokenStream {
    pub fn new(g: &Graph, tokens: Var, grid: PatchGrid, modality: Modality) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 2 || s[0] != grid.tokens() {
            return Err(Error::Dimension {
                op: "token_stream",
                lhs: s.to_vec(),
                rhs: vec![grid.rows, grid.cols],
            });
        }
        Ok(Self {
            tokens,
            grid,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.tokens()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records one constant `[Lq×Lk]` leaf per head.
pub fn bias_vars(g: &mut Graph, bias: &BiasTensor) -> Result<Vec<Var>> {
    (0..bias.heads)
        .map(|h| g.constant(&[bias.q_len, bias.k_len], bias.head(h).to_vec()))
        .collect()
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cfg: AttentionConfig,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            cfg,
        }
    }

    /// Biased multi-head attention of `q_in: [Lq×D]` over `kv_in: [Lk×D]`.
    ///
    /// `bias` holds one `[Lq×Lk]` constant per head; pass `None` for plain attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        bias: Option<&[Var]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, kv_in)?;
        let v = self.v.forward(g, store, kv_in)?;
        let heads = biased_attention(g, q, k, v, bias, &self.cfg)?;
        self.o.forward(g, store, heads)
    }
}

/// Core of the attention layer on already-projected `q`, `k`, `v`.
///
/// Per head: `softmax(scale·QₕKₕᵀ + biasₕ)·Vₕ`; heads are concatenated
/// along the feature axis.
pub fn biased_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&[Var]>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let (lq, lk) = (g.shape(q)[0], g.shape(k)[0]);
    for t in [q, k, v] {
        if g.shape(t).len() != 2 || g.shape(t)[1] != cfg.model_dim {
            return Err(Error::Dimension {
                op: "attention",
                lhs: g.shape(t).to_vec(),
                rhs: vec![cfg.model_dim],
            });
        }
    }
    if g.shape(v)[0] != lk {
        return Err(Error::Dimension {
            op: "attention",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    if let Some(b) = bias {
        let bad_shape = b.iter().any(|h| g.shape(*h) != [lq, lk]);
        if b.len() != cfg.heads || bad_shape {
            return Err(Error::Dimension {
                op: "attention bias",
                lhs: vec![cfg.heads, lq, lk],
                rhs: b.first().map_or(vec![b.len()], |h| {
                    let mut s = vec![b.len()];
                    s.extend_from_slice(g.shape(*h));
                    s
                }),
            });
        }
    }
    let d = cfg.head_dim();
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 1, h * d, (h + 1) * d)?;
        let kh = g.slice(k, 1, h * d, (h + 1) * d)?;
        let vh = g.slice(v, 1, h * d, (h + 1) * d)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let mut scores = g.scale(raw, cfg.scale())?;
        if let Some(b) = bias {
            scores = g.add(scores, b[h])?;
        }
        let probs = g.softmax(scores)?;
        outs.push(g.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Pre-norm residual block: attention then MLP.
///
/// With `norm_kv` present the block cross-attends to a separate key/value stream.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: Norm,
    pub norm_kv: Option<Norm>,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        mlp_hidden: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            norm_kv: cross.then(|| Norm::new(store, &format!("{name}.norm_kv"), d)),
            attn: Attention::new(store, &format!("{name}.attn"), cfg, rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, mlp_hidden, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        kv: Option<Var>,
        bias: Option<&[Var]>,
    ) -> Result<Var> {
        let xn = self.norm1.forward(g, store, x)?;
        let kvn = match (kv, &self.norm_kv) {
            (Some(kv), Some(norm)) => norm.forward(g, store, kv)?,
            (None, None) => xn,
            _ => {
                return Err(Error::contract(
                    "cross block needs a key/value stream and vice versa",
                ))
            }
        };
        let a = self.attn.forward(g, store, xn, kvn, bias)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

/// Flattens a `[C×H×W]` image into `[L×C·p²]` row-major patches.
///
/// Each patch is laid out channel-major, then row, then column.
pub fn patchify(g: &mut Graph, image: Var, patch_px: usize) -> Result<(Var, usize, usize)> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C, H, W] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch_px == 0 || h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size {patch_px}"
        )));
    }
    let (rows, cols) = (h / patch_px, w / patch_px);
    let mut idx = Vec::with_capacity(c * h * w);
    for r in 0..rows {
        for col in 0..cols {
            for ch in 0..c {
                for py in 0..patch_px {
                    for px in 0..patch_px {
                        let y = r * patch_px + py;
                        let x = col * patch_px + px;
                        idx.push((ch * h + y) * w + x);
                    }
                }
            }
        }
    }
    let flat = g.reshape(image, &[c * h * w])?;
    let picked = g.gather(flat, &idx)?;
    let patches = g.reshape(picked, &[rows * cols, c * patch_px * patch_px])?;
    Ok((patches, rows, cols))
}

/// Unimodal encoder: linear patch embedding followed by self-attention blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub slopes: SlopeSchedule,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let att = cfg.attention()?;
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            cfg.patch_dim(),
            cfg.model_dim,
            rng,
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{name}.blocks.{i}"),
                    att,
                    cfg.mlp_hidden(),
                    false,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            embed,
            blocks,
            slopes: SlopeSchedule::new(cfg.heads)?,
        })
    }

    /// Projects each flattened patch of a `[C×H×W]` image to the model width.
    pub fn patch_embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        gsd: f64,
        modality: Modality,
    ) -> Result<TokenStream> {
        let c = g.shape(image).first().copied().unwrap_or(0);
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, image has {c}",
                self.cfg.in_channels
            )));
        }
        let (patches, rows, cols) = patchify(g, image, self.cfg.patch_px)?;
        let tokens = self.embed.forward(g, store, patches)?;
        let grid = PatchGrid::new(rows, cols, self.cfg.patch_px, gsd)?;
        TokenStream::new(g, tokens, grid, modality)
    }

    /// Self-attention blocks with the stream's own distance bias.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stream: TokenStream,
    ) -> Result<TokenStream> {
        let bias = self_bias(&stream.grid, &self.slopes);
        let bias = bias_vars(g, &bias)?;
        let mut x = stream.tokens;
        for block in &self.blocks {
            x = block.forward(g, store, x, None, Some(&bias))?;
        }
        Ok(TokenStream {
            tokens: x,
            ..stream
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        gsd: f64,
        modality: Modality,
    ) -> Result<TokenStream> {
        let s = self.patch_embed(g, store, image, gsd, modality)?;
        self.encode(g, store, s)
    }
}

/// Stack of cross-attention blocks; queries come from one stream, keys and
/// values from another covering the same footprint.
#[derive(Debug, Clone)]
pub struct CrossEncoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<Block>,
    pub slopes: SlopeSchedule,
}

impl CrossEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let att = cfg.attention()?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    store,
                    &format!("{name}.blocks.{i}"),
                    att,
                    cfg.mlp_hidden(),
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            cfg,
            blocks,
            slopes: SlopeSchedule::new(cfg.heads)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: TokenStream,
        kv: TokenStream,
        modality: Modality,
    ) -> Result<TokenStream> {
        let bias = cross_bias(&q.grid, &kv.grid, &self.slopes)?;
        let bias = bias_vars(g, &bias)?;
        let mut x = q.tokens;
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(kv.tokens), Some(&bias))?;
        }
        Ok(TokenStream {
            tokens: x,
            grid: q.grid,
            modality,
        })
    }
}

/// 2-D sine/cosine table `[rows·cols × dim]`; half the width encodes the row,
/// half the column. `dim` must be divisible by 4.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "sinusoidal embedding width {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub in_dim: usize,
    /// Values per reconstructed patch, `N_ch·p²`.
    pub out_dim: usize,
    pub scale_mode: ScaleMode,
}

/// Masked-token transformer that maps fused tokens back to fused patches.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head: Linear,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if !cfg.dim.is_multiple_of(4) {
            return Err(Error::Config("decoder dim must be divisible by 4".into()));
        }
        let att = AttentionConfig::new(cfg.heads, cfg.dim, cfg.scale_mode)?;
        let hidden = ((cfg.dim as f64 * cfg.mlp_ratio).round() as usize).max(1);
        Ok(Self {
            cfg,
            embed: Linear::new(store, &format!("{name}.embed"), cfg.in_dim, cfg.dim, rng),
            mask_token: store.normal(format!("{name}.mask_token"), &[1, cfg.dim], 0.02, rng),
            blocks: (0..cfg.depth)
                .map(|i| {
                    Block::new(
                        store,
                        &format!("{name}.blocks.{i}"),
                        att,
                        hidden,
                        false,
                        rng,
                    )
                })
                .collect(),
            norm: Norm::new(store, &format!("{name}.norm"), cfg.dim),
            head: Linear::new(store, &format!("{name}.head"), cfg.dim, cfg.out_dim, rng),
        })
    }

    /// Replaces masked tokens with the mask token, adds the positional table,
    /// and predicts every patch of the fused grid.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: TokenStream,
        mask: &[bool],
    ) -> Result<Var> {
        if fused.modality != Modality::Fused {
            return Err(Error::contract("decoder input must be the fused stream"));
        }
        let l = fused.len();
        if mask.len() != l {
            return Err(Error::contract(format!(
                "mask has {} entries for {l} tokens",
                mask.len()
            )));
        }
        let x = self.embed.forward(g, store, fused.tokens)?;
        let x = if mask.iter().any(|&m| m) {
            let token = g.param(store, self.mask_token);
            let stacked = g.concat(&[x, token], 0)?;
            let idx: Vec<usize> = mask
                .iter()
                .enumerate()
                .map(|(i, &m)| if m { l } else { i })
                .collect();
            g.gather(stacked, &idx)?
        } else {
            x
        };
        let pos = sincos_2d(fused.grid.rows, fused.grid.cols, self.cfg.dim)?;
        let pos = g.constant(&[l, self.cfg.dim], pos)?;
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, None, None)?;
        }
        let x = self.norm.forward(g, store, x)?;
        self.head.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{OpKind, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Plain scaled dot-product attention on raw buffers, single head.
    fn reference_attention(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        lq: usize,
        lk: usize,
        d: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; lq * d];
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| {
                    (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..lk {
                for t in 0..d {
                    out[i * d + t] += e[j] / z * v[j * d + t];
                }
            }
        }
        out
    }

    #[test]
    fn zero_bias_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lq, lk, d) = (5, 7, 6);
        let (qt, kt, vt) = (
            rand_tensor(&mut rng, &[lq, d]),
            rand_tensor(&mut rng, &[lk, d]),
            rand_tensor(&mut rng, &[lk, d]),
        );
        let expect = reference_attention(qt.data(), kt.data(), vt.data(), lq, lk, d);
        let mut g = Graph::new();
        let (q, k, v) = (g.leaf(qt), g.leaf(kt), g.leaf(vt));
        let zero = BiasTensor::zeros(1, lq, lk);
        let bias = bias_vars(&mut g, &zero).unwrap();
        let cfg = AttentionConfig::new(1, d, ScaleMode::InvSqrtD).unwrap();
        let out = biased_attention(&mut g, q, k, v, Some(&bias), &cfg).unwrap();
        for (a, b) in g.value(out).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn saturating_bias_selects_one_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (lq, lk, d) = (3, 4, 4);
        let vt = rand_tensor(&mut rng, &[lk, d]);
        let vrow: Vec<f64> = vt.row(2).to_vec();
        let mut g = Graph::new();
        let q = g.leaf(rand_tensor(&mut rng, &[lq, d]));
        let k = g.leaf(rand_tensor(&mut rng, &[lk, d]));
        let v = g.leaf(vt);
        let mut data = vec![-1e6; lq * lk];
        for i in 0..lq {
            data[i * lk + 2] = 0.0;
        }
        let b = BiasTensor::from_data(1, lq, lk, data).unwrap();
        let bias = bias_vars(&mut g, &b).unwrap();
        let cfg = AttentionConfig::new(1, d, ScaleMode::InvSqrtD).unwrap();
        let out = biased_attention(&mut g, q, k, v, Some(&bias), &cfg).unwrap();
        for i in 0..lq {
            for (got, want) in g.value(out)[i * d..(i + 1) * d].iter().zip(&vrow) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_key_gets_all_mass() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::full(&[1, 4], 1.0));
        let kv = g.leaf(Tensor::full(&[1, 4], 1.0));
        let cfg = AttentionConfig::new(2, 4, ScaleMode::InvSqrtD).unwrap();
        let grid = PatchGrid::new(1, 1, 2, 1.0).unwrap();
        let b = self_bias(&grid, &SlopeSchedule::new(2).unwrap());
        let bias = bias_vars(&mut g, &b).unwrap();
        biased_attention(&mut g, q, kv, kv, Some(&bias), &cfg).unwrap();
        for (_, p) in g.values_of(OpKind::Softmax) {
            assert_eq!(p, &[1.0]);
        }
    }

    #[test]
    fn bias_shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::zeros(&[2, 4]));
        let b = BiasTensor::zeros(1, 3, 2);
        let bias = bias_vars(&mut g, &b).unwrap();
        let cfg = AttentionConfig::new(1, 4, ScaleMode::InvSqrtD).unwrap();
        assert!(biased_attention(&mut g, q, q, q, Some(&bias), &cfg).is_err());
    }

    #[test]
    fn scale_modes() {
        let a = AttentionConfig::new(2, 8, ScaleMode::InvSqrtD).unwrap();
        assert_eq!(a.scale(), 0.5);
        let b = AttentionConfig::new(2, 8, ScaleMode::SqrtDLiteral).unwrap();
        assert_eq!(b.scale(), 2.0);
        assert!(AttentionConfig::new(3, 8, ScaleMode::InvSqrtD).is_err());
    }

    #[test]
    fn patchify_layout() {
        let mut g = Graph::new();
        // 1 channel 4x4 image with pixel value = index
        let img = g.leaf(Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let (p, rows, cols) = patchify(&mut g, img, 2).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(g.shape(p), &[4, 4]);
        assert_eq!(&g.value(p)[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&g.value(p)[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(patchify(&mut g, img, 3).is_err());
    }

    fn enc_cfg(channels: usize, patch: usize) -> EncoderConfig {
        EncoderConfig {
            depth: 1,
            model_dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_px: patch,
            in_channels: channels,
            scale_mode: ScaleMode::InvSqrtD,
        }
    }

    #[test]
    fn patch_embed_token_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", enc_cfg(3, 8), &mut rng).unwrap();
        for (px, tokens) in [(256, 1024), (512, 4096)] {
            let mut g = Graph::new();
            let img = g.leaf(Tensor::zeros(&[3, px, px]));
            let s = enc
                .patch_embed(&mut g, &store, img, 1.0, Modality::Lores)
                .unwrap();
            assert_eq!(s.len(), tokens);
        }
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[3, 12, 12]));
        assert!(matches!(
            enc.patch_embed(&mut g, &store, img, 1.0, Modality::Lores),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn depth_zero_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            depth: 0,
            ..enc_cfg(1, 2)
        };
        assert!(Encoder::new(&mut store, "e", cfg, &mut rng).is_err());
    }

    #[test]
    fn zero_attention_output_leaves_mlp_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "e", enc_cfg(1, 2), &mut rng).unwrap();
        let block = &enc.blocks[0];
        for id in block.attn.o.params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let input = rand_tensor(&mut rng, &[4, 8]);
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let grid = PatchGrid::new(2, 2, 2, 1.0).unwrap();
        let s = TokenStream::new(&g, x, grid, Modality::Lores).unwrap();
        let out = enc.encode(&mut g, &store, s).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(input);
        let n = block.norm2.forward(&mut g2, &store, x2).unwrap();
        let m = block.mlp.forward(&mut g2, &store, n).unwrap();
        let expect = g2.add(x2, m).unwrap();
        assert_eq!(g.value(out.tokens), g2.value(expect));
    }

    #[test]
    fn sincos_table_shape_and_origin() {
        let t = sincos_2d(2, 3, 8).unwrap();
        assert_eq!(t.len(), 6 * 8);
        // position (0, 0): sin terms 0, cos terms 1
        assert_eq!(&t[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(sincos_2d(1, 1, 6).is_err());
    }

    #[test]
    fn decoder_mask_length_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            in_dim: 8,
            out_dim: 17 * 4,
            scale_mode: ScaleMode::InvSqrtD,
        };
        let dec = Decoder::new(&mut store, "d", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, &[4, 8]));
        let grid = PatchGrid::new(2, 2, 2, 1.0).unwrap();
        let s = TokenStream::new(&g, x, grid, Modality::Fused).unwrap();
        assert!(dec.forward(&mut g, &store, s, &[true; 3]).is_err());
        let out = dec.forward(&mut g, &store, s, &[false; 4]).unwrap();
        assert_eq!(g.shape(out), &[4, 68]);
        let out = dec
            .forward(&mut g, &store, s, &[true, false, true, false])
            .unwrap();
        assert_eq!(g.shape(out), &[4, 68]);
    }
}
