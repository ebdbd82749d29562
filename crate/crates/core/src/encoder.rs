//! Hierarchical four-stage Transformer encoder.
//!
//! Each stage is an overlapping patch merge (a strided convolution followed by
//! layer norm) and a stack of pre-norm blocks, each block being efficient
//! multi-head self-attention with spatial reduction followed by Mix-FFN. No
//! positional encoding is used; position leaks in only through zero padding
//! of the convolutions.

use crate::autograd::{Graph, Var};
use crate::config::{EncoderConfig, LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join_name, Bound, Conv, DepthwiseConv, LayerNorm, Linear, ParamDecl};
use crate::tensor::Float;

/// Graph handles of the four pyramid levels `F₁..F₄` (each `h_i × w_i × C_i`).
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// Overlapping patch merge: a `K × K` convolution with stride `S` and padding `Pa`.
pub fn overlap_patch_merge<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    g.conv2d(x, weight, bias, stride, pad)
}

/// `Norm(Reshape(x, R)·W_S)`: groups of `R` consecutive tokens are
/// concatenated channel-wise and projected back to `C` channels.
/// `norm = None` leaves the projection un-normalized.
pub fn spatial_reduce<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    reduction: usize,
    w_s: Var,
    norm: Option<(Var, Var)>,
) -> Result<Var> {
    let (n, c) = g.value(x).dims2()?;
    if reduction == 0 || n % reduction != 0 {
        return Err(shape_err!(
            "spatial_reduce: reduction {reduction} does not divide {n} tokens"
        ));
    }
    let grouped = g.reshape(x, &[n / reduction, reduction * c])?;
    let projected = g.linear(grouped, w_s, None)?;
    match norm {
        Some(aff) => g.layer_norm(projected, Some(aff), crate::nn::LAYER_NORM_EPS),
        None => Ok(projected),
    }
}

/// Parameter handles of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_s: Var,
    pub sr_norm: Option<(Var, Var)>,
}

/// Output of [`efficient_self_attention`]; `weights` holds one
/// `(h·w) × (h·w/R)` softmax matrix per head.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Efficient multi-head self-attention over a `(h·w) × C` token sequence.
pub fn efficient_self_attention<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    heads: usize,
    reduction: usize,
) -> Result<AttentionOutput> {
    let (_, c) = g.value(x).dims2()?;
    if heads == 0 || c % heads != 0 {
        return Err(shape_err!("attention: {c} channels not divisible by {heads} heads"));
    }
    if cfg!(debug_assertions) && !g.value(x).is_finite() {
        return Err(Error::Numerical("attention: non-finite input".into()));
    }
    let d = c / heads;
    let q = g.matmul(x, p.w_q, false, false)?;
    let reduced = spatial_reduce(g, x, reduction, p.w_s, p.sr_norm)?;
    let k = g.matmul(reduced, p.w_k, false, false)?;
    let v = g.matmul(reduced, p.w_v, false, false)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_last(q, h * d, d)?,
                g.slice_last(k, h * d, d)?,
                g.slice_last(v, h * d, d)?,
            )
        };
        let logits = g.matmul(qh, kh, false, true)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax(logits);
        weights.push(attn);
        outs.push(g.matmul(attn, vh, false, false)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_last(&outs)? };
    let out = g.matmul(cat, p.w_o, false, false)?;
    Ok(AttentionOutput { out, weights })
}

/// Parameter handles of one Mix-FFN.
#[derive(Clone, Copy, Debug)]
pub struct MixFfnParams {
    pub fc1: (Var, Var),
    pub dw: (Var, Var),
    pub fc2: (Var, Var),
}

/// `x + MLP(GELU(DWConv3×3(MLP(norm(x)))))` on an `h × w × C` map. `norm`
/// is the pre-normalization applied to the transform input only.
pub fn mix_ffn<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    p: &MixFfnParams,
    norm: Option<(Var, Var)>,
) -> Result<Var> {
    g.value(x).dims3()?;
    let inp = match norm {
        Some(aff) => g.layer_norm(x, Some(aff), crate::nn::LAYER_NORM_EPS)?,
        None => x,
    };
    let h1 = g.linear(inp, p.fc1.0, Some(p.fc1.1))?;
    let h2 = g.depthwise_conv(h1, p.dw.0, p.dw.1)?;
    let h3 = g.gelu(h2);
    let h4 = g.linear(h3, p.fc2.0, Some(p.fc2.1))?;
    g.add(x, h4)
}

struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    sr: Linear,
    sr_norm: LayerNorm,
    norm2: LayerNorm,
    fc1: Linear,
    dw: DepthwiseConv,
    fc2: Linear,
    heads: usize,
    reduction: usize,
}

impl Block {
    fn new(prefix: &str, c: usize, heads: usize, reduction: usize, mlp_ratio: usize) -> Self {
        let n = |s: &str| join_name(prefix, s);
        let hidden = c * mlp_ratio;
        Block {
            norm1: LayerNorm::new(n("norm1"), c),
            q: Linear::proj(n("attn.q"), c, c, false),
            k: Linear::proj(n("attn.k"), c, c, false),
            v: Linear::proj(n("attn.v"), c, c, false),
            o: Linear::proj(n("attn.o"), c, c, false),
            sr: Linear::proj(n("attn.sr"), reduction * c, c, false),
            sr_norm: LayerNorm::new(n("attn.sr_norm"), c),
            norm2: LayerNorm::new(n("norm2"), c),
            fc1: Linear::proj(n("ffn.fc1"), c, hidden, true),
            dw: DepthwiseConv {
                name: n("ffn.dw"),
                k: 3,
                channels: hidden,
            },
            fc2: Linear::proj(n("ffn.fc2"), hidden, c, true),
            heads,
            reduction,
        }
    }

    fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.norm1.declare(out);
        for l in [&self.q, &self.k, &self.v, &self.o, &self.sr] {
            l.declare(out);
        }
        self.sr_norm.declare(out);
        self.norm2.declare(out);
        self.fc1.declare(out);
        self.dw.declare(out);
        self.fc2.declare(out);
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).dims3()?;
        let normed = self.norm1.forward(g, p, x)?;
        let seq = g.reshape(normed, &[h * w, c])?;
        let ap = AttentionParams {
            w_q: p.var(&self.q.weight_name())?,
            w_k: p.var(&self.k.weight_name())?,
            w_v: p.var(&self.v.weight_name())?,
            w_o: p.var(&self.o.weight_name())?,
            w_s: p.var(&self.sr.weight_name())?,
            sr_norm: Some(self.sr_norm.affine(p)?),
        };
        let attn = efficient_self_attention(g, seq, &ap, self.heads, self.reduction)?;
        let attn = g.reshape(attn.out, &[h, w, c])?;
        let x = g.add(x, attn)?;
        let fp = MixFfnParams {
            fc1: (p.var(&self.fc1.weight_name())?, p.var(&join_name(&self.fc1.name, "bias"))?),
            dw: (
                p.var(&join_name(&self.dw.name, "weight"))?,
                p.var(&join_name(&self.dw.name, "bias"))?,
            ),
            fc2: (p.var(&self.fc2.weight_name())?, p.var(&join_name(&self.fc2.name, "bias"))?),
        };
        mix_ffn(g, x, &fp, Some(self.norm2.affine(p)?))
    }
}

struct Stage {
    patch: Conv,
    patch_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// The four-stage encoder; owns only the layer layout, parameters live in
/// a [`crate::nn::Params`] map.
pub struct Encoder {
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut cin = 3;
        let stages = (0..LEVELS)
            .map(|j| {
                let c = cfg.channels[j];
                let pm = cfg.patch[j];
                let prefix = format!("encoder.stage{}", j + 1);
                let st = Stage {
                    patch: Conv::new(join_name(&prefix, "patch"), pm.kernel, cin, c, pm.stride, pm.padding),
                    patch_norm: LayerNorm::new(join_name(&prefix, "patch_norm"), c),
                    blocks: (0..cfg.depths[j])
                        .map(|b| {
                            Block::new(
                                &join_name(&prefix, &format!("block{b}")),
                                c,
                                cfg.heads[j],
                                cfg.reductions[j],
                                cfg.mlp_ratio,
                            )
                        })
                        .collect(),
                    norm: LayerNorm::new(join_name(&prefix, "norm"), c),
                };
                cin = c;
                st
            })
            .collect();
        Encoder { stages }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        for s in &self.stages {
            s.patch.declare(out);
            s.patch_norm.declare(out);
            for b in &s.blocks {
                b.declare(out);
            }
            s.norm.declare(out);
        }
    }

    /// Encode an `H × W × 3` image into the feature pyramid.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (h, w, c) = g.value(image).dims3()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(shape_err!(
                "encode: image must be H×W×3 with H, W multiples of 32, got {h}×{w}×{c}"
            ));
        }
        let mut x = image;
        let mut levels = [image; LEVELS];
        for (j, s) in self.stages.iter().enumerate() {
            let wt = p.var(&join_name(&s.patch.name, "weight"))?;
            let bs = p.var(&join_name(&s.patch.name, "bias"))?;
            x = overlap_patch_merge(g, x, wt, Some(bs), s.patch.stride, s.patch.pad)?;
            x = s.patch_norm.forward(g, p, x)?;
            for b in &s.blocks {
                x = b.forward(g, p, x)?;
            }
            x = s.norm.forward(g, p, x)?;
            levels[j] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}
