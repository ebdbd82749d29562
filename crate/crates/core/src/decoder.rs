//! Self-correlation decoder: correlation pyramid, FPN/PPM integration,
//! multi-scale Cycle FC block and mask reconstruction.

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, PatchMerge, LEVELS};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{join_name, Bound, Conv, Init, Linear, ParamDecl};
use crate::tensor::Float;

/// Norm threshold below which a location vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// PPM output grid sizes.
pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

/// `(S_H, S_W, dilation)` of the nine Cycle FC branches.
pub const CYCLE_BRANCHES: [(usize, usize, usize); 9] = [
    (1, 3, 1),
    (1, 3, 6),
    (1, 3, 12),
    (1, 3, 18),
    (3, 1, 1),
    (3, 1, 6),
    (3, 1, 12),
    (3, 1, 18),
    (1, 1, 1),
];

/// Number of distilled maps `{M, C̃, C′₁..C′₄}`.
pub const BUNDLE_SIZE: usize = 6;

/// Graph handles of the distilled maps, in the order `M, C̃, C′₁, C′₂, C′₃, C′₄`.
#[derive(Clone, Copy, Debug)]
pub struct DistillationBundle {
    pub members: [Var; BUNDLE_SIZE],
}

impl DistillationBundle {
    pub fn mask(&self) -> Var {
        self.members[0]
    }
}

/// Per-location unit L2 normalization; zero vectors stay zero.
pub fn l2_normalize_locations<T: Float>(g: &mut Graph<T>, f: Var) -> Var {
    g.l2_normalize(f, NORM_EPS)
}

/// `C(m,n) = ⟨F̄(m), F̄(n)⟩` as an `(h·w) × (h·w)` matrix.
pub fn self_correlation<T: Float>(g: &mut Graph<T>, fbar: Var) -> Result<Var> {
    let (h, w, c) = g.value(fbar).dims3()?;
    let flat = g.reshape(fbar, &[h * w, c])?;
    g.matmul(flat, flat, false, true)
}

/// The `t` largest channels per location, sorted non-increasing.
pub fn topk_sort<T: Float>(g: &mut Graph<T>, c: Var, t: usize) -> Result<Var> {
    let n = g.value(c).last_dim();
    if t == 0 || t > n {
        return Err(Error::Config(format!("top_t = {t} outside 1..={n}")));
    }
    g.top_k(c, t)
}

/// `f_L2(max(x, 0))` per location.
pub fn zero_out_normalize<T: Float>(g: &mut Graph<T>, x: Var) -> Var {
    let r = g.relu(x);
    g.l2_normalize(r, NORM_EPS)
}

/// Single-level chain from features to a filtered `h × w × T` correlation map.
pub fn correlation_map<T: Float>(g: &mut Graph<T>, f: Var, t: usize) -> Result<Var> {
    let (h, w, _) = g.value(f).dims3()?;
    let fbar = l2_normalize_locations(g, f);
    let c = self_correlation(g, fbar)?;
    let c = g.reshape(c, &[h, w, h * w])?;
    let sorted = topk_sort(g, c, t)?;
    Ok(zero_out_normalize(g, sorted))
}

/// Output of [`Decoder::ppm`]; `pooled` are the branch inputs before their 1×1 convs.
pub struct PpmOutput {
    pub out: Var,
    pub pooled: [Var; 4],
}

pub struct HfiOutput {
    /// Concatenated `(H/8) × (W/8) × 4D` tensor `Ĉ`.
    pub c_hat: Var,
    /// Recalibrated maps `C′₁..C′₄` at their native scales.
    pub c_prime: [Var; LEVELS],
}

pub struct MscfcOutput {
    pub out: Var,
    /// `Ĉ + f_linear(Σ β_r CycleFC_r(Ĉ))`, before the 3×3 conv.
    pub pre_conv: Var,
}

/// Everything the decoder computes that tests or distillation need.
pub struct DecoderOutput {
    pub correlations: [Var; LEVELS],
    pub hfi: HfiOutput,
    pub mscfc: MscfcOutput,
    pub logits: Var,
    pub mask: Var,
    pub bundle: DistillationBundle,
}

/// Cycle FC: per-channel offset gather followed by a channel FC.
pub fn cycle_fc<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    step_h: usize,
    step_w: usize,
    dilation: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (_, _, c) = g.value(x).dims3()?;
    let shifted = if step_h == 1 && step_w == 1 {
        x
    } else {
        g.cycle_shift(x, kernels::cycle_offsets(c, step_h, step_w, dilation))?
    };
    g.linear(shifted, w, Some(b))
}

pub struct Decoder {
    top_t: [usize; LEVELS],
    down: Conv,
    lateral: Vec<Linear>,
    ppm_branches: Vec<Linear>,
    ppm_fuse: Conv,
    fpn_convs: Vec<Conv>,
    cycle: Vec<Linear>,
    beta: Vec<String>,
    f_linear: Linear,
    mscfc_conv: Conv,
    recon: Vec<Linear>,
    seg: Linear,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.decoder.fpn_channels;
        let t = cfg.level_top_t();
        let c1 = cfg.encoder.channels[0];
        let pm = PatchMerge::DOWN;
        let wide = LEVELS * d;
        let mut cin = cfg.decoder.mscfc_channels;
        let recon = cfg
            .decoder
            .recon_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let l = Linear::conv1x1(format!("decoder.recon{i}"), cin, c);
                cin = c;
                l
            })
            .collect();
        Decoder {
            top_t: t,
            down: Conv::new("decoder.down", pm.kernel, c1, c1, pm.stride, pm.padding),
            lateral: (0..3)
                .map(|i| Linear::conv1x1(format!("decoder.lateral{}", i + 1), t[i], d))
                .collect(),
            ppm_branches: PPM_BINS
                .iter()
                .map(|s| Linear::conv1x1(format!("decoder.ppm.bin{s}"), t[3], d))
                .collect(),
            ppm_fuse: Conv::same3("decoder.ppm.fuse", t[3] + PPM_BINS.len() * d, d),
            fpn_convs: (0..3)
                .map(|i| Conv::same3(format!("decoder.fpn{}", i + 1), d, d))
                .collect(),
            cycle: (0..CYCLE_BRANCHES.len())
                .map(|r| Linear::proj(format!("decoder.mscfc.cycle{r}"), wide, wide, true))
                .collect(),
            beta: (0..CYCLE_BRANCHES.len())
                .map(|r| format!("decoder.mscfc.beta{r}"))
                .collect(),
            f_linear: Linear::proj("decoder.mscfc.linear", wide, wide, true),
            mscfc_conv: Conv::same3("decoder.mscfc.conv", wide, cfg.decoder.mscfc_channels),
            recon,
            seg: Linear::conv1x1("decoder.seg", cin, 2),
        }
    }

    pub fn top_t(&self) -> [usize; LEVELS] {
        self.top_t
    }

    /// Names of the learnable branch weights `β_r`.
    pub fn beta_names(&self) -> &[String] {
        &self.beta
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.down.declare(out);
        self.lateral.iter().for_each(|l| l.declare(out));
        self.ppm_branches.iter().for_each(|l| l.declare(out));
        self.ppm_fuse.declare(out);
        self.fpn_convs.iter().for_each(|c| c.declare(out));
        for (l, b) in self.cycle.iter().zip(&self.beta) {
            l.declare(out);
            out.push(ParamDecl {
                name: b.clone(),
                shape: vec![1],
                init: Init::Ones,
            });
        }
        self.f_linear.declare(out);
        self.mscfc_conv.declare(out);
        self.recon.iter().for_each(|l| l.declare(out));
        self.seg.declare(out);
    }

    /// Filtered correlation maps `C̄₁..C̄₄`; level 1 is first downsampled to stride 8.
    pub fn correlation_pyramid<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        pyr: &FeaturePyramid,
    ) -> Result<[Var; LEVELS]> {
        let mut out = pyr.levels;
        for (i, o) in out.iter_mut().enumerate() {
            let f = if i == 0 {
                self.down.forward(g, p, pyr.levels[0])?
            } else {
                pyr.levels[i]
            };
            *o = correlation_map(g, f, self.top_t[i])?;
        }
        Ok(out)
    }

    /// Pyramid pooling on `C̄₄`: adaptive pools to 1, 2, 3, 6 bins, 1×1 conv,
    /// resize back, concatenate with the input and fuse with a 3×3 conv.
    pub fn ppm<T: Float>(&self, g: &mut Graph<T>, p: &Bound, c4: Var) -> Result<PpmOutput> {
        let (h, w, _) = g.value(c4).dims3()?;
        let mut parts = vec![c4];
        let mut pooled = [c4; 4];
        for (j, (&s, conv)) in PPM_BINS.iter().zip(&self.ppm_branches).enumerate() {
            let pl = g.adaptive_avg_pool(c4, s, s)?;
            pooled[j] = pl;
            let y = conv.forward(g, p, pl)?;
            let y = g.relu(y);
            parts.push(g.resize(y, h, w)?);
        }
        let cat = g.concat_last(&parts)?;
        let fused = self.ppm_fuse.forward(g, p, cat)?;
        Ok(PpmOutput {
            out: g.relu(fused),
            pooled,
        })
    }

    /// Top-down integration of the four correlation maps into `Ĉ`.
    pub fn hierarchical_integrate<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        corr: &[Var; LEVELS],
    ) -> Result<HfiOutput> {
        let mut cp = *corr;
        for i in 0..3 {
            let y = self.lateral[i].forward(g, p, corr[i])?;
            cp[i] = g.relu(y);
        }
        cp[3] = self.ppm(g, p, corr[3])?.out;

        let dims = |g: &Graph<T>, v: Var| {
            let s = g.shape(v);
            (s[0], s[1])
        };
        let (h8, w8) = dims(g, cp[0]);
        let (h3, w3) = dims(g, cp[2]);
        let (h2, w2) = dims(g, cp[1]);
        let up4 = g.resize(cp[3], h3, w3)?;
        let s3 = g.add(cp[2], up4)?;
        let up3 = g.resize(s3, h2, w2)?;
        let s2 = g.add(cp[1], up3)?;
        let s1 = g.add(cp[0], s2)?;

        let mut paths = Vec::with_capacity(LEVELS);
        for (conv, s) in self.fpn_convs.iter().zip([s1, s2, s3]) {
            let y = conv.forward(g, p, s)?;
            let y = g.relu(y);
            paths.push(resize_to(g, y, h8, w8)?);
        }
        paths.push(resize_to(g, cp[3], h8, w8)?);
        Ok(HfiOutput {
            c_hat: g.concat_last(&paths)?,
            c_prime: cp,
        })
    }

    /// `ReLU(Conv3×3(Ĉ + f_linear(Σ_r β_r CycleFC_r(Ĉ))))`.
    pub fn mscfc_block<T: Float>(&self, g: &mut Graph<T>, p: &Bound, c_hat: Var) -> Result<MscfcOutput> {
        let mut acc: Option<Var> = None;
        for ((&(sh, sw, d), lin), beta) in CYCLE_BRANCHES.iter().zip(&self.cycle).zip(&self.beta) {
            let w = p.var(&lin.weight_name())?;
            let b = p.var(&join_name(&lin.name, "bias"))?;
            let y = cycle_fc(g, c_hat, sh, sw, d, w, b)?;
            let y = g.mul_scalar(y, p.var(beta)?)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y)?,
            });
        }
        let mixed = self.f_linear.forward(g, p, acc.expect("nine branches"))?;
        let pre_conv = g.add(c_hat, mixed)?;
        let y = self.mscfc_conv.forward(g, p, pre_conv)?;
        Ok(MscfcOutput {
            out: g.relu(y),
            pre_conv,
        })
    }

    /// Three rounds of ×2 bilinear upsampling each followed by 1×1 conv + ReLU,
    /// then a 1×1 conv to two logits. Returns `(logits, softmax mask)`.
    pub fn mask_reconstruct<T: Float>(&self, g: &mut Graph<T>, p: &Bound, c_tilde: Var) -> Result<(Var, Var)> {
        let mut x = c_tilde;
        for l in &self.recon {
            let (h, w, _) = g.value(x).dims3()?;
            x = g.resize(x, 2 * h, 2 * w)?;
            let y = l.forward(g, p, x)?;
            x = g.relu(y);
        }
        let logits = self.seg.forward(g, p, x)?;
        let mask = g.softmax(logits);
        Ok((logits, mask))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, pyr: &FeaturePyramid) -> Result<DecoderOutput> {
        let correlations = self.correlation_pyramid(g, p, pyr)?;
        let hfi = self.hierarchical_integrate(g, p, &correlations)?;
        let mscfc = self.mscfc_block(g, p, hfi.c_hat)?;
        let (logits, mask) = self.mask_reconstruct(g, p, mscfc.out)?;
        let c = hfi.c_prime;
        let bundle = DistillationBundle {
            members: [mask, mscfc.out, c[0], c[1], c[2], c[3]],
        };
        Ok(DecoderOutput {
            correlations,
            hfi,
            mscfc,
            logits,
            mask,
            bundle,
        })
    }
}

fn resize_to<T: Float>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    if s[0] == h && s[1] == w {
        Ok(x)
    } else {
        g.resize(x, h, w)
    }
}
