//! Pooled cube and strip distillation losses and the combined objective
//! `L = w_ce·L_ce + λ(L_cpkd + L_spkd)`.
//!
//! Both distillation terms are built on the member-wise difference
//! `T_k − S_k`; every pooling involved is linear, so pooling the difference
//! equals differencing the pooled maps.

use crate::autograd::{Graph, Var};
use crate::config::PcsdConfig;
use crate::error::{shape_err, Error, Result};
use crate::kernels::block_bounds;
use crate::tensor::{Float, Tensor};
use crate::types::GroundTruthMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// `p × p` window over height and width.
    Spatial,
    /// Window of `p` consecutive channels.
    Channel,
}

/// Stride-1, unpadded average pooling.
pub fn cube_pool<T: Float>(g: &mut Graph<T>, x: Var, p: usize, axis: PoolAxis) -> Result<Var> {
    match axis {
        PoolAxis::Spatial => {
            let y = g.box_mean(x, 0, p)?;
            g.box_mean(y, 1, p)
        }
        PoolAxis::Channel => g.box_mean(x, 2, p),
    }
}

/// Spatial kernels clamped to `min(p, h, w)`, deduplicated, in first-seen order.
pub fn effective_spatial_kernels(cfg: &PcsdConfig, h: usize, w: usize) -> Vec<usize> {
    dedup(cfg.cube_spatial_kernels.iter().map(|&p| p.min(h).min(w)))
}

/// Channel kernels clamped to the channel count, deduplicated.
pub fn effective_channel_kernels(cfg: &PcsdConfig, c: usize) -> Vec<usize> {
    dedup(cfg.cube_channel_kernels.iter().map(|&p| p.min(c)))
}

/// All `(kernel, axis)` pairs applied to an `h × w × c` member.
pub fn effective_kernels(cfg: &PcsdConfig, (h, w, c): (usize, usize, usize)) -> Vec<(usize, PoolAxis)> {
    let mut out: Vec<_> = effective_spatial_kernels(cfg, h, w)
        .into_iter()
        .map(|p| (p, PoolAxis::Spatial))
        .collect();
    out.extend(
        effective_channel_kernels(cfg, c)
            .into_iter()
            .map(|p| (p, PoolAxis::Channel)),
    );
    out
}

fn dedup(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = Vec::new();
    for p in it {
        if p >= 1 && !v.contains(&p) {
            v.push(p);
        }
    }
    v
}

/// Strip-pooling depth for bundle member `k` (0-based; member 0 is the mask).
pub fn strip_q(cfg: &PcsdConfig, k: usize) -> usize {
    if k == 0 {
        cfg.strip_q_mask
    } else {
        cfg.strip_q_feature
    }
}

/// Row means over the width followed by column means over the height:
/// `(h + w) × c`.
pub fn strip_pool_block<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (h, w, _) = g.value(x).dims3()?;
    g.strip_pool(x, vec![(0, h)], vec![(0, w)])
}

/// `Ψ^q`: strip pooling of each block of a `q × q` grid (row-major), giving
/// `q·(h + w) × c` rows. Block edges are `⌊i·n/q⌋`, so blocks are equal when
/// `q` divides the side.
pub fn strip_pool_multi<T: Float>(g: &mut Graph<T>, x: Var, q: usize) -> Result<Var> {
    let (h, w, _) = g.value(x).dims3()?;
    if q == 0 || q > h || q > w {
        return Err(shape_err!("strip_pool_multi: q={q} for a {h}×{w} map"));
    }
    g.strip_pool(x, block_bounds(h, q), block_bounds(w, q))
}

fn check_members<T: Float>(g: &Graph<T>, teacher: &[Var], student: &[Var]) -> Result<()> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(shape_err!(
            "distillation: {} teacher members vs {} student members",
            teacher.len(),
            student.len()
        ));
    }
    for (k, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        if g.shape(t) != g.shape(s) {
            return Err(shape_err!(
                "distillation member {}: teacher {:?} vs student {:?}",
                k + 1,
                g.shape(t),
                g.shape(s)
            ));
        }
        g.value(t).dims3()?;
    }
    Ok(())
}

/// `(1/K) Σ_k (1/P_k) Σ_p ‖pool_p(T_k − S_k)‖₂`.
pub fn cpkd_loss_graph<T: Float>(
    g: &mut Graph<T>,
    teacher: &[Var],
    student: &[Var],
    cfg: &PcsdConfig,
) -> Result<Var> {
    check_members(g, teacher, student)?;
    let k_inv = 1.0 / teacher.len() as f64;
    let mut total: Option<Var> = None;
    for (&t, &s) in teacher.iter().zip(student) {
        let d = g.sub(t, s)?;
        let dims = g.value(d).dims3()?;
        let kernels = effective_kernels(cfg, dims);
        let p_inv = 1.0 / kernels.len() as f64;
        for (p, axis) in kernels {
            let pooled = cube_pool(g, d, p, axis)?;
            let n = g.l2_norm(pooled);
            let n = g.scale(n, k_inv * p_inv);
            total = Some(match total {
                None => n,
                Some(a) => g.add(a, n)?,
            });
        }
    }
    Ok(total.expect("at least one member"))
}

/// `(1/K) Σ_k ‖⊔_{q=1..Q_k} Ψ^q(T_k − S_k)‖₂`.
pub fn spkd_loss_graph<T: Float>(
    g: &mut Graph<T>,
    teacher: &[Var],
    student: &[Var],
    cfg: &PcsdConfig,
) -> Result<Var> {
    check_members(g, teacher, student)?;
    let k_inv = 1.0 / teacher.len() as f64;
    let mut total: Option<Var> = None;
    for (k, (&t, &s)) in teacher.iter().zip(student).enumerate() {
        let d = g.sub(t, s)?;
        let mut sq: Option<Var> = None;
        for q in 1..=strip_q(cfg, k) {
            let psi = strip_pool_multi(g, d, q)?;
            let e = g.sum_sq(psi);
            sq = Some(match sq {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        let n = g.sqrt(sq.expect("Q ≥ 1"));
        let n = g.scale(n, k_inv);
        total = Some(match total {
            None => n,
            Some(a) => g.add(a, n)?,
        });
    }
    Ok(total.expect("at least one member"))
}

/// Terms of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub cpkd: Option<Var>,
    pub spkd: Option<Var>,
}

/// `ce_weight·CE(softmax(logits), G) + λ(L_cpkd + L_spkd)`. The distillation
/// terms are skipped when `teacher` is `None` or `λ = 0`; teacher maps are
/// graph constants, so gradients reach only the student.
pub fn total_loss_graph<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &Tensor<T>,
    teacher: Option<&[Tensor<T>]>,
    student: &[Var],
    cfg: &PcsdConfig,
    ce_weight: f64,
) -> Result<LossTerms> {
    let ce = g.softmax_cross_entropy(logits, gt)?;
    let mut total = if ce_weight == 1.0 { ce } else { g.scale(ce, ce_weight) };
    let (mut cpkd, mut spkd) = (None, None);
    if let Some(teacher) = teacher.filter(|_| cfg.lambda > 0.0) {
        let tv: Vec<Var> = teacher.iter().map(|t| g.constant(t.clone())).collect();
        let c = cpkd_loss_graph(g, &tv, student, cfg)?;
        let s = spkd_loss_graph(g, &tv, student, cfg)?;
        let kd = g.add(c, s)?;
        let kd = g.scale(kd, cfg.lambda);
        total = g.add(total, kd)?;
        cpkd = Some(c);
        spkd = Some(s);
    }
    Ok(LossTerms {
        total,
        ce,
        cpkd,
        spkd,
    })
}

fn eager<T: Float>(
    teacher: &[Tensor<T>],
    student: &[Tensor<T>],
    f: impl FnOnce(&mut Graph<T>, &[Var], &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::inference();
    let t: Vec<Var> = teacher.iter().map(|x| g.constant(x.clone())).collect();
    let s: Vec<Var> = student.iter().map(|x| g.constant(x.clone())).collect();
    let v = f(&mut g, &t, &s)?;
    Ok(g.value(v)[0].f64())
}

pub fn cpkd_loss<T: Float>(teacher: &[Tensor<T>], student: &[Tensor<T>], cfg: &PcsdConfig) -> Result<f64> {
    eager(teacher, student, |g, t, s| cpkd_loss_graph(g, t, s, cfg))
}

pub fn spkd_loss<T: Float>(teacher: &[Tensor<T>], student: &[Tensor<T>], cfg: &PcsdConfig) -> Result<f64> {
    eager(teacher, student, |g, t, s| spkd_loss_graph(g, t, s, cfg))
}

/// Pixel-averaged negative log-likelihood of a probability mask.
pub fn cross_entropy<T: Float>(mask: &Tensor<T>, gt: &GroundTruthMask) -> Result<f64> {
    if mask.shape() != gt.tensor().shape() {
        return Err(shape_err!(
            "cross_entropy: mask {:?} vs ground truth {:?}",
            mask.shape(),
            gt.tensor().shape()
        ));
    }
    let pixels = mask.numel() / 2;
    let mut s = 0.0;
    for (m, gv) in mask.data().iter().zip(gt.tensor().data()) {
        if *gv == 1.0 {
            let m = m.f64();
            if !(m > 0.0) {
                return Err(Error::Numerical("cross_entropy: non-positive probability on the true class".into()));
            }
            s -= m.ln();
        }
    }
    Ok(s / pixels as f64)
}

/// Eager objective on a probability mask: `CE(M, G) + λ(L_cpkd + L_spkd)`.
pub fn total_loss<T: Float>(
    mask: &Tensor<T>,
    gt: &GroundTruthMask,
    teacher: &[Tensor<T>],
    student: &[Tensor<T>],
    cfg: &PcsdConfig,
) -> Result<f64> {
    let ce = cross_entropy(mask, gt)?;
    if cfg.lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + cfg.lambda * (cpkd_loss(teacher, student, cfg)? + spkd_loss(teacher, student, cfg)?))
}
