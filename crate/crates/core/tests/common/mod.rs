//! Independent loop oracles and finite-difference helpers shared by the
//! integration tests. Everything here works on plain `f64` slices and is
//! written without reference to the library's vectorized kernels.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cmfd_core::nn::{Bound, Params};
use cmfd_core::{Checkpoint, Graph, Model, ModelConfig, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.gen_range(-1.0..1.0))
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Groups of `r` consecutive rows concatenated and multiplied by `ws`.
pub fn spatial_reduce_oracle(x: &[f64], n: usize, c: usize, r: usize, ws: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n / r * c];
    for o in 0..n / r {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..r {
                for i in 0..c {
                    s += x[(o * r + k) * c + i] * ws[(k * c + i) * c + j];
                }
            }
            out[o * c + j] = s;
        }
    }
    out
}

pub fn matmul_oracle(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Multi-head attention with spatial reduction (no norm), written as explicit
/// per-query loops. Returns `(output, per-head weights)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    x: &[f64],
    n: usize,
    c: usize,
    heads: usize,
    r: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    wo: &[f64],
    ws: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = c / heads;
    let q = matmul_oracle(x, n, c, wq, c);
    let red = spatial_reduce_oracle(x, n, c, r, ws);
    let nk = n / r;
    let k = matmul_oracle(&red, nk, c, wk, c);
    let v = matmul_oracle(&red, nk, c, wv, c);
    let mut cat = vec![0.0; n * c];
    let mut weights = Vec::new();
    for h in 0..heads {
        let mut wts = vec![0.0; n * nk];
        for i in 0..n {
            let mut logits = vec![0.0; nk];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for t in 0..d {
                    s += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                *l = s / (d as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..nk {
                let a = (logits[j] - mx).exp() / z;
                wts[i * nk + j] = a;
                for t in 0..d {
                    cat[i * c + h * d + t] += a * v[j * c + h * d + t];
                }
            }
        }
        weights.push(wts);
    }
    (matmul_oracle(&cat, n, c, wo, c), weights)
}

/// `C(m,n)` by explicit dot products of the (already normalized) rows.
pub fn self_correlation_oracle(f: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for k in 0..c {
                s += f[a * c + k] * f[b * c + k];
            }
            out[a * n + b] = s;
        }
    }
    out
}

pub fn l2_normalize_oracle(f: &[f64], c: usize) -> Vec<f64> {
    f.chunks(c)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(move |v| if n < 1e-12 { 0.0 } else { v / n }).collect::<Vec<_>>()
        })
        .collect()
}

/// Full descending sort of every row, truncated to `t`.
pub fn topk_oracle(x: &[f64], c: usize, t: usize) -> Vec<f64> {
    x.chunks(c)
        .flat_map(|row| {
            let mut r = row.to_vec();
            r.sort_by(|a, b| b.partial_cmp(a).unwrap());
            r.truncate(t);
            r
        })
        .collect()
}

/// Cycle FC evaluated literally: for every output location and every input
/// channel, gather from the offset location (zero outside the map).
#[allow(clippy::too_many_arguments)]
pub fn cycle_fc_oracle(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    sh: usize,
    sw: usize,
    d: usize,
    wt: &[f64],
    b: &[f64],
    cout: usize,
) -> Vec<f64> {
    let centre = |s: usize| (s as i64 - 1) / 2;
    let mut out = vec![0.0; h * w * cout];
    for m in 0..h {
        for n in 0..w {
            for o in 0..cout {
                let mut s = b[o];
                for c in 0..cin {
                    let dm = (c % sh) as i64 - centre(sh);
                    let dn = ((c / sh) % sw) as i64 - centre(sw);
                    let (y, xx) = (m as i64 + d as i64 * dm, n as i64 + d as i64 * dn);
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        s += x[((y as usize) * w + xx as usize) * cin + c] * wt[c * cout + o];
                    }
                }
                out[(m * w + n) * cout + o] = s;
            }
        }
    }
    out
}

/// `p × p` stride-1 window means over the spatial axes.
pub fn cube_spatial_oracle(x: &[f64], h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let (oh, ow) = (h - p + 1, w - p + 1);
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for k in 0..c {
                let mut s = 0.0;
                for a in 0..p {
                    for bb in 0..p {
                        s += x[((i + a) * w + j + bb) * c + k];
                    }
                }
                out[(i * ow + j) * c + k] = s / (p * p) as f64;
            }
        }
    }
    out
}

pub fn cube_channel_oracle(x: &[f64], h: usize, w: usize, c: usize, p: usize) -> Vec<f64> {
    let oc = c - p + 1;
    let mut out = vec![0.0; h * w * oc];
    for loc in 0..h * w {
        for k in 0..oc {
            out[loc * oc + k] = (0..p).map(|t| x[loc * c + k + t]).sum::<f64>() / p as f64;
        }
    }
    out
}

/// Row means then column means of the sub-block `[r0,r1) × [c0,c1)`.
#[allow(clippy::too_many_arguments)]
pub fn strip_block_oracle(x: &[f64], w: usize, c: usize, r0: usize, r1: usize, c0: usize, c1: usize, out: &mut Vec<f64>) {
    for r in r0..r1 {
        for k in 0..c {
            let s: f64 = (c0..c1).map(|cc| x[(r * w + cc) * c + k]).sum();
            out.push(s / (c1 - c0) as f64);
        }
    }
    for cc in c0..c1 {
        for k in 0..c {
            let s: f64 = (r0..r1).map(|r| x[(r * w + cc) * c + k]).sum();
            out.push(s / (r1 - r0) as f64);
        }
    }
}

/// `Ψ^q` over a `q × q` grid with floor-partitioned edges, blocks row-major.
pub fn strip_multi_oracle(x: &[f64], h: usize, w: usize, c: usize, q: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for bi in 0..q {
        for bj in 0..q {
            strip_block_oracle(x, w, c, bi * h / q, (bi + 1) * h / q, bj * w / q, (bj + 1) * w / q, &mut out);
        }
    }
    out
}

/// `−(1/pixels) Σ G log M` by a scalar loop.
pub fn cross_entropy_oracle(m: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for (mv, gv) in m.iter().zip(g) {
        if *gv > 0.0 {
            s -= gv * mv.ln();
        }
    }
    s / (m.len() / 2) as f64
}

/// Smallest gradient magnitude a step-1e-5 central difference resolves to
/// 1e-4: loss evaluation noise of a few 1e-15 divided by 2h is ~2e-10.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Relative error used by every gradient check.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Analytic gradients of `build` (a scalar graph) with all params trainable.
pub fn analytic_grads(
    params: &Params<f64>,
    build: &dyn Fn(&mut Graph<f64>, &Bound) -> Var,
) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params, true);
    let loss = build(&mut g, &b);
    let val = g.value(loss)[0];
    let mut grads = g.backward(loss).unwrap();
    let map = b
        .iter()
        .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
        .collect();
    (val, map)
}

pub fn eval_loss(params: &Params<f64>, build: &dyn Fn(&mut Graph<f64>, &Bound) -> Var) -> f64 {
    let mut g = Graph::inference();
    let b = Bound::new(&mut g, params, false);
    let loss = build(&mut g, &b);
    g.value(loss)[0]
}

/// One sampled coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct FdPoint {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Central differences with step `h` at the given coordinates.
pub fn fd_check(
    params: &Params<f64>,
    coords: &[(String, usize)],
    h: f64,
    build: &dyn Fn(&mut Graph<f64>, &Bound) -> Var,
) -> Vec<FdPoint> {
    let (_, grads) = analytic_grads(params, build);
    coords
        .iter()
        .map(|(name, index)| {
            let analytic = grads.get(name).map(|t| t.data()[*index]).unwrap_or(0.0);
            let mut p = params.clone();
            let orig = p.get(name).unwrap().data()[*index];
            p.get_mut(name).unwrap().data_mut()[*index] = orig + h;
            let fp = eval_loss(&p, build);
            p.get_mut(name).unwrap().data_mut()[*index] = orig - h;
            let fm = eval_loss(&p, build);
            let numeric = (fp - fm) / (2.0 * h);
            FdPoint {
                name: name.clone(),
                index: *index,
                analytic,
                numeric,
                rel: rel_err(analytic, numeric),
            }
        })
        .collect()
}

/// `n` coordinates: a parameter tensor uniformly at random, then an entry.
pub fn sample_coords(params: &Params<f64>, n: usize, seed: u64, filter: &dyn Fn(&str) -> bool) -> Vec<(String, usize)> {
    let names: Vec<&String> = params.names().filter(|k| filter(k)).collect();
    assert!(!names.is_empty(), "no parameters match the filter");
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let name = names[r.gen_range(0..names.len())];
            let len = params.get(name).unwrap().numel();
            (name.clone(), r.gen_range(0..len))
        })
        .collect()
}

/// Perturb every parameter by uniform noise of size `scale` so biases,
/// norms and gains are exercised away from their initial constants.
pub fn randomize(params: &mut Params<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += scale * r.gen_range(-1.0..1.0));
    }
}

/// The overfit setting shared by the harness tests and the acceptance run:
/// the compact preset at 64×64, four domain-A samples, 200 steps of batch 4.
pub fn overfit_run() -> (cmfd_core::Model, Vec<cmfd_core::synth::Sample>, cmfd_core::harness::TrainResult) {
    use cmfd_core::harness::{train_on, TrainConfig};
    use cmfd_core::synth::{generate_samples, DatasetOptions, Domain};
    let cfg = ModelConfig::small(64);
    let model = Model::new(&cfg).unwrap();
    let init = Checkpoint {
        params: model.init_params(),
        config: cfg,
        training_step: 0,
    };
    let samples = generate_samples(&DatasetOptions::new(4, Domain::A, 1, 64)).unwrap();
    let tc = TrainConfig {
        steps: Some(OVERFIT_STEPS),
        batch_size: 4,
        lr: OVERFIT_LR,
        seed: 0,
        ..TrainConfig::default()
    };
    let r = train_on(&tc, &init, &samples).unwrap();
    (model, samples, r)
}

pub const OVERFIT_STEPS: usize = 200;
pub const OVERFIT_LR: f64 = 3e-3;
