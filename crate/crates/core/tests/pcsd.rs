mod common;

use cmfd_core::config::PcsdConfig;
use cmfd_core::pcsd::*;
use cmfd_core::{Error, GroundTruthMask, Graph, Tensor};
use common::*;
use rand::Rng;

fn pooled(x: &Tensor<f64>, f: impl FnOnce(&mut Graph<f64>, cmfd_core::Var) -> cmfd_core::Var) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let v = g.constant(x.clone());
    let y = f(&mut g, v);
    g.value(y).clone()
}

fn only_spatial(kernels: Vec<usize>) -> PcsdConfig {
    PcsdConfig {
        cube_spatial_kernels: kernels,
        cube_channel_kernels: vec![],
        ..PcsdConfig::default()
    }
}

#[test]
fn cube_pool_examples() {
    let x = Tensor::full(&[2, 2, 1], 5.0);
    let y = pooled(&x, |g, v| cube_pool(g, v, 2, PoolAxis::Spatial).unwrap());
    assert_eq!((y.shape(), y.data()), (&[1usize, 1, 1][..], &[5.0][..]));

    let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pooled(&x, |g, v| cube_pool(g, v, 3, PoolAxis::Channel).unwrap());
    assert_eq!(y.data(), &[2.0, 3.0]);
}

#[test]
fn cube_pool_matches_loop_oracle() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[6, 6, 3], 1.0);
    let y = pooled(&x, |g, v| cube_pool(g, v, 4, PoolAxis::Spatial).unwrap());
    assert_eq!(y.shape(), &[3, 3, 3]);
    assert!(max_abs(y.data(), &cube_spatial_oracle(x.data(), 6, 6, 3, 4)) <= 1e-6);
    let y = pooled(&x, |g, v| cube_pool(g, v, 3, PoolAxis::Channel).unwrap());
    assert!(max_abs(y.data(), &cube_channel_oracle(x.data(), 6, 6, 3, 3)) <= 1e-6);
}

#[test]
fn cube_pool_rejects_oversized_kernel() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros(&[3, 3, 2]));
    assert!(matches!(cube_pool(&mut g, v, 4, PoolAxis::Spatial), Err(Error::Shape(_))));
}

#[test]
fn kernel_clamping_per_member() {
    let cfg = PcsdConfig::default();
    assert_eq!(cfg.num_kernels(), 7);
    assert_eq!(effective_kernels(&cfg, (64, 64, 2)).len(), 7);
    assert_eq!(effective_spatial_kernels(&cfg, 8, 8), vec![4, 8]);
    assert_eq!(effective_spatial_kernels(&cfg, 2, 2), vec![2]);
    assert_eq!(effective_channel_kernels(&cfg, 2), vec![2]);
}

#[test]
fn cpkd_identity_and_constant_offset() {
    let cfg = PcsdConfig::default();
    let mut r = rng(2);
    let a = vec![rand_tensor(&mut r, &[8, 8, 3], 1.0), rand_tensor(&mut r, &[4, 4, 5], 1.0)];
    assert_eq!(cpkd_loss(&a, &a, &cfg).unwrap(), 0.0);

    let delta = 0.3;
    let s = rand_tensor(&mut r, &[4, 5, 2], 1.0);
    let t = s.map(|v| v + delta);
    let loss = cpkd_loss(&[t], &[s], &only_spatial(vec![1])).unwrap();
    assert!((loss - (40f64).sqrt() * delta).abs() <= 1e-9);
}

#[test]
fn cpkd_names_mismatched_member() {
    let cfg = PcsdConfig::default();
    let t = vec![Tensor::<f64>::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 2])];
    let s = vec![Tensor::<f64>::zeros(&[4, 4, 2]), Tensor::zeros(&[4, 4, 3])];
    match cpkd_loss(&t, &s, &cfg) {
        Err(Error::Shape(msg)) => assert!(msg.contains("member 2"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(spkd_loss(&t, &s, &cfg).is_err());
}

#[test]
fn strip_block_examples() {
    let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pooled(&x, |g, v| strip_pool_block(g, v).unwrap());
    assert_eq!(y.data(), &[1.5, 3.5, 2.0, 3.0]);

    let x = Tensor::full(&[3, 5, 2], 0.7);
    let y = pooled(&x, |g, v| strip_pool_block(g, v).unwrap());
    assert_eq!(y.shape(), &[8, 2]);
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() <= 1e-12));

    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[4, 6, 2], 1.0);
    let y = pooled(&x, |g, v| strip_pool_block(g, v).unwrap());
    let mut want = Vec::new();
    strip_block_oracle(x.data(), 6, 2, 0, 4, 0, 6, &mut want);
    assert!(max_abs(y.data(), &want) <= 1e-6);
}

#[test]
fn strip_multi_counts_and_oracle() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[4, 4, 1], 1.0);
    let y = pooled(&x, |g, v| strip_pool_multi(g, v, 2).unwrap());
    assert_eq!(y.numel(), 16);
    assert!(max_abs(y.data(), &strip_multi_oracle(x.data(), 4, 4, 1, 2)) <= 1e-6);

    let one = pooled(&x, |g, v| strip_pool_multi(g, v, 1).unwrap());
    let block = pooled(&x, |g, v| strip_pool_block(g, v).unwrap());
    assert_eq!(one.data(), block.data());

    let x = rand_tensor(&mut r, &[8, 6, 3], 1.0);
    let y = pooled(&x, |g, v| strip_pool_multi(g, v, 2).unwrap());
    assert_eq!(y.numel(), 2 * (8 + 6) * 3);
    assert!(max_abs(y.data(), &strip_multi_oracle(x.data(), 8, 6, 3, 2)) <= 1e-6);
}

#[test]
fn strip_multi_rejects_too_many_blocks() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::zeros(&[2, 4, 1]));
    assert!(matches!(strip_pool_multi(&mut g, v, 3), Err(Error::Shape(_))));
}

#[test]
fn spkd_identity_and_constant_offset() {
    let cfg = PcsdConfig::default();
    let mut r = rng(5);
    let a = vec![rand_tensor(&mut r, &[8, 8, 2], 1.0), rand_tensor(&mut r, &[4, 4, 3], 1.0)];
    assert_eq!(spkd_loss(&a, &a, &cfg).unwrap(), 0.0);

    let delta = 0.25;
    let s = rand_tensor(&mut r, &[2, 2, 1], 1.0);
    let t = s.map(|v| v + delta);
    let q1 = PcsdConfig {
        strip_q_mask: 1,
        ..PcsdConfig::default()
    };
    let loss = spkd_loss(&[t], &[s], &q1).unwrap();
    assert!((loss - 2.0 * delta).abs() <= 1e-12);
}

#[test]
fn strip_depths_per_member() {
    let cfg = PcsdConfig::default();
    assert_eq!(strip_q(&cfg, 0), 4);
    assert!((1..6).all(|k| strip_q(&cfg, k) == 2));
}

fn gt_mask(forged: &[bool], h: usize, w: usize) -> GroundTruthMask {
    GroundTruthMask::from_forged(h, w, forged).unwrap()
}

#[test]
fn cross_entropy_examples() {
    let forged: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    let gt = gt_mask(&forged, 4, 4);
    let perfect = gt.tensor().cast::<f64>();
    assert_eq!(cross_entropy(&perfect, &gt).unwrap(), 0.0);
    let half = Tensor::<f64>::full(&[4, 4, 2], 0.5);
    assert!((cross_entropy(&half, &gt).unwrap() - 2f64.ln()).abs() <= 1e-12);
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut r = rng(6);
    let forged: Vec<bool> = (0..12).map(|_| r.gen_bool(0.4)).collect();
    let gt = gt_mask(&forged, 3, 4);
    let m = Tensor::from_fn(&[3, 4, 2], |_| r.gen_range(0.05..0.95));
    let m = Tensor::new(&[3, 4, 2], m.data().chunks(2).flat_map(|p| [p[0] / (p[0] + p[1]), p[1] / (p[0] + p[1])]).collect()).unwrap();
    let want = cross_entropy_oracle(m.data(), &gt.tensor().cast::<f64>().into_vec());
    assert!((cross_entropy(&m, &gt).unwrap() - want).abs() <= 1e-6);
}

#[test]
fn non_one_hot_ground_truth_is_rejected() {
    let t = Tensor::new(&[1, 2, 2], vec![1.0f32, 0.0, 0.5, 0.5]).unwrap();
    assert!(GroundTruthMask::new(t).is_err());
}

#[test]
fn total_loss_lambda_zero_and_identity() {
    let mut r = rng(7);
    let forged: Vec<bool> = (0..16).map(|_| r.gen_bool(0.5)).collect();
    let gt = gt_mask(&forged, 4, 4);
    let m = Tensor::from_fn(&[4, 4, 2], |i| if i % 2 == 0 { 0.3 } else { 0.7 });
    let t = vec![rand_tensor(&mut r, &[4, 4, 2], 1.0)];
    let s = vec![rand_tensor(&mut r, &[4, 4, 2], 1.0)];
    let zero = PcsdConfig {
        lambda: 0.0,
        ..PcsdConfig::default()
    };
    assert_eq!(total_loss(&m, &gt, &t, &s, &zero).unwrap(), cross_entropy(&m, &gt).unwrap());

    let perfect = gt.tensor().cast::<f64>();
    assert_eq!(total_loss(&perfect, &gt, &t, &t, &PcsdConfig::default()).unwrap(), 0.0);
}

#[test]
fn graph_objective_skips_distillation_without_teacher() {
    let mut r = rng(8);
    let forged: Vec<bool> = (0..16).map(|_| r.gen_bool(0.5)).collect();
    let gt = gt_mask(&forged, 4, 4).tensor().cast::<f64>();
    let mut g = Graph::<f64>::new();
    let logits = g.param(rand_tensor(&mut r, &[4, 4, 2], 1.0));
    let s = g.param(rand_tensor(&mut r, &[4, 4, 3], 1.0));
    let terms = total_loss_graph(&mut g, logits, &gt, None, &[s], &PcsdConfig::default(), 1.0).unwrap();
    assert!(terms.cpkd.is_none() && terms.spkd.is_none());
    assert_eq!(g.value(terms.total)[0], g.value(terms.ce)[0]);

    let teacher = vec![rand_tensor(&mut r, &[4, 4, 3], 1.0)];
    let terms = total_loss_graph(&mut g, logits, &gt, Some(&teacher), &[s], &PcsdConfig::default(), 1.0).unwrap();
    let grads = g.backward(terms.total).unwrap();
    assert!(grads.get(s).is_some() && grads.get(logits).is_some());
}

#[test]
fn losses_are_symmetric_non_negative_and_deterministic() {
    let cfg = PcsdConfig::default();
    let mut r = rng(9);
    for _ in 0..10 {
        let a = vec![rand_tensor(&mut r, &[8, 8, 2], 1.0), rand_tensor(&mut r, &[4, 4, 4], 1.0)];
        let b = vec![rand_tensor(&mut r, &[8, 8, 2], 1.0), rand_tensor(&mut r, &[4, 4, 4], 1.0)];
        let ab = cpkd_loss(&a, &b, &cfg).unwrap();
        assert!(ab >= 0.0);
        assert_eq!(ab, cpkd_loss(&b, &a, &cfg).unwrap());
        assert_eq!(ab.to_bits(), cpkd_loss(&a, &b, &cfg).unwrap().to_bits());
        let sab = spkd_loss(&a, &b, &cfg).unwrap();
        assert!(sab >= 0.0);
        assert_eq!(sab, spkd_loss(&b, &a, &cfg).unwrap());
    }
}

#[test]
fn cpkd_triangle_inequality() {
    let cfg = PcsdConfig::default();
    let mut r = rng(10);
    for _ in 0..10 {
        let mk = |r: &mut rand_chacha::ChaCha8Rng| vec![rand_tensor(r, &[8, 8, 3], 1.0), rand_tensor(r, &[2, 2, 4], 1.0)];
        let (a, b, c) = (mk(&mut r), mk(&mut r), mk(&mut r));
        let ac = cpkd_loss(&a, &c, &cfg).unwrap();
        let ab = cpkd_loss(&a, &b, &cfg).unwrap();
        let bc = cpkd_loss(&b, &c, &cfg).unwrap();
        assert!(ac <= ab + bc + 1e-6);
    }
}

#[test]
fn pooling_is_linear() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, &[8, 8, 4], 1.0);
    let y = rand_tensor(&mut r, &[8, 8, 4], 1.0);
    let (a, b) = (0.7, -1.3);
    let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
    type Op = Box<dyn Fn(&mut Graph<f64>, cmfd_core::Var) -> cmfd_core::Var>;
    let ops: Vec<Op> = vec![
        Box::new(|g, v| cube_pool(g, v, 4, PoolAxis::Spatial).unwrap()),
        Box::new(|g, v| cube_pool(g, v, 3, PoolAxis::Channel).unwrap()),
        Box::new(|g, v| strip_pool_multi(g, v, 2).unwrap()),
        Box::new(|g, v| strip_pool_multi(g, v, 3).unwrap()),
    ];
    for op in &ops {
        let pm = pooled(&mix, op);
        let px = pooled(&x, op);
        let py = pooled(&y, op);
        let lin = px.zip_map(&py, |p, q| a * p + b * q).unwrap();
        assert!(pm.max_abs_diff(&lin) <= 1e-6);
    }
}
