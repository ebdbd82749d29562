mod common;

use cmfd_core::config::PcsdConfig;
use cmfd_core::harness::*;
use cmfd_core::metrics::{f1_score, Confusion};
use cmfd_core::synth::{self, generate_samples, DatasetOptions, Domain};
use cmfd_core::{Checkpoint, Error, Model, ModelConfig, Tensor};
use common::*;

fn micro_init() -> (Model, Checkpoint) {
    let cfg = ModelConfig::micro();
    let model = Model::new(&cfg).unwrap();
    let ck = Checkpoint {
        params: model.init_params(),
        config: cfg,
        training_step: 0,
    };
    (model, ck)
}

fn quick(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: Some(steps),
        batch_size: 2,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn f1_matches_hand_confusion_matrix() {
    // 3×3: GT forged at 0,1,3,4; prediction hits 0,1 and wrongly flags 8.
    let gt = [true, true, false, true, true, false, false, false, false];
    let pred = [true, true, false, false, false, false, false, false, true];
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..9 {
        match (pred[i], gt[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
    let oracle = 2.0 * p * r / (p + r);
    assert!((oracle - 4.0 / 7.0).abs() < 1e-12);
    assert!((f1_score(&pred, &gt) - oracle).abs() < 1e-12);
    assert_eq!(Confusion::from_masks(&pred, &gt), Confusion { tp: 2, fp: 1, fn_: 2, tn: 4 });

    assert_eq!(f1_score(&gt, &gt), 1.0);
    let complement: Vec<bool> = gt.iter().map(|g| !g).collect();
    assert_eq!(f1_score(&complement, &gt), 0.0);
}

#[test]
fn empty_training_set_is_a_config_error() {
    let (_, ck) = micro_init();
    assert!(matches!(train_on(&quick(1, 0), &ck, &[]), Err(Error::Config(_))));
    let (model, ck) = micro_init();
    assert!(matches!(evaluate_on(&model, &ck.params, &[], 0.5, 0.005), Err(Error::Config(_))));
}

#[test]
fn same_seed_reproduces_training() {
    let (_, ck) = micro_init();
    let samples = generate_samples(&DatasetOptions::new(3, Domain::A, 5, 64)).unwrap();
    let a = train_on(&quick(4, 3), &ck, &samples).unwrap();
    let b = train_on(&quick(4, 3), &ck, &samples).unwrap();
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.checkpoint.params.checksum(), b.checkpoint.params.checksum());
    assert_eq!(a.checkpoint.training_step, 4);
}

#[test]
fn zero_lambda_continual_learning_equals_finetuning() {
    let (_, ck) = micro_init();
    let samples = generate_samples(&DatasetOptions::new(3, Domain::B, 6, 64)).unwrap();
    let before = ck.params.checksum();
    let pcsd = PcsdConfig {
        lambda: 0.0,
        ..PcsdConfig::default()
    };
    let cl = continual_learn_on(&ck, &samples, &pcsd, &quick(4, 9)).unwrap();
    let ft = train_on(&quick(4, 9), &ck, &samples).unwrap();
    assert_eq!(cl.step_losses, ft.step_losses);
    assert_eq!(cl.checkpoint.params.checksum(), ft.checkpoint.params.checksum());
    assert_eq!(ck.params.checksum(), before);
}

#[test]
fn distillation_leaves_teacher_untouched_and_changes_student() {
    let (_, ck) = micro_init();
    let samples = generate_samples(&DatasetOptions::new(2, Domain::B, 7, 64)).unwrap();
    let before = ck.params.checksum();
    let cl = continual_learn_on(&ck, &samples, &PcsdConfig::default(), &quick(3, 1)).unwrap();
    assert_eq!(ck.params.checksum(), before);
    assert_ne!(cl.checkpoint.params.checksum(), before);
}

#[test]
fn augmented_training_is_reproducible_and_sees_other_views() {
    let (_, ck) = micro_init();
    let samples = generate_samples(&DatasetOptions::new(3, Domain::A, 5, 64)).unwrap();
    let aug = TrainConfig {
        augment: true,
        ..quick(4, 3)
    };
    let a = train_on(&aug, &ck, &samples).unwrap();
    let b = train_on(&aug, &ck, &samples).unwrap();
    assert_eq!(a.checkpoint.params.checksum(), b.checkpoint.params.checksum());
    let plain = train_on(&quick(4, 3), &ck, &samples).unwrap();
    assert_ne!(a.step_losses, plain.step_losses);
}

#[test]
fn augmented_teacher_sees_the_same_view_as_the_student() {
    // Teacher equals the initial student, so the first step carries no
    // distillation loss only if both looked at the same flipped image.
    let (_, ck) = micro_init();
    let samples = generate_samples(&DatasetOptions::new(3, Domain::B, 8, 64)).unwrap();
    for seed in 0..4 {
        let cfg = TrainConfig {
            augment: true,
            ..quick(1, seed)
        };
        let cl = continual_learn_on(&ck, &samples, &PcsdConfig::default(), &cfg).unwrap();
        let ft = train_on(&cfg, &ck, &samples).unwrap();
        assert!((cl.step_losses[0] - ft.step_losses[0]).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn huge_lambda_pins_student_to_teacher() {
    let (model, ck) = micro_init();
    let train = generate_samples(&DatasetOptions::new(4, Domain::B, 8, 64)).unwrap();
    let held_out = generate_samples(&DatasetOptions::new(4, Domain::B, 9, 64)).unwrap();
    let steps = TrainConfig {
        steps: Some(50),
        batch_size: 2,
        seed: 2,
        ce_weight: 0.0,
        ..TrainConfig::default()
    };
    let pcsd = PcsdConfig {
        lambda: 1e6,
        ..PcsdConfig::default()
    };
    let cl = continual_learn_on(&ck, &train, &pcsd, &steps).unwrap();
    let ft = train_on(&TrainConfig { ce_weight: 1.0, ..steps.clone() }, &ck, &train).unwrap();
    let drift = |p: &cmfd_core::Params<f32>| {
        let mut tot = 0.0;
        let mut n = 0;
        for s in &held_out {
            let t = model.bundle(&ck.params, s.image.tensor()).unwrap();
            let st = model.bundle(p, s.image.tensor()).unwrap();
            for (a, b) in t.iter().zip(&st) {
                tot += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
                n += a.numel();
            }
        }
        tot / n as f64
    };
    let (pinned, free) = (drift(&cl.checkpoint.params), drift(&ft.checkpoint.params));
    println!("mean |teacher − student| over bundles: λ=1e6 {pinned:.3e}, plain finetune {free:.3e}");
    assert!(pinned <= 1e-3, "distilled student drifted by {pinned}");
    assert!(pinned < free);
}

#[test]
fn divergence_names_the_step() {
    let (_, mut ck) = micro_init();
    ck.params.map_prefix("decoder.seg.bias", |_, t| t.data_mut()[0] = f32::NAN);
    let samples = generate_samples(&DatasetOptions::new(1, Domain::A, 1, 64)).unwrap();
    match train_on(&quick(2, 0), &ck, &samples) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.step_losses)),
    }
}

#[test]
fn overfit_then_evaluate_and_infer() {
    let (model, samples, r) = overfit_run();
    assert!(r.epoch_losses.last().unwrap() < r.epoch_losses.first().unwrap());
    let rep = evaluate_on(&model, &r.checkpoint.params, &samples, DEFAULT_TAU, DEFAULT_THETA).unwrap();
    assert!(rep.mean_f1 >= 0.95, "train F1 {:?}", rep.f1);
    assert!((rep.mean_f1 - rep.f1.iter().sum::<f64>() / rep.f1.len() as f64).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    r.checkpoint.save(&ckpt).unwrap();
    let ck = Checkpoint::load(&ckpt).unwrap();

    // Same numbers through the file-based evaluation.
    let m = synth::write_dataset(&samples, &dir.path().join("data")).unwrap();
    let rep2 = evaluate(&ck, &m.path, DEFAULT_TAU, DEFAULT_THETA).unwrap();
    assert_eq!(rep2.f1, rep.f1);

    let img_path = dir.path().join("data").join(&m.entries[0].image);
    let out = dir.path().join("pred/mask.png");
    let res = infer(&ck, &img_path, &out, DEFAULT_TAU).unwrap();
    assert_eq!((res.height, res.width), (64, 64));
    let (h, w, pred) = synth::load_mask_png(&out).unwrap();
    assert_eq!((h, w), (64, 64));
    assert!(f1_score(&pred, &samples[0].mask.forged()) >= 0.9);
    assert!(res.overlay_path.exists());

    // Flat gray image at a size that needs padding.
    let gray = dir.path().join("gray.png");
    synth::save_image_png(&Tensor::full(&[50, 70, 3], 0.5), &gray).unwrap();
    let res = infer(&ck, &gray, &dir.path().join("gray_mask.png"), DEFAULT_TAU).unwrap();
    println!("flat gray forged fraction {:.4}", res.forged_fraction);
    let (h, w, _) = synth::load_mask_png(&res.mask_path).unwrap();
    assert_eq!((h, w), (50, 70));
    assert!((0.0..=1.0).contains(&res.forged_fraction));
}

#[test]
fn unreadable_image_is_an_error() {
    let (_, ck) = micro_init();
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.png");
    std::fs::write(&bogus, b"not an image").unwrap();
    assert!(infer(&ck, &bogus, &dir.path().join("o.png"), 0.5).is_err());
    assert!(matches!(infer(&ck, &dir.path().join("missing.png"), &dir.path().join("o.png"), 0.5), Err(Error::NotFound(_))));
}
