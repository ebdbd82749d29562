//! Training, continual learning, evaluation and inference drivers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{format_f64, parse, parse_kv_lines, PcsdConfig};
use crate::error::{Error, Result};
use crate::metrics::{forged_fraction, is_false_alarm, threshold_mask, Confusion};
use crate::model::Model;
use crate::nn::{Bound, Params};
use crate::optim::{AdamW, AdamWConfig};
use crate::pcsd::{total_loss_graph, LossTerms};
use crate::synth::{self, Sample};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Exact number of optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub precision: Precision,
    /// Weight of the cross-entropy term (1 for ordinary training).
    pub ce_weight: f64,
    /// Log the running loss every this many steps (0 = never).
    pub log_every: usize,
    /// Show each drawn sample under a random flip or right-angle rotation.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            steps: None,
            batch_size: 4,
            lr: AdamWConfig::default().lr,
            optimizer: "adamw".into(),
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            train_manifest: None,
            val_manifest: None,
            checkpoint: None,
            precision: Precision::F32,
            ce_weight: 1.0,
            log_every: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.optimizer != "adamw" {
            return Err(Error::Config(format!("unknown optimizer `{}`", self.optimizer)));
        }
        if !(self.ce_weight >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("ce_weight and weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.steps = if value.is_empty() { None } else { Some(parse(key, value)?) },
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "train_manifest" => self.train_manifest = path(value),
            "val_manifest" => self.val_manifest = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "precision" => {
                self.precision = match value {
                    "f32" | "single" => Precision::F32,
                    "f64" | "double" => Precision::F64,
                    _ => return Err(Error::Config(format!("unknown precision `{value}`"))),
                }
            }
            "ce_weight" => self.ce_weight = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown train config key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("steps".into(), self.steps.map(|s| s.to_string()).unwrap_or_default()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), format_f64(self.lr)),
            ("optimizer".into(), self.optimizer.clone()),
            ("weight_decay".into(), format_f64(self.weight_decay)),
            ("seed".into(), self.seed.to_string()),
            ("train_manifest".into(), p(&self.train_manifest)),
            ("val_manifest".into(), p(&self.val_manifest)),
            ("checkpoint".into(), p(&self.checkpoint)),
            (
                "precision".into(),
                match self.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                },
            ),
            ("ce_weight".into(), format_f64(self.ce_weight)),
            ("log_every".into(), self.log_every.to_string()),
            ("augment".into(), self.augment.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_kv_lines(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of `step_losses` over each pass through the data.
    pub epoch_losses: Vec<f64>,
}

struct Teacher<'a> {
    model: Model,
    params: &'a Params<f32>,
    /// Bundles keyed by (sample, dihedral variant), filled on first use.
    bundles: BTreeMap<(usize, usize), Vec<Tensor<f32>>>,
    pcsd: &'a PcsdConfig,
}

impl Teacher<'_> {
    fn bundle(&mut self, i: usize, k: usize, image: &Tensor<f32>) -> Result<&[Tensor<f32>]> {
        if !self.bundles.contains_key(&(i, k)) {
            let b = self.model.bundle(self.params, image)?;
            self.bundles.insert((i, k), b);
        }
        Ok(&self.bundles[&(i, k)])
    }
}

/// Loss and gradients of one sample, computed in precision `T`.
fn sample_grads<T: Float>(
    model: &Model,
    params: &Params<T>,
    sample: &Sample,
    teacher: Option<(&[Tensor<f32>], &PcsdConfig)>,
    ce_weight: f64,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::<T>::new();
    let bound = Bound::new(&mut g, params, true);
    let x = g.constant(sample.image.tensor().cast());
    let out = model.forward(&mut g, &bound, x)?;
    let gt: Tensor<T> = sample.mask.tensor().cast();
    let members = out.decoder.bundle.members;
    let teacher_t: Option<Vec<Tensor<T>>> = teacher.map(|(b, _)| b.iter().map(Tensor::cast).collect());
    let default_pcsd = PcsdConfig {
        lambda: 0.0,
        ..PcsdConfig::default()
    };
    let pcsd = teacher.map(|(_, c)| c).unwrap_or(&default_pcsd);
    let LossTerms { total, .. } = total_loss_graph(
        &mut g,
        out.decoder.logits,
        &gt,
        teacher_t.as_deref(),
        &members,
        pcsd,
        ce_weight,
    )?;
    let loss = g.value(total)[0].f64();
    let mut grads = g.backward(total)?;
    let mut out = BTreeMap::new();
    for (name, &v) in bound.iter() {
        if let Some(t) = grads.take(v) {
            out.insert(name.clone(), t.cast());
        }
    }
    Ok((loss, out))
}

fn run(cfg: &TrainConfig, init: &Checkpoint, samples: &[Sample], mut teacher: Option<&mut Teacher>) -> Result<TrainResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model = Model::new(&init.config)?;
    init.params
        .check_against(&model.declarations())
        .map_err(Error::Config)?;
    let mut params = init.params.clone();
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.steps.unwrap_or(cfg.epochs * per_epoch);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch_acc = (0.0, 0usize);
    let variants = if init.config.image_height == init.config.image_width {
        synth::DIHEDRAL_VARIANTS
    } else {
        4
    };
    for step in 0..total_steps {
        if cursor >= order.len() {
            if epoch_acc.1 > 0 {
                epoch_losses.push(epoch_acc.0 / epoch_acc.1 as f64);
                epoch_acc = (0.0, 0);
            }
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += batch.len();
        let params64 = match cfg.precision {
            Precision::F64 => Some(params.cast::<f64>()),
            Precision::F32 => None,
        };
        let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &i in batch {
            let k = if cfg.augment { rng.gen_range(0..variants) } else { 0 };
            let shown;
            let sample = if k == 0 {
                &samples[i]
            } else {
                shown = samples[i].dihedral(k)?;
                &shown
            };
            let t = match teacher.as_deref_mut() {
                Some(t) => {
                    let pcsd = t.pcsd;
                    Some((t.bundle(i, k, sample.image.tensor())?, pcsd))
                }
                None => None,
            };
            let (loss, grads) = match &params64 {
                Some(p) => sample_grads(&model, p, sample, t, cfg.ce_weight)?,
                None => sample_grads(&model, &params, sample, t, cfg.ce_weight)?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("non-finite loss {loss} on sample {i}"),
                });
            }
            loss_sum += loss;
            for (k, gr) in grads {
                match sum.get_mut(&k) {
                    Some(acc) => acc.add_assign(&gr),
                    None => {
                        sum.insert(k, gr);
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for gr in sum.values_mut() {
            gr.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        opt.step(&mut params, &sum);
        let l = loss_sum / batch.len() as f64;
        step_losses.push(l);
        epoch_acc.0 += l;
        epoch_acc.1 += 1;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            log::info!("step {} loss {:.5}", step + 1, l);
        }
    }
    if epoch_acc.1 > 0 {
        epoch_losses.push(epoch_acc.0 / epoch_acc.1 as f64);
    }
    let checkpoint = Checkpoint {
        params,
        config: init.config.clone(),
        training_step: init.training_step + total_steps as u64,
    };
    if let Some(path) = &cfg.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainResult {
        checkpoint,
        step_losses,
        epoch_losses,
    })
}

/// Supervised training with cross-entropy on in-memory samples.
pub fn train_on(cfg: &TrainConfig, init: &Checkpoint, samples: &[Sample]) -> Result<TrainResult> {
    run(cfg, init, samples, None)
}

/// Supervised training on `cfg.train_manifest`.
pub fn train(cfg: &TrainConfig, init: &Checkpoint) -> Result<TrainResult> {
    let m = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("train_manifest is not set".into()))?;
    let samples = synth::load_dataset(m)?;
    train_on(cfg, init, &samples)
}

/// Distill from a frozen copy of `old` while fitting `samples`. With
/// `λ = 0` the teacher is never evaluated and the run equals [`train_on`].
pub fn continual_learn_on(
    old: &Checkpoint,
    samples: &[Sample],
    pcsd: &PcsdConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    pcsd.validate()?;
    if pcsd.lambda == 0.0 {
        return run(cfg, old, samples, None);
    }
    let model = Model::new(&old.config)?;
    old.params
        .check_against(&model.declarations())
        .map_err(|m| Error::Config(format!("teacher: {m}")))?;
    let teacher_params = old.params.clone();
    let before = teacher_params.checksum();
    let mut teacher = Teacher {
        model,
        params: &teacher_params,
        bundles: BTreeMap::new(),
        pcsd,
    };
    let res = run(cfg, old, samples, Some(&mut teacher))?;
    if teacher_params.checksum() != before {
        return Err(Error::Numerical("teacher parameters changed during distillation".into()));
    }
    Ok(res)
}

pub fn continual_learn(old: &Checkpoint, manifest: &Path, pcsd: &PcsdConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    let samples = synth::load_dataset(manifest)?;
    continual_learn_on(old, &samples, pcsd, cfg)
}

/// Default decision threshold on the forged-class probability.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default predicted forged-pixel fraction above which a pristine image is a false alarm.
pub const DEFAULT_THETA: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub index: usize,
    pub pristine: bool,
    /// Pixel F1 (forged images only).
    pub f1: Option<f64>,
    pub forged_fraction: f64,
    /// Whether a pristine image was flagged.
    pub false_alarm: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    /// Per-image F1 of forged images, in manifest order.
    pub f1: Vec<f64>,
    pub mean_f1: f64,
    /// Flagged fraction of pristine images (0 when there are none).
    pub far: f64,
    pub num_forged: usize,
    pub num_pristine: usize,
    pub tau: f64,
    pub theta: f64,
    pub runtime_secs: f64,
}

pub fn evaluate_on(model: &Model, params: &Params<f32>, samples: &[Sample], tau: f64, theta: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let t0 = Instant::now();
    let mut per_image = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let m = model.predict(params, s.image.tensor())?;
        if m.shape() != s.mask.tensor().shape() {
            return Err(Error::Dataset {
                sample: index.to_string(),
                msg: format!("prediction {:?} vs ground truth {:?}", m.shape(), s.mask.tensor().shape()),
            });
        }
        let pred = threshold_mask(m.data(), tau);
        let gt = s.mask.forged();
        let pristine = !gt.iter().any(|&g| g);
        per_image.push(ImageScore {
            index,
            pristine,
            f1: (!pristine).then(|| Confusion::from_masks(&pred, &gt).f1()),
            forged_fraction: forged_fraction(&pred),
            false_alarm: pristine.then(|| is_false_alarm(&pred, theta)),
        });
    }
    let f1: Vec<f64> = per_image.iter().filter_map(|s| s.f1).collect();
    let alarms: Vec<bool> = per_image.iter().filter_map(|s| s.false_alarm).collect();
    Ok(EvalReport {
        mean_f1: if f1.is_empty() { 0.0 } else { f1.iter().sum::<f64>() / f1.len() as f64 },
        far: if alarms.is_empty() {
            0.0
        } else {
            alarms.iter().filter(|&&a| a).count() as f64 / alarms.len() as f64
        },
        num_forged: f1.len(),
        num_pristine: alarms.len(),
        f1,
        per_image,
        tau,
        theta,
        runtime_secs: t0.elapsed().as_secs_f64(),
    })
}

pub fn evaluate(ckpt: &Checkpoint, manifest: &Path, tau: f64, theta: f64) -> Result<EvalReport> {
    let samples = synth::load_dataset(manifest)?;
    let model = Model::new(&ckpt.config)?;
    evaluate_on(&model, &ckpt.params, &samples, tau, theta)
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mirror-pad (without repeating the edge pixel) to at least `min_h × min_w`
/// and to a multiple of 32.
pub fn reflect_pad(img: &Tensor<f32>, min_h: usize, min_w: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = img.dims3()?;
    let up = |n: usize, m: usize| n.max(m).div_ceil(32) * 32;
    let (ph, pw) = (up(h, min_h), up(w, min_w));
    let d = img.data();
    Ok(Tensor::from_fn(&[ph, pw, c], |i| {
        let (y, x, ch) = (i / (pw * c), (i / c) % pw, i % c);
        d[(reflect(y, h) * w + reflect(x, w)) * c + ch]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferResult {
    pub height: usize,
    pub width: usize,
    pub forged_fraction: f64,
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
}

/// Predict the mask of one image, working at a padded size and cropping
/// back. Writes the binary mask to `out` and a red overlay next to it
/// (`<stem>_overlay.png`).
pub fn infer_image(model: &Model, params: &Params<f32>, img: &Tensor<f32>, tau: f64) -> Result<Vec<bool>> {
    let (h, w, _) = img.dims3()?;
    let padded = reflect_pad(img, model.config.image_height, model.config.image_width)?;
    let pw = padded.shape()[1];
    let m = model.predict(params, &padded)?;
    let pred = threshold_mask(m.data(), tau);
    Ok((0..h * w).map(|i| pred[(i / w) * pw + i % w]).collect())
}

pub fn infer(ckpt: &Checkpoint, image_path: &Path, out: &Path, tau: f64) -> Result<InferResult> {
    let img = synth::load_image_png(image_path)?;
    let (h, w, _) = img.dims3()?;
    let model = Model::new(&ckpt.config)?;
    let pred = infer_image(&model, &ckpt.params, &img, tau)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    synth::save_mask_png(&pred, h, w, out)?;
    let stem = out.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "mask".into());
    let overlay_path = out.with_file_name(format!("{stem}_overlay.png"));
    let d = img.data();
    let overlay = Tensor::from_fn(&[h, w, 3], |i| {
        let v = d[i];
        if pred[i / 3] {
            let red = if i % 3 == 0 { 1.0 } else { 0.0 };
            0.5 * v + 0.5 * red
        } else {
            v
        }
    });
    synth::save_image_png(&overlay, &overlay_path)?;
    let ff = forged_fraction(&pred);
    log::info!("{}: forged fraction {:.4}", image_path.display(), ff);
    Ok(InferResult {
        height: h,
        width: w,
        forged_fraction: ff,
        mask_path: out.to_path_buf(),
        overlay_path,
    })
}
