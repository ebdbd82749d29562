mod settings;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cmfd_core::config::PcsdConfig;
use cmfd_core::harness::{self, TrainConfig, TrainResult, DEFAULT_TAU, DEFAULT_THETA};
use cmfd_core::synth::{self, DatasetOptions, Domain};
use cmfd_core::{Checkpoint, Model, ModelConfig};
use serde_json::{json, Map, Value};
use settings::{is_model_key, Settings};

/// Copy-move forgery detection: synthetic data, training, continual
/// learning, evaluation and inference.
#[derive(Parser)]
#[command(name = "cmfd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` file; flags and `--set` override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set any config key, e.g. `--set encoder.channels=16,32,48,64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Supervised training.
    Train(TrainArgs),
    /// Continual learning with pooled distillation from a frozen teacher.
    Cl(ClArgs),
    /// Pixel F1 and image-level false-alarm rate on a manifest.
    Eval(EvalArgs),
    /// Predict the mask of one image.
    Infer(InferArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    pristine_every: Option<String>,
    #[arg(long)]
    noise_std: Option<String>,
}

/// Training-loop keys shared by `train` and `cl`.
#[derive(Args)]
struct LoopFlags {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    train_manifest: Option<String>,
    #[arg(long)]
    val_manifest: Option<String>,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    ce_weight: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    /// `true` to train on random flips and right-angle rotations
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    theta: Option<String>,
}

impl LoopFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("epochs", self.epochs.clone()),
            ("steps", self.steps.clone()),
            ("batch_size", self.batch_size.clone()),
            ("lr", self.lr.clone()),
            ("optimizer", self.optimizer.clone()),
            ("weight_decay", self.weight_decay.clone()),
            ("seed", self.seed.clone()),
            ("train_manifest", self.train_manifest.clone()),
            ("val_manifest", self.val_manifest.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("precision", self.precision.clone()),
            ("ce_weight", self.ce_weight.clone()),
            ("log_every", self.log_every.clone()),
            ("augment", self.augment.clone()),
            ("tau", self.tau.clone()),
            ("theta", self.theta.clone()),
        ]
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    looping: LoopFlags,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<String>,
    /// Architecture preset: `default`, `small` or `micro`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    model_seed: Option<String>,
}

#[derive(Args)]
struct ClArgs {
    #[command(flatten)]
    looping: LoopFlags,
    /// Checkpoint of the old task; frozen as the teacher.
    #[arg(long)]
    teacher: Option<String>,
    /// Shorthand for `pcsd.lambda`.
    #[arg(long)]
    lambda: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    theta: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    image: Option<String>,
    /// Output mask path; the overlay goes next to it.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    tau: Option<String>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let t0 = Instant::now();
    let c = &cli.common;
    let (name, (config, result)) = match cli.command {
        Command::Synth(a) => ("synth", synth_cmd(c, a)?),
        Command::Train(a) => ("train", train_cmd(c, a)?),
        Command::Cl(a) => ("cl", cl_cmd(c, a)?),
        Command::Eval(a) => ("eval", eval_cmd(c, a)?),
        Command::Infer(a) => ("infer", infer_cmd(c, a)?),
    };
    let report = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "runtime_secs": t0.elapsed().as_secs_f64(),
        "result": result,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &c.report {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text).with_context(|| format!("writing report {}", p.display()))?;
            log::info!("report written to {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

type Output = (Map<String, Value>, Value);

fn echo(pairs: impl IntoIterator<Item = (String, String)>) -> Map<String, Value> {
    pairs.into_iter().map(|(k, v)| (k, Value::String(v))).collect()
}

fn synth_cmd(c: &Common, a: SynthArgs) -> Result<Output> {
    let mut s = Settings::load(
        c.config.as_deref(),
        &c.set,
        vec![
            ("out", a.out),
            ("n", a.n),
            ("domain", a.domain),
            ("seed", a.seed),
            ("size", a.size),
            ("pristine_every", a.pristine_every),
            ("noise_std", a.noise_std),
        ],
    )?;
    let out = PathBuf::from(s.require("out")?);
    let n: usize = s.take_parsed("n")?.unwrap_or(64);
    let domain: Domain = s.take_parsed("domain")?.unwrap_or(Domain::A);
    let seed: u64 = s.take_parsed("seed")?.unwrap_or(0);
    let size: usize = s.take_parsed("size")?.unwrap_or(128);
    let mut opts = DatasetOptions::new(n, domain, seed, size);
    opts.pristine_every = s.take_parsed("pristine_every")?.unwrap_or(0);
    opts.noise_std = s.take_parsed("noise_std")?.unwrap_or(0.0);
    s.finish()?;
    let manifest = synth::generate_dataset(&opts, &out)?;
    let pristine = (0..n).filter(|&i| !opts.spec(i).forged).count();
    log::info!("wrote {} samples to {}", manifest.len(), manifest.path.display());
    let config = echo([
        ("out".to_string(), out.display().to_string()),
        ("n".into(), n.to_string()),
        ("domain".into(), domain.to_string()),
        ("seed".into(), seed.to_string()),
        ("size".into(), size.to_string()),
        ("pristine_every".into(), opts.pristine_every.to_string()),
        ("noise_std".into(), opts.noise_std.to_string()),
    ]);
    Ok((
        config,
        json!({ "manifest": manifest.path, "samples": manifest.len(), "pristine": pristine }),
    ))
}

/// Split loop keys, evaluation thresholds and the rest.
fn loop_config(s: &mut Settings) -> Result<(TrainConfig, f64, f64)> {
    let tau = s.take_parsed("tau")?.unwrap_or(DEFAULT_TAU);
    let theta = s.take_parsed("theta")?.unwrap_or(DEFAULT_THETA);
    let mut cfg = TrainConfig::default();
    for (k, v) in s.drain_matching(|k| !is_model_key(k)) {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    if cfg.checkpoint.is_none() {
        bail!("missing required setting `checkpoint` (output path)");
    }
    Ok((cfg, tau, theta))
}

fn train_summary(r: &TrainResult, cfg: &TrainConfig, model: &Model, tau: f64, theta: f64) -> Result<Value> {
    let validation = match &cfg.val_manifest {
        Some(m) => {
            let samples = synth::load_dataset(m)?;
            let rep = harness::evaluate_on(model, &r.checkpoint.params, &samples, tau, theta)?;
            log::info!("validation mean F1 {:.4}, FAR {:.4}", rep.mean_f1, rep.far);
            serde_json::to_value(rep)?
        }
        None => Value::Null,
    };
    Ok(json!({
        "steps": r.step_losses.len(),
        "first_loss": r.step_losses.first(),
        "final_loss": r.step_losses.last(),
        "epoch_losses": r.epoch_losses,
        "checkpoint": cfg.checkpoint,
        "training_step": r.checkpoint.training_step,
        "num_params": r.checkpoint.params.num_scalars(),
        "validation": validation,
    }))
}

fn train_cmd(c: &Common, a: TrainArgs) -> Result<Output> {
    let mut flags = a.looping.pairs();
    flags.extend([
        ("init", a.init),
        ("preset", a.preset),
        ("image_size", a.image_size),
        ("model_seed", a.model_seed),
    ]);
    let mut s = Settings::load(c.config.as_deref(), &c.set, flags)?;
    let init_path = s.take("init");
    let preset = s.take("preset");
    let model_keys = s.drain_matching(is_model_key);
    let init = match &init_path {
        Some(p) => {
            if preset.is_some() || !model_keys.is_empty() {
                bail!("`init` fixes the architecture; drop `preset` and model keys");
            }
            Checkpoint::load(Path::new(p))?
        }
        None => {
            let mut config = match preset.as_deref().unwrap_or("small") {
                "default" => ModelConfig::default(),
                "small" => ModelConfig::small(128),
                "micro" => ModelConfig::micro(),
                other => bail!("unknown preset `{other}`"),
            };
            for (k, v) in &model_keys {
                config.set(if k == "model_seed" { "seed" } else { k }, v)?;
            }
            config.validate()?;
            let params = Model::new(&config)?.init_params();
            Checkpoint {
                params,
                config,
                training_step: 0,
            }
        }
    };
    let (cfg, tau, theta) = loop_config(&mut s)?;
    s.finish()?;
    let model = Model::new(&init.config)?;
    log::info!("training {} parameters", init.params.num_scalars());
    let r = harness::train(&cfg, &init)?;
    let mut config = echo(cfg.entries());
    config.extend(echo(init.config.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v))));
    config.insert("init".into(), json!(init_path));
    config.insert("tau".into(), json!(tau));
    config.insert("theta".into(), json!(theta));
    Ok((config, train_summary(&r, &cfg, &model, tau, theta)?))
}

fn cl_cmd(c: &Common, a: ClArgs) -> Result<Output> {
    let mut flags = a.looping.pairs();
    flags.extend([("teacher", a.teacher), ("pcsd.lambda", a.lambda)]);
    let mut s = Settings::load(c.config.as_deref(), &c.set, flags)?;
    let teacher_path = s.require("teacher")?;
    let old = Checkpoint::load(Path::new(&teacher_path))?;
    let mut model_cfg = old.config.clone();
    for (k, v) in s.drain_matching(is_model_key) {
        if !k.starts_with("pcsd.") {
            bail!("`{k}` would change the teacher's architecture");
        }
        model_cfg.set(&k, &v)?;
    }
    let pcsd: PcsdConfig = model_cfg.pcsd.clone();
    pcsd.validate()?;
    let (cfg, tau, theta) = loop_config(&mut s)?;
    s.finish()?;
    let manifest = cfg
        .train_manifest
        .clone()
        .context("missing required setting `train_manifest` (new-task data)")?;
    let model = Model::new(&old.config)?;
    let r = harness::continual_learn(&old, &manifest, &pcsd, &cfg)?;
    let mut config = echo(cfg.entries());
    config.extend(echo(model_cfg.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v))));
    config.insert("teacher".into(), json!(teacher_path));
    config.insert("tau".into(), json!(tau));
    config.insert("theta".into(), json!(theta));
    Ok((config, train_summary(&r, &cfg, &model, tau, theta)?))
}

fn eval_cmd(c: &Common, a: EvalArgs) -> Result<Output> {
    let mut s = Settings::load(
        c.config.as_deref(),
        &c.set,
        vec![
            ("checkpoint", a.checkpoint),
            ("manifest", a.manifest),
            ("tau", a.tau),
            ("theta", a.theta),
        ],
    )?;
    let ckpt = s.require("checkpoint")?;
    let manifest = s.require("manifest")?;
    let tau = s.take_parsed("tau")?.unwrap_or(DEFAULT_TAU);
    let theta = s.take_parsed("theta")?.unwrap_or(DEFAULT_THETA);
    s.finish()?;
    let ck = Checkpoint::load(Path::new(&ckpt))?;
    let rep = harness::evaluate(&ck, Path::new(&manifest), tau, theta)?;
    log::info!("mean F1 {:.4} over {} forged images, FAR {:.4}", rep.mean_f1, rep.num_forged, rep.far);
    let config = echo([
        ("checkpoint".to_string(), ckpt),
        ("manifest".into(), manifest),
        ("tau".into(), tau.to_string()),
        ("theta".into(), theta.to_string()),
    ]);
    Ok((config, serde_json::to_value(rep)?))
}

fn infer_cmd(c: &Common, a: InferArgs) -> Result<Output> {
    let mut s = Settings::load(
        c.config.as_deref(),
        &c.set,
        vec![
            ("checkpoint", a.checkpoint),
            ("image", a.image),
            ("out", a.out),
            ("tau", a.tau),
        ],
    )?;
    let ckpt = s.require("checkpoint")?;
    let image = s.require("image")?;
    let out = s.require("out")?;
    let tau = s.take_parsed("tau")?.unwrap_or(DEFAULT_TAU);
    s.finish()?;
    let ck = Checkpoint::load(Path::new(&ckpt))?;
    let r = harness::infer(&ck, Path::new(&image), Path::new(&out), tau)?;
    let config = echo([
        ("checkpoint".to_string(), ckpt),
        ("image".into(), image),
        ("out".into(), out),
        ("tau".into(), tau.to_string()),
    ]);
    Ok((config, serde_json::to_value(r)?))
}
