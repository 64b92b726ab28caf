//! The training loop and everything a run persists: its configuration text,
//! metrics rows, and checkpoints.
//!
//! Determinism contract: a run is a pure function of (model bits, optimizer
//! state, train config, dataset).  Step `s` always draws its reparameterized
//! noise from stream `(seed, TRAIN_NOISE, s)` and its batch from the epoch
//! permutation at `(seed, SHUFFLE, epoch)`, so a run restored from a
//! checkpoint at step `c` replays steps `c+1..` bit for bit.  Only the
//! wall-clock `seconds` column of the metrics is outside the contract.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pixelvae_core::checkpoint::Checkpoint;
use pixelvae_core::data::{batch_iter, Dataset};
use pixelvae_core::error::{Error, Result};
use pixelvae_core::model::{build_model, Model, ModelConfig};
use pixelvae_core::objective::{draw_level_noise, elbo, weighted_loss};
use pixelvae_core::optim::{adam_step, AdamHyper, AdamState};
use pixelvae_core::rng::{domain, Stream};

use crate::config::{join_kv, kv_to_map, split_namespaced};
use crate::io::save_checkpoint;

/// Evaluation noise streams start here so they can never collide with
/// training draws (which use stream indices 1..=steps).
const EVAL_NOISE_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// KL weight ramps linearly from 0 to 1 over this many steps; 0 disables
    /// the warm-up entirely.
    pub warmup_steps: u64,
    /// Free bits for the top latent level: while its batch-mean KL is below
    /// this many nats the term enters the loss as a constant, so nothing
    /// pushes the top level toward the prior.  The reported metrics always
    /// carry the true KL.  0 disables the floor.
    pub top_free_nats: f64,
    pub checkpoint_interval: u64,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            batch_size: 16,
            steps: 500,
            seed: 0,
            warmup_steps: 0,
            top_free_nats: 0.0,
            checkpoint_interval: 250,
            eval_interval: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("a run needs at least 1 step".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be at least 1 step".into()));
        }
        if !self.top_free_nats.is_finite() || self.top_free_nats < 0.0 {
            return Err(Error::Config("top_free_nats must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }

    /// One key=value per line, in fixed order.  `{}` formatting of f64 is
    /// shortest-round-trip, so parsing the text back yields identical bits.
    pub fn to_kv(&self) -> String {
        let clip = match self.clip_norm {
            Some(c) => format!("{c}"),
            None => "none".to_string(),
        };
        format!(
            "learning_rate={}\nbeta1={}\nbeta2={}\neps={}\nclip_norm={}\nbatch_size={}\n\
             steps={}\nseed={}\nwarmup_steps={}\ntop_free_nats={}\ncheckpoint_interval={}\n\
             eval_interval={}\n",
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            clip,
            self.batch_size,
            self.steps,
            self.seed,
            self.warmup_steps,
            self.top_free_nats,
            self.checkpoint_interval,
            self.eval_interval,
        )
    }

    pub fn from_kv(text: &str) -> Result<TrainConfig> {
        let map = kv_to_map(text);
        const KEYS: [&str; 12] = [
            "learning_rate",
            "beta1",
            "beta2",
            "eps",
            "clip_norm",
            "batch_size",
            "steps",
            "seed",
            "warmup_steps",
            "top_free_nats",
            "checkpoint_interval",
            "eval_interval",
        ];
        for k in KEYS {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("missing key '{k}'")));
            }
        }
        for k in map.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        let float = |k: &str| -> Result<f64> {
            map[k].parse().map_err(|_| Error::Config(format!("bad {k} '{}'", map[k])))
        };
        let int = |k: &str| -> Result<u64> {
            map[k].parse().map_err(|_| Error::Config(format!("bad {k} '{}'", map[k])))
        };
        let clip_norm = match map["clip_norm"].as_str() {
            "none" => None,
            _ => Some(float("clip_norm")?),
        };
        let config = TrainConfig {
            learning_rate: float("learning_rate")?,
            beta1: float("beta1")?,
            beta2: float("beta2")?,
            eps: float("eps")?,
            clip_norm,
            batch_size: int("batch_size")? as usize,
            steps: int("steps")?,
            seed: int("seed")?,
            warmup_steps: int("warmup_steps")?,
            top_free_nats: float("top_free_nats")?,
            checkpoint_interval: int("checkpoint_interval")?,
            eval_interval: int("eval_interval")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// One metrics row; `elbo` always equals `recon + kl.sum()` exactly because
/// all three are read off the same objective breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "step,elbo,recon,kl_1,kl_2,seconds";

impl MetricsRow {
    /// Fixed six columns; absent KL levels are written as 0.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.elbo,
            self.recon,
            self.kl.first().copied().unwrap_or(0.0),
            self.kl.get(1).copied().unwrap_or(0.0),
            self.seconds,
        )
    }
}

/// The configuration block embedded in checkpoints: the model and train
/// configs under their namespaces, same format as a `--config` file.
pub fn config_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut out = String::new();
    for line in model.to_kv().lines() {
        out.push_str("model.");
        out.push_str(line);
        out.push('\n');
    }
    for line in train.to_kv().lines() {
        out.push_str("train.");
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn parse_config_text(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let (model, train) = split_namespaced(text)?;
    Ok((ModelConfig::from_kv(&join_kv(&model))?, TrainConfig::from_kv(&join_kv(&train))?))
}

/// Captures a run at `step`: every model parameter plus its Adam moment
/// buffers (`opt.m.*` / `opt.v.*`, zeros if the parameter was never stepped).
pub fn snapshot(
    model: &Model,
    state: &AdamState,
    train: &TrainConfig,
    step: u64,
) -> Result<Checkpoint> {
    if state.step != step {
        return Err(Error::Contract(format!(
            "optimizer has taken {} steps but the checkpoint claims {step}",
            state.step
        )));
    }
    let mut ck = Checkpoint::new(config_text(&model.config, train), step);
    for (name, param) in model.params() {
        let dims = param.shape().to_vec();
        let len = param.data().len();
        ck.insert(name, dims.clone(), param.data().to_vec())?;
        let m = state.m.get(name).cloned().unwrap_or_else(|| vec![0.0; len]);
        let v = state.v.get(name).cloned().unwrap_or_else(|| vec![0.0; len]);
        ck.insert(&format!("opt.m.{name}"), dims.clone(), m)?;
        ck.insert(&format!("opt.v.{name}"), dims, v)?;
    }
    Ok(ck)
}

/// Inverse of [`snapshot`]: rebuilds the exact model and optimizer state.
/// Every parameter must be present with its exact shape, and the checkpoint
/// may not carry tensors this model has no use for.
pub fn restore(ck: &Checkpoint) -> Result<(Model, AdamState, TrainConfig)> {
    let (model_config, train_config) = parse_config_text(&ck.config_text)?;
    let mut model = build_model(model_config, 0)?;
    let mut state = AdamState { step: ck.step, ..AdamState::default() };
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in &names {
        let shape = model.params()[name].shape().to_vec();
        let record = ck.tensor(name)?;
        if record.dims != shape {
            return Err(Error::Format(format!(
                "tensor '{name}' has dims {:?}, model wants {shape:?}",
                record.dims
            )));
        }
        model.replace_param(name, record.data.clone())?;
        for (prefix, buffers) in [("opt.m.", &mut state.m), ("opt.v.", &mut state.v)] {
            let moment = ck.tensor(&format!("{prefix}{name}"))?;
            if moment.dims != shape {
                return Err(Error::Format(format!(
                    "tensor '{prefix}{name}' has dims {:?}, model wants {shape:?}",
                    moment.dims
                )));
            }
            buffers.insert(name.clone(), moment.data.clone());
        }
    }
    for name in ck.tensors.keys() {
        let bare = name.strip_prefix("opt.m.").or_else(|| name.strip_prefix("opt.v.")).unwrap_or(name);
        if !model.params().contains_key(bare) {
            return Err(Error::Format(format!("unexpected tensor '{name}' in checkpoint")));
        }
    }
    Ok((model, state, train_config))
}

/// Dataset-mean ELBO breakdown, batched.  Batch `b` draws its noise from
/// stream `(seed, TRAIN_NOISE, EVAL_NOISE_BASE + b)`, so evaluations never
/// reuse training noise even under the training seed.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let levels = model.config.levels.len();
    let (mut elbo_sum, mut recon_sum) = (0.0, 0.0);
    let mut kl_sum = vec![0.0; levels];
    let mut total = 0usize;
    for (b, batch) in batch_iter(dataset, batch_size, seed, 0).enumerate() {
        let n = batch.shape()[0];
        let mut stream = Stream::new(seed, domain::TRAIN_NOISE, EVAL_NOISE_BASE + b as u64);
        let noise = draw_level_noise(&model.config, n, &mut stream)?;
        let breakdown = elbo(model, &batch, &noise)?;
        elbo_sum += breakdown.total_value() * n as f64;
        recon_sum += breakdown.reconstruction() * n as f64;
        for (i, slot) in kl_sum.iter_mut().enumerate() {
            *slot += breakdown.kl(i) * n as f64;
        }
        total += n;
    }
    let scale = 1.0 / total as f64;
    Ok((elbo_sum * scale, recon_sum * scale, kl_sum.iter().map(|k| k * scale).collect()))
}

pub struct TrainOutcome {
    pub model: Model,
    pub state: AdamState,
    /// Rows emitted by this call (a resumed run re-emits nothing earlier).
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs steps `state.step + 1 ..= config.steps`.
///
/// A fresh model starts with `AdamState::new()`; passing a restored state
/// resumes its run.  With `out_dir`, metrics stream to `metrics.csv` and
/// checkpoints to `checkpoint-NNNNNN.pvae` at the configured intervals plus
/// the final step.  A non-finite loss aborts with [`Error::Training`],
/// leaving the checkpoints and metrics written so far on disk.
pub fn train(
    mut model: Model,
    mut state: AdamState,
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.config.validate()?;
    let (h, w) = dataset.image_hw();
    if (model.config.image_height, model.config.image_width) != (h, w)
        || model.config.image_channels != 1
    {
        return Err(Error::Config(format!(
            "model expects {}x{}x{} images, dataset is 1x{h}x{w}",
            model.config.image_channels, model.config.image_height, model.config.image_width
        )));
    }
    if state.step > config.steps {
        return Err(Error::Contract(format!(
            "checkpoint is at step {}, beyond the configured {}",
            state.step, config.steps
        )));
    }

    let mut metrics_file = match out_dir {
        Some(dir) => Some(open_metrics(dir, state.step)?),
        None => None,
    };
    let hyper = config.hyper();
    let batches_per_epoch = (dataset.len() + config.batch_size - 1) / config.batch_size;
    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut batches = None;
    let mut current_epoch = u64::MAX;

    for step in state.step + 1..=config.steps {
        let epoch = (step - 1) / batches_per_epoch as u64;
        let index = ((step - 1) % batches_per_epoch as u64) as usize;
        if epoch != current_epoch {
            let mut fresh = batch_iter(dataset, config.batch_size, config.seed, epoch);
            // Mid-epoch resume: skip the batches earlier steps consumed.
            for _ in 0..index {
                fresh.next();
            }
            batches = Some(fresh);
            current_epoch = epoch;
        }
        let batch = batches.as_mut().unwrap().next().expect("step maps inside its epoch");
        let n = batch.shape()[0];

        let mut stream = Stream::new(config.seed, domain::TRAIN_NOISE, step);
        let noise = draw_level_noise(&model.config, n, &mut stream)?;
        let breakdown = elbo(&model, &batch, &noise)?;

        let total = breakdown.total_value();
        if !total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {step}; last checkpoint retained"
            )));
        }
        for level in 0..model.config.levels.len() {
            let kl = breakdown.kl(level);
            if !(kl >= -1e-9) {
                return Err(Error::Training(format!(
                    "KL for level {} is {kl} at step {step}",
                    level + 1
                )));
            }
        }

        let beta = if config.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / config.warmup_steps as f64).min(1.0)
        };
        let loss = weighted_loss(&breakdown, beta)?;
        let grads = loss.backward()?;
        adam_step(&mut model, &grads, &mut state, &hyper)?;

        if step % config.eval_interval == 0 || step == config.steps {
            let row = MetricsRow {
                step,
                elbo: total,
                recon: breakdown.reconstruction(),
                kl: (0..model.config.levels.len()).map(|i| breakdown.kl(i)).collect(),
                seconds: started.elapsed().as_secs_f64(),
            };
            if let Some(file) = metrics_file.as_mut() {
                writeln!(file, "{}", row.to_csv())
                    .map_err(|e| Error::Format(format!("writing metrics: {e}")))?;
            }
            metrics.push(row);
        }
        if step % config.checkpoint_interval == 0 || step == config.steps {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("checkpoint-{step:06}.pvae"));
                save_checkpoint(&path, &snapshot(&model, &state, config, step)?)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { model, state, metrics, checkpoints })
}

/// Fresh runs truncate `metrics.csv`; resumed runs append, adding the header
/// only when the file is new or empty.
fn open_metrics(dir: &Path, start_step: u64) -> Result<File> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Format(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join("metrics.csv");
    let map_err = |e: std::io::Error| Error::Format(format!("opening {}: {e}", path.display()));
    let mut file = if start_step == 0 {
        File::create(&path).map_err(map_err)?
    } else {
        OpenOptions::new().create(true).append(true).open(&path).map_err(map_err)?
    };
    let need_header = start_step == 0
        || file.metadata().map_err(map_err)?.len() == 0;
    if need_header {
        writeln!(file, "{METRICS_HEADER}").map_err(map_err)?;
    }
    Ok(file)
}
