//! Training loop for both the teacher and the student.
//!
//! Each step draws a batch of random crops, picks lambda (fixed or
//! log-uniform), runs the student in training mode, optionally runs the
//! frozen teacher on the same batch, and takes one Adam step on the total
//! loss after global gradient-norm clipping. An exponential moving average
//! of the student weights is kept and saved as the output checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{cached_synthetic_dir, synthetic_set, ImageSet};
use crate::distill::{detach_output, loss_total, sample_lambda, Adapters, Guidance, GuidanceInputs, LossReport};
use crate::error::{Error, Result};
use crate::latent::Variant;
use crate::model::{ArchConfig, Codec, NUM_TAPS};

/// File names written into the output directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaSchedule {
    Fixed { value: f64 },
    /// Log-uniform over `[64, 8192]` every step.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// A directory of PNG files.
    Dir(PathBuf),
    /// Rendered synthetic images.
    Synthetic { count: usize, size: u32, seed: u64 },
}

impl DataSource {
    /// Loads the images. Synthetic sets are rendered into the cache
    /// directory when `use_cache` is set, otherwise kept in memory.
    pub fn load(&self, use_cache: bool) -> Result<ImageSet> {
        match self {
            DataSource::Dir(dir) => ImageSet::from_dir(dir),
            DataSource::Synthetic { count, size, seed } if use_cache => {
                ImageSet::from_dir(&cached_synthetic_dir(*count, *size, *seed)?)
            }
            DataSource::Synthetic { count, size, seed } => Ok(synthetic_set(*count, *size, *seed)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub arch: ArchConfig,
    pub data: DataSource,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    pub iterations: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::crop")]
    pub crop: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// Fraction of the run, at the end, over which the learning rate decays
    /// along a half cosine. Zero keeps it constant.
    #[serde(default)]
    pub cosine_tail: f64,
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "defaults::ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: LambdaSchedule,
    #[serde(default)]
    pub guidance: Guidance,
    /// One-based feature taps used for guidance.
    #[serde(default = "defaults::taps")]
    pub taps: Vec<usize>,
    /// Teacher checkpoint, required when guidance is enabled.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
}

mod defaults {
    use super::LambdaSchedule;

    pub fn seed() -> u64 {
        0
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn crop() -> usize {
        256
    }
    pub fn learning_rate() -> f64 {
        2e-4
    }
    pub fn grad_clip() -> f64 {
        2.0
    }
    pub fn ema_decay() -> f64 {
        0.9999
    }
    pub fn lambda() -> LambdaSchedule {
        LambdaSchedule::Sampled
    }
    pub fn taps() -> Vec<usize> {
        (1..=8).collect()
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be positive".into()));
        }
        if self.crop == 0 || self.crop % crate::model::ALIGN != 0 {
            return Err(Error::Config(format!("crop {} is not a positive multiple of 32", self.crop)));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} not in [0, 1)", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.cosine_tail) {
            return Err(Error::Config(format!("cosine_tail {} not in [0, 1]", self.cosine_tail)));
        }
        if let LambdaSchedule::Fixed { value } = self.lambda {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("fixed lambda {value} must be positive")));
            }
        }
        if let Some(t) = self.taps.iter().find(|&&t| t == 0 || t > NUM_TAPS) {
            return Err(Error::Config(format!("tap {t} is not in 1..=8")));
        }
        if self.guidance != Guidance::None {
            if self.teacher.is_none() {
                return Err(Error::Config("guided training needs a teacher checkpoint".into()));
            }
            if self.arch.variant != Variant::Student {
                return Err(Error::Config("only the student is trained with guidance".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let tail_start = ((1.0 - self.cosine_tail) * self.iterations as f64).floor() as usize;
        if self.cosine_tail == 0.0 || step < tail_start {
            return self.learning_rate;
        }
        let span = (self.iterations - tail_start).max(1) as f64;
        let progress = (step - tail_start) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Exponential moving average of parameters. The effective decay at update
/// `t` is `min(decay, (1 + t) / (10 + t))`, so short runs are not dominated
/// by the initial weights.
pub struct Ema {
    decay: f64,
    updates: usize,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(decay: f64, initial: BTreeMap<String, Tensor>) -> Self {
        Self { decay, updates: 0, shadow: initial }
    }

    pub fn current_decay(&self) -> f64 {
        let t = self.updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, params: &BTreeMap<String, Var>) -> Result<()> {
        let d = self.current_decay();
        for (name, var) in params {
            let shadow = self
                .shadow
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("EMA has no entry for {name}")))?;
            *shadow = ((&*shadow * d)? + (var.as_tensor().detach() * (1.0 - d))?)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }
}

/// One optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm_raw: f64,
    /// Global gradient norm after clipping, measured on the clipped grads.
    pub grad_norm: f64,
    pub learning_rate: f64,
}

pub struct Trainer {
    config: TrainConfig,
    student: Codec,
    adapters: Option<Adapters>,
    teacher: Option<Codec>,
    teacher_taps: Vec<usize>,
    params: Vec<Var>,
    opt: AdamW,
    ema: Ema,
    rng: ChaCha8Rng,
    teacher_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// `teacher` must be given exactly when guidance is enabled.
    pub fn new(config: TrainConfig, teacher: Option<Codec>) -> Result<Self> {
        config.arch.validate()?;
        let guided = config.guidance != Guidance::None;
        let teacher = match (guided, teacher) {
            (true, Some(t)) => Some(t),
            (true, None) => return Err(Error::Config("guided training needs a teacher".into())),
            (false, _) => None,
        };
        if let Some(t) = &teacher {
            if t.variant() != Variant::Teacher {
                return Err(Error::Config("the guiding model must be a teacher checkpoint".into()));
            }
            if config.guidance == Guidance::Mse && t.config().tap_channels() != config.arch.tap_channels() {
                return Err(Error::Config("MSE guidance needs matching tap widths".into()));
            }
        }
        let student = Codec::new(config.arch.clone(), config.seed)?;
        let adapters = if guided {
            Some(Adapters::new(&config.arch, config.seed ^ 0xada9, student.dtype())?)
        } else {
            None
        };
        let mut params = student.store().vars();
        if let Some(a) = &adapters {
            params.extend(a.store().vars());
        }
        let opt = AdamW::new(
            params.clone(),
            ParamsAdamW {
                lr: config.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        let ema = Ema::new(config.ema_decay, student.store().snapshot()?);
        let teacher_taps = config.taps.iter().map(|t| t - 1).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            teacher_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7eac_4e25),
            config,
            student,
            adapters,
            teacher,
            teacher_taps,
            params,
            opt,
            ema,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn student(&self) -> &Codec {
        &self.student
    }

    pub fn ema(&self) -> &Ema {
        &self.ema
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// A codec holding the EMA weights.
    pub fn ema_codec(&self) -> Result<Codec> {
        let codec = Codec::new(self.config.arch.clone(), self.config.seed)?;
        codec.store().load(self.ema.weights())?;
        Ok(codec)
    }

    pub fn step(&mut self, data: &ImageSet) -> Result<StepRecord> {
        let x = data.random_batch(&mut self.rng, self.config.batch_size, self.config.crop)?;
        let lambda = match self.config.lambda {
            LambdaSchedule::Fixed { value } => value,
            LambdaSchedule::Sampled => sample_lambda(&mut self.rng),
        };
        let out = self.student.forward_train(&x, lambda, &mut self.rng)?;
        let terms = match (&self.teacher, &self.adapters) {
            (Some(teacher), Some(adapters)) => {
                let t_out = detach_output(&teacher.forward_train(&x, lambda, &mut self.teacher_rng)?);
                let e = self.student.embed_lambda(lambda)?;
                let g = GuidanceInputs {
                    mode: self.config.guidance,
                    teacher: &t_out,
                    adapters,
                    embedding: &e,
                    taps: &self.teacher_taps,
                };
                loss_total(&out, &x, lambda, Some(&g))?
            }
            _ => loss_total(&out, &x, lambda, None)?,
        };
        if !terms.report.total.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite loss at step {}: {:?}",
                self.step, terms.report
            )));
        }
        let mut grads = terms.total.backward()?;
        let (grad_norm_raw, grad_norm) = clip_grad_norm(&mut grads, &self.params, self.config.grad_clip)?;
        let lr = self.config.lr_at(self.step);
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        self.ema.update(self.student.store().named())?;
        let record = StepRecord {
            step: self.step,
            report: terms.report,
            grad_norm_raw,
            grad_norm,
            learning_rate: lr,
        };
        self.step += 1;
        Ok(record)
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before and after.
pub fn clip_grad_norm(grads: &mut GradStore, params: &[Var], max_norm: f64) -> Result<(f64, f64)> {
    let norm = global_norm(grads, params)?;
    if norm > max_norm {
        // Slightly under the bound so rounding cannot push the result over.
        let scale = max_norm / norm * (1.0 - 1e-6);
        for p in params {
            if let Some(g) = grads.remove(p.as_tensor()) {
                grads.insert(p.as_tensor(), (g * scale)?);
            }
        }
        return Ok((norm, global_norm(grads, params)?));
    }
    Ok((norm, norm))
}

fn global_norm(grads: &GradStore, params: &[Var]) -> Result<f64> {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = grads.get(p.as_tensor()) {
            sq += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Appends step records to a CSV file.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
        writer
            .write_record(["step", "l_lambda", "l_feature_sum", "l_rs", "total", "lambda", "grad_norm"])
            .map_err(csv_err)?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        self.writer
            .write_record([
                r.step.to_string(),
                r.report.l_lambda.to_string(),
                r.report.l_feature_sum().to_string(),
                r.report.l_rs.to_string(),
                r.report.total.to_string(),
                r.report.lambda.to_string(),
                r.grad_norm.to_string(),
            ])
            .map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub trainer: Trainer,
}

/// Runs `config.iterations` steps. With `out_dir`, writes `metrics.csv` as
/// it goes and the EMA checkpoint at the end.
pub fn run(config: TrainConfig, data: &ImageSet, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let teacher = match (&config.guidance, &config.teacher) {
        (Guidance::None, _) => None,
        (_, Some(path)) => Some(checkpoint::load(path)?),
        (_, None) => return Err(Error::Config("guided training needs a teacher checkpoint".into())),
    };
    run_with_teacher(config, data, teacher, out_dir)
}

/// Like [`run`] with the teacher already in memory.
pub fn run_with_teacher(
    config: TrainConfig,
    data: &ImageSet,
    teacher: Option<Codec>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsLog::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let iterations = config.iterations;
    let mut trainer = Trainer::new(config, teacher)?;
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let record = trainer.step(data)?;
        if record.step % 50 == 0 {
            log::info!(
                "step {} total {:.4} l_lambda {:.4} features {:.4} lambda {:.1}",
                record.step,
                record.report.total,
                record.report.l_lambda,
                record.report.l_feature_sum(),
                record.report.lambda
            );
        }
        if let Some(log) = log.as_mut() {
            log.append(&record)?;
        }
        history.push(record);
    }
    if let Some(dir) = out_dir {
        checkpoint::save_tensors(&dir.join(CHECKPOINT_FILE), &trainer.config.arch, trainer.ema.weights())?;
    }
    Ok(TrainOutcome { history, trainer })
}
