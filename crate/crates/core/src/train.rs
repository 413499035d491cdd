//! Training loop: permutation augmentation, warmup + cosine learning rate,
//! AdamW with global-norm clipping, CSV loss log and resumable checkpoints.
//!
//! Every epoch reseeds its RNG from `(seed, epoch)`, so a run resumed from a
//! checkpoint replays exactly the losses an uninterrupted run would produce.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{gaussian_like, q_sample, NoiseSchedule, ScheduleSpec};
use crate::exec::{map_range, map_slice, worker_count, Execution};
use crate::nn::{
    load_checkpoint, save_checkpoint, Checkpoint, Denoiser, DenoiserConfig, NnError, NoisedSample, OptimizerState, Real,
};
use crate::schema::{ArticulatedObject, ArticulationGraph, AttributeTensor, SchemaError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at epoch {epoch}; batch dumped to {dump}")]
    NonFiniteLoss { epoch: usize, dump: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub timesteps_per_object: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    pub seed: u64,
    /// Checkpoint period in epochs; `0` keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            batch: 64,
            timesteps_per_object: 10,
            lr: 5e-4,
            warmup_epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            augment: true,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch == 0 || self.timesteps_per_object == 0 {
            return bad("epochs, batch and timesteps_per_object must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || !(self.adam_eps > 0.0) {
            return bad("weight_decay and grad_clip must be non-negative, adam_eps positive");
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: a linear ramp `lr·(epoch+1)/warmup` during
/// warmup (so epoch 0 already takes a step of `lr/warmup`), then cosine decay
/// that reaches zero at the final epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let span = cfg.epochs.saturating_sub(1 + cfg.warmup_epochs);
    if span == 0 {
        return cfg.lr;
    }
    let progress = ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Uniformly random relabelling of the object's nodes.
pub fn augment_permute<G: Rng + ?Sized>(obj: &ArticulatedObject, rng: &mut G) -> ArticulatedObject {
    let mut perm: Vec<usize> = (0..obj.num_parts()).collect();
    perm.shuffle(rng);
    obj.permuted(&perm)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<R: Real> AdamW<R> {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            m: vec![R::zero(); n],
            v: vec![R::zero(); n],
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn update(&mut self, params: &mut [R], grad: &[R], lr: f64) {
        self.step += 1;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = R::of(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let c2 = R::of(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let (lr_r, eps, decay) = (R::of(lr), R::of(self.eps), R::of(1.0 - lr * self.weight_decay));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (R::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (R::one() - b2) * g * g;
            let mhat = self.m[i] * c1;
            let vhat = self.v[i] * c2;
            params[i] = params[i] * decay - lr_r * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<R: Real>(grad: &mut [R], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = R::of(max_norm / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    next_epoch: usize,
    step: u64,
    config: TrainConfig,
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    objects: Vec<&'a str>,
    timesteps: Vec<Vec<usize>>,
    losses: Vec<f64>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    /// Directory for `loss.csv`, checkpoints and NaN dumps; `None` keeps
    /// everything in memory.
    pub dir: Option<PathBuf>,
    pub execution: Execution,
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

pub struct Trainer<R: Real = f32> {
    pub model: Denoiser<R>,
    pub optimizer: AdamW<R>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub history: Vec<EpochLog>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl<R: Real> Trainer<R> {
    pub fn new(model_cfg: DenoiserConfig, cfg: TrainConfig, schedule: NoiseSchedule) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Denoiser::new(model_cfg, cfg.seed)?;
        let optimizer = AdamW::new(model.num_params(), &cfg);
        Ok(Trainer {
            model,
            optimizer,
            schedule,
            config: cfg,
            next_epoch: 0,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: Checkpoint<R>) -> Result<Self, TrainError> {
        let state: TrainState = serde_json::from_value(ck.train_state)
            .map_err(|e| TrainError::InvalidConfig(format!("checkpoint has no training state: {e}")))?;
        let schedule = NoiseSchedule::from_spec(ck.schedule).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let mut optimizer = AdamW::new(ck.model.num_params(), &state.config);
        if let Some(opt) = ck.optimizer {
            optimizer.m = opt.m;
            optimizer.v = opt.v;
        }
        optimizer.step = state.step;
        Ok(Trainer {
            model: ck.model,
            optimizer,
            schedule,
            config: state.config,
            next_epoch: state.next_epoch,
            history: Vec::new(),
        })
    }

    pub fn resume(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }

    pub fn checkpoint(&self) -> Checkpoint<R> {
        let state = TrainState {
            next_epoch: self.next_epoch,
            step: self.optimizer.step,
            config: self.config.clone(),
        };
        Checkpoint {
            model: self.model.clone(),
            schedule: self.schedule.spec(),
            optimizer: Some(OptimizerState {
                m: self.optimizer.m.clone(),
                v: self.optimizer.v.clone(),
            }),
            train_state: serde_json::to_value(state).expect("train state serializes"),
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        self.schedule.spec()
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// `draws` noised copies of `obj` at uniformly drawn timesteps, each
    /// weighted `1/draws`.
    fn noised<'a, G: Rng>(
        &self,
        x0: &AttributeTensor,
        graph: &'a ArticulationGraph,
        draws: usize,
        rng: &mut G,
    ) -> Vec<NoisedSample<'a>> {
        let slots = self.model.config().slots;
        let n = graph.num_parts();
        (0..draws)
            .map(|_| {
                let t = rng.gen_range(1..=self.schedule.timesteps());
                let eps = gaussian_like(slots, n, rng);
                NoisedSample {
                    x_t: q_sample(x0, t, &eps, &self.schedule),
                    t,
                    graph,
                    eps,
                    weight: 1.0 / draws as f64,
                }
            })
            .collect()
    }

    /// Loss and gradient of one object averaged over its timestep draws.
    fn object_grad(
        &self,
        obj: &ArticulatedObject,
        seed: u64,
        weight: f64,
    ) -> Result<(f64, Vec<usize>, Vec<R>), SchemaError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = if self.config.augment {
            augment_permute(obj, &mut rng)
        } else {
            obj.clone()
        };
        let x0: AttributeTensor = obj.encode(self.model.config().slots)?;
        let samples = self.noised(&x0, &obj.graph, self.config.timesteps_per_object, &mut rng);
        let ts = samples.iter().map(|s| s.t).collect();
        let mut grad = vec![R::zero(); self.model.num_params()];
        let loss = self.model.loss_and_grad(&samples, &mut grad);
        if weight != 1.0 {
            let w = R::of(weight);
            grad.iter_mut().for_each(|g| *g *= w);
        }
        Ok((loss, ts, grad))
    }

    /// Mean loss over `draws` fixed noise draws per object, without
    /// augmentation. Less noisy than the running epoch loss.
    pub fn evaluation_loss(
        &self,
        data: &[ArticulatedObject],
        draws: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let losses = map_range(exec, data.len(), |i| -> Result<f64, SchemaError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let x0 = data[i].encode(self.model.config().slots)?;
            Ok(self.model.loss(&self.noised(&x0, &data[i].graph, draws, &mut rng)))
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / data.len() as f64)
    }

    /// Runs one epoch over `data`; returns the mean per-object loss.
    pub fn run_epoch(&mut self, data: &[ArticulatedObject], out: &TrainOutput) -> Result<EpochLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let epoch = self.next_epoch;
        let lr = lr_at(epoch.min(self.config.epochs - 1), &self.config);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = (0..data.len()).map(|_| rng.gen()).collect();

        let chunk = worker_count(out.execution).max(1);
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch) {
            let weight = 1.0 / batch.len() as f64;
            let mut grad = vec![R::zero(); self.model.num_params()];
            let mut batch_losses = Vec::with_capacity(batch.len());
            let mut batch_ts = Vec::with_capacity(batch.len());
            // Fixed-size groups summed in order keep the reduction deterministic.
            for group in batch.chunks(chunk) {
                let results = map_slice(out.execution, group, |&i| self.object_grad(&data[i], seeds[i], weight));
                for r in results {
                    let (loss, ts, g) = r?;
                    batch_losses.push(loss);
                    batch_ts.push(ts);
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
            }
            if batch_losses.iter().any(|l| !l.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
                let dump = NanDump {
                    epoch,
                    objects: batch.iter().map(|&i| data[i].id.as_str()).collect(),
                    timesteps: batch_ts,
                    losses: batch_losses,
                };
                let path = out
                    .dir
                    .clone()
                    .unwrap_or_else(std::env::temp_dir)
                    .join(format!("nan_dump_epoch{epoch}.json"));
                let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
                fs::write(&path, text).map_err(io_err(&path))?;
                log::error!("non-finite loss at epoch {epoch}, dump at {}", path.display());
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    dump: path.display().to_string(),
                });
            }
            clip_grad_norm(&mut grad, self.config.grad_clip);
            self.optimizer.update(self.model.params_mut(), &grad, lr);
            total += batch_losses.iter().sum::<f64>();
        }
        self.next_epoch += 1;
        let log = EpochLog {
            epoch,
            loss: total / data.len() as f64,
            lr,
        };
        self.history.push(log);
        Ok(log)
    }

    /// Trains until `config.epochs`, writing the loss log and checkpoints
    /// under `out.dir` when given.
    pub fn fit(&mut self, data: &[ArticulatedObject], out: &TrainOutput) -> Result<Vec<EpochLog>, TrainError> {
        self.fit_until(data, self.config.epochs, out)
    }

    /// Trains up to (excluding) `stop_epoch`.
    pub fn fit_until(
        &mut self,
        data: &[ArticulatedObject],
        stop_epoch: usize,
        out: &TrainOutput,
    ) -> Result<Vec<EpochLog>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut csv = match &out.dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join(LOSS_LOG);
                let fresh = !path.exists() || self.next_epoch == 0;
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(io_err(&path))?;
                if fresh {
                    writeln!(f, "epoch,loss,lr").map_err(io_err(&path))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut logs = Vec::new();
        let stop = stop_epoch.min(self.config.epochs);
        while self.next_epoch < stop {
            let log = self.run_epoch(data, out)?;
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{},{}", log.epoch, log.loss, log.lr).map_err(io_err(path))?;
            }
            if log.epoch % 50 == 0 {
                log::info!("epoch {} loss {:.5} lr {:.2e}", log.epoch, log.loss, log.lr);
            }
            logs.push(log);
            let every = self.config.checkpoint_every;
            if let Some(dir) = &out.dir {
                if every > 0 && self.next_epoch % every == 0 {
                    save_checkpoint(
                        &dir.join(format!("epoch_{:05}.ckpt", self.next_epoch)),
                        &self.checkpoint(),
                    )?;
                }
            }
        }
        if let Some(dir) = &out.dir {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), &self.checkpoint())?;
        }
        Ok(logs)
    }
}

/// Convenience wrapper: fresh model, full run.
pub fn train(
    corpus: &[ArticulatedObject],
    cfg: TrainConfig,
    model_cfg: DenoiserConfig,
    out: &TrainOutput,
) -> Result<Trainer<f32>, TrainError> {
    let mut trainer = Trainer::new(model_cfg, cfg, NoiseSchedule::default())?;
    trainer.fit(corpus, out)?;
    Ok(trainer)
}
