//! DDPM machinery over attribute tensors.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `alpha_bar(0) = 1` by convention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{ArticulationGraph, AttributeTensor, ATTR_WIDTH, NUM_ATTRIBUTES};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error(
        "invalid schedule: need 0 < beta_min < beta_max < 1 and T >= 2 (got T={timesteps}, {beta_min}..{beta_max})"
    )]
    InvalidSchedule {
        timesteps: usize,
        beta_min: f64,
        beta_max: f64,
    },
    #[error("inference steps {steps} must be in 1..={timesteps}")]
    InvalidSteps { steps: usize, timesteps: usize },
    #[error("condition mask touches padded node {0}")]
    MaskOnPadding(usize),
    #[error("condition mask has {mask} slots but the sample has {sample}")]
    ShapeMismatch { mask: usize, sample: usize },
    #[error("predictor produced a non-finite value at step {0}")]
    NonFinite(usize),
}

/// Linear beta schedule tables.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            timesteps: DEFAULT_TIMESTEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self, DiffusionError> {
        if !(timesteps >= 2 && 0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(DiffusionError::InvalidSchedule {
                timesteps,
                beta_min,
                beta_max,
            });
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            timesteps,
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self, DiffusionError> {
        Self::linear(spec.timesteps, spec.beta_min, spec.beta_max)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            timesteps: self.timesteps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Descending, uniformly strided timesteps ending at `t = 1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        if steps == 0 || steps > self.timesteps {
            return Err(DiffusionError::InvalidSteps {
                steps,
                timesteps: self.timesteps,
            });
        }
        let stride = self.timesteps / steps;
        Ok((0..steps).rev().map(|i| 1 + i * stride).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::from_spec(ScheduleSpec::default()).expect("default schedule is valid")
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &AttributeTensor, t: usize, eps: &AttributeTensor, schedule: &NoiseSchedule) -> AttributeTensor {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| a * x + b * e)
        .collect();
    AttributeTensor::from_vec(x0.slots(), data)
}

/// Standard normal noise on the nodes `< valid`, zero elsewhere.
pub fn gaussian_like<R: Rng>(slots: usize, valid: usize, rng: &mut R) -> AttributeTensor {
    let mut x = AttributeTensor::zeros(slots);
    for attr in 0..NUM_ATTRIBUTES {
        for node in 0..valid {
            for v in x.row_mut(attr, node) {
                *v = rng.sample(StandardNormal);
            }
        }
    }
    x
}

/// One reverse step from `t` to `t_prev < t`, using the effective
/// `β = 1 − ᾱ_t/ᾱ_prev` and variance `σ² = β`; no noise is added when
/// `t_prev = 0`.
pub fn reverse_step<R: Rng>(
    x_t: &AttributeTensor,
    eps_hat: &AttributeTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> AttributeTensor {
    debug_assert!(t_prev < t);
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let coef = beta / (1.0 - ab_t).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    let data = x_t
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(x, e)| {
            let mean = inv_sqrt_alpha * (x - coef * e);
            if t_prev > 0 {
                let z: f64 = rng.sample(StandardNormal);
                mean + sigma * z
            } else {
                mean
            }
        })
        .collect();
    AttributeTensor::from_vec(x_t.slots(), data)
}

/// Single-stride ancestral step `x_t → x_{t−1}`.
pub fn ddpm_step<R: Rng>(
    x_t: &AttributeTensor,
    eps_hat: &AttributeTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> AttributeTensor {
    reverse_step(x_t, eps_hat, t, t - 1, schedule, rng)
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor: Sync {
    /// Node slots (`K`) of the tensors this predictor consumes.
    fn slots(&self) -> usize;

    fn predict(&self, x_t: &AttributeTensor, t: usize, graph: &ArticulationGraph) -> AttributeTensor;

    /// Batched prediction; implementations may fuse the work.
    fn predict_batch(&self, items: &[(&AttributeTensor, usize, &ArticulationGraph)]) -> Vec<AttributeTensor> {
        items.iter().map(|(x, t, g)| self.predict(x, *t, g)).collect()
    }
}

/// Mean squared error over the entries of valid nodes.
pub fn masked_mse(a: &AttributeTensor, b: &AttributeTensor, valid: usize) -> f64 {
    let mut sum = 0.0;
    for attr in 0..NUM_ATTRIBUTES {
        for node in 0..valid {
            for (x, y) in a.row(attr, node).iter().zip(b.row(attr, node)) {
                sum += (x - y) * (x - y);
            }
        }
    }
    sum / (NUM_ATTRIBUTES * valid * ATTR_WIDTH) as f64
}

/// Simplified DDPM objective for one uniformly drawn `t` and Gaussian `ε`,
/// averaged over valid-node entries only.
pub fn training_loss<P: NoisePredictor + ?Sized, R: Rng>(
    predictor: &P,
    x0: &AttributeTensor,
    graph: &ArticulationGraph,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> f64 {
    let n = graph.num_parts();
    let t = rng.gen_range(1..=schedule.timesteps());
    let eps = gaussian_like(x0.slots(), n, rng);
    let mut clean = x0.clone();
    clean.zero_padding(n);
    let x_t = q_sample(&clean, t, &eps, schedule);
    let eps_hat = predictor.predict(&x_t, t, graph);
    masked_mse(&eps, &eps_hat, n)
}

/// Known entries for inpainting-style conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMask {
    mask: Vec<bool>,
    known: AttributeTensor,
}

impl ConditionMask {
    pub fn new(mask: Vec<bool>, known: AttributeTensor) -> Self {
        assert_eq!(mask.len(), known.len());
        ConditionMask { mask, known }
    }

    /// No entry conditioned yet.
    pub fn empty(known: AttributeTensor) -> Self {
        ConditionMask {
            mask: vec![false; known.len()],
            known,
        }
    }

    /// Marks the whole attribute row of `node`.
    pub fn condition_row(&mut self, attr: usize, node: usize) {
        let o = self.known.offset(attr, node);
        self.mask[o..o + ATTR_WIDTH].fill(true);
    }

    /// Marks every attribute of every node `< valid`.
    pub fn condition_all(&mut self, valid: usize) {
        for attr in 0..NUM_ATTRIBUTES {
            for node in 0..valid {
                self.condition_row(attr, node);
            }
        }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn known(&self) -> &AttributeTensor {
        &self.known
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn validate(&self, slots: usize, valid: usize) -> Result<(), DiffusionError> {
        if self.known.slots() != slots {
            return Err(DiffusionError::ShapeMismatch {
                mask: self.known.slots(),
                sample: slots,
            });
        }
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                let node = self.known.node_of(i);
                if node >= valid {
                    return Err(DiffusionError::MaskOnPadding(node));
                }
            }
        }
        Ok(())
    }

    fn overwrite(&self, x: &mut AttributeTensor, source: &AttributeTensor) {
        for (i, m) in self.mask.iter().enumerate() {
            if *m {
                x.as_mut_slice()[i] = source.as_slice()[i];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_INFERENCE_STEPS,
        }
    }
}

/// One generation job for [`sample_many`].
#[derive(Clone, Debug)]
pub struct SampleRequest<'a> {
    pub graph: &'a ArticulationGraph,
    pub condition: Option<&'a ConditionMask>,
    pub seed: u64,
}

/// Reverse diffusion for a single object.
pub fn sample<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    graph: &ArticulationGraph,
    config: SamplerConfig,
    condition: Option<&ConditionMask>,
    seed: u64,
) -> Result<AttributeTensor, DiffusionError> {
    let mut out = sample_many(predictor, schedule, config, &[SampleRequest { graph, condition, seed }])?;
    Ok(out.remove(0))
}

/// Reverse diffusion for several objects, stepping them in lockstep so the
/// predictor can batch. Each request owns its RNG stream, so results do not
/// depend on batch composition.
pub fn sample_many<P: NoisePredictor + ?Sized>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: SamplerConfig,
    requests: &[SampleRequest<'_>],
) -> Result<Vec<AttributeTensor>, DiffusionError> {
    let slots = predictor.slots();
    let timesteps = schedule.inference_timesteps(config.steps)?;
    for r in requests {
        if let Some(c) = r.condition {
            c.validate(slots, r.graph.num_parts())?;
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let mut xs: Vec<AttributeTensor> = requests
        .iter()
        .zip(&mut rngs)
        .map(|(r, rng)| gaussian_like(slots, r.graph.num_parts(), rng))
        .collect();

    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        for ((x, r), rng) in xs.iter_mut().zip(requests).zip(&mut rngs) {
            if let Some(c) = r.condition {
                let eps = gaussian_like(slots, r.graph.num_parts(), rng);
                let noisy = q_sample(c.known(), t, &eps, schedule);
                c.overwrite(x, &noisy);
            }
        }
        let items: Vec<(&AttributeTensor, usize, &ArticulationGraph)> =
            xs.iter().zip(requests).map(|(x, r)| (x, t, r.graph)).collect();
        let eps_hats = predictor.predict_batch(&items);
        for (((x, eps_hat), r), rng) in xs.iter_mut().zip(&eps_hats).zip(requests).zip(&mut rngs) {
            let mut next = reverse_step(x, eps_hat, t, t_prev, schedule, rng);
            next.zero_padding(r.graph.num_parts());
            if next.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::NonFinite(t));
            }
            *x = next;
        }
    }
    for (x, r) in xs.iter_mut().zip(requests) {
        if let Some(c) = r.condition {
            let known = c.known().clone();
            c.overwrite(x, &known);
        }
    }
    Ok(xs)
}
