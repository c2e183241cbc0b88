//! Noise schedule, deterministic DDIM reverse loop and the denoiser
//! contract.
//!
//! Timesteps are training-step indices in `1..=T_train`; `alpha_bar(0)` is
//! defined as exactly 1 so the final step lands on the clean estimate.

pub mod denoisers;
mod toy;

use std::collections::BTreeSet;
use std::ops::Deref;
use std::sync::Mutex;
use std::thread;

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::attention::{AttentionDirective, AttentionError, AttentionRecord};
use crate::guidance::{compose_partial, required_conditions, ConditionSelector, GuidanceError, GuidanceScales};

pub use toy::{latent_to_rgb, ToyGlyphConfig, ToyGlyphDenoiser, TOY_CONTEXT_LEN};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFER_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("need 0 < beta_start < beta_end < 1, got {start} and {end}")]
    Betas { start: f64, end: f64 },
    #[error("need 1 <= inference steps <= training steps, got {infer} of {train}")]
    Steps { train: usize, infer: usize },
    #[error("timestep {t} outside 0..={max}")]
    Timestep { t: usize, max: usize },
    #[error("DDIM step needs t > t_prev, got {t} -> {t_prev}")]
    Order { t: usize, t_prev: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alphas_bar[t]` for `t` in `0..=T_train`, with `alphas_bar[0] = 1`.
    alphas_bar: Vec<f64>,
    /// Descending inference timesteps.
    timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    /// Target timestep after `timesteps[k]`; 0 after the last one.
    pub fn prev_timestep(&self, k: usize) -> usize {
        self.timesteps.get(k + 1).copied().unwrap_or(0)
    }

    fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t > self.train_steps() {
            return Err(ScheduleError::Timestep {
                t,
                max: self.train_steps(),
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_INFER_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linear betas with `alpha_bar_t = prod_{i<=t} (1 - beta_i)` and timesteps
/// `T - floor(k T / T_infer)` for `k` in `0..T_infer`.
pub fn make_schedule(
    train_steps: usize,
    infer_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, ScheduleError> {
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(ScheduleError::Betas {
            start: beta_start,
            end: beta_end,
        });
    }
    if infer_steps == 0 || infer_steps > train_steps {
        return Err(ScheduleError::Steps {
            train: train_steps,
            infer: infer_steps,
        });
    }
    let mut alphas_bar = Vec::with_capacity(train_steps + 1);
    alphas_bar.push(1.0);
    let mut acc = 1.0f64;
    for i in 0..train_steps {
        let beta = if train_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alphas_bar.push(acc);
    }
    let timesteps = (0..infer_steps)
        .map(|k| train_steps - k * train_steps / infer_steps)
        .collect();
    Ok(NoiseSchedule {
        alphas_bar,
        timesteps,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    Length {
        shape: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("tensor contains non-finite values")]
    NonFinite,
}

/// Dense `(channels, height, width)` float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(Array3<f32>);

pub type NoisePrediction = LatentTensor;

impl LatentTensor {
    pub fn new(values: Array3<f32>) -> Result<Self, TensorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Self(values.as_standard_layout().into_owned()))
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self(Array3::zeros(shape))
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::Length {
                shape,
                expected,
                got: data.len(),
            });
        }
        Self::new(Array3::from_shape_vec(shape, data).expect("length checked"))
    }

    /// Standard normal entries from a seeded ChaCha8 stream.
    pub fn gaussian(shape: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng)))
    }

    pub fn shape3(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[0], s[1], s[2]]
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f32> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: [usize; 3], bytes: &[u8]) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if bytes.len() != expected * 4 {
            return Err(TensorError::Length {
                shape,
                expected,
                got: bytes.len() / 4,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f32 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0f32, |m, &a, &b| m.max((a - b).abs()))
    }
}

impl Deref for LatentTensor {
    type Target = Array3<f32>;
    fn deref(&self) -> &Array3<f32> {
        &self.0
    }
}

/// One deterministic DDIM update (eta = 0), evaluated in f64.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps: &NoisePrediction,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor, ScheduleError> {
    schedule.check(t)?;
    if t <= t_prev {
        return Err(ScheduleError::Order { t, t_prev });
    }
    assert_eq!(z_t.shape3(), eps.shape3(), "ddim_step shape mismatch");
    let a_t = schedule.alpha_bar(t);
    let a_prev = schedule.alpha_bar(t_prev);
    let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let (sa_p, sb_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let mut out = z_t.clone();
    Zip::from(&mut out.0).and(&eps.0).for_each(|z, &e| {
        let (zf, ef) = (f64::from(*z), f64::from(e));
        let x0 = (zf - sb_t * ef) / sa_t;
        *z = (sa_p * x0 + sb_p * ef) as f32;
    });
    Ok(out)
}

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),
}

impl DenoiseError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, DenoiseError::Wire(w) if w.is_retryable())
    }
}

/// One noise-prediction query.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub z: &'a LatentTensor,
    pub t: usize,
    pub cond: ConditionSelector,
    pub session: &'a str,
    pub directive: Option<&'a AttentionDirective>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    /// Calls must not overlap.
    Serial,
    /// `predict` may be called from several threads at once.
    Concurrent,
    /// Prefers a single `predict_batch` call per step.
    Batched,
}

pub trait Denoiser: Send + Sync {
    fn predict(&self, req: &PredictRequest<'_>) -> Result<NoisePrediction, DenoiseError>;

    fn predict_batch(&self, reqs: &[PredictRequest<'_>]) -> Result<Vec<NoisePrediction>, DenoiseError> {
        reqs.iter().map(|r| self.predict(r)).collect()
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }

    /// Cross-attention maps captured since the last call, if the denoiser
    /// records them.
    fn take_attention_records(&self) -> Option<Vec<AttentionRecord>> {
        None
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("step {step} (t={t}), condition {cond}: {source}")]
    Denoiser {
        step: usize,
        t: usize,
        cond: ConditionSelector,
        #[source]
        source: DenoiseError,
    },
    #[error("step {step} (t={t}): denoiser returned shape {got:?}, expected {expected:?}")]
    Shape {
        step: usize,
        t: usize,
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("step {step}: {source}")]
    Guidance {
        step: usize,
        #[source]
        source: GuidanceError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl SampleError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SampleError::Denoiser { source, .. } if source.is_retryable())
    }
}

/// Observer hook invoked after every DDIM update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub latent: &'a LatentTensor,
}

pub fn sample(
    init_noise: &LatentTensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    scales: &GuidanceScales,
    directive: Option<&AttentionDirective>,
    session: &str,
) -> Result<LatentTensor, SampleError> {
    sample_observed(init_noise, denoiser, schedule, scales, directive, session, |_| {})
}

pub fn sample_observed(
    init_noise: &LatentTensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    scales: &GuidanceScales,
    directive: Option<&AttentionDirective>,
    session: &str,
    mut observe: impl FnMut(StepInfo<'_>),
) -> Result<LatentTensor, SampleError> {
    let conds = required_conditions(scales);
    let mut z = init_noise.clone();
    for (step, &t) in schedule.timesteps().iter().enumerate() {
        let t_prev = schedule.prev_timestep(step);
        let preds = predict_step(denoiser, &z, t, &conds, directive, session, step)?;
        let mut slots: [Option<&LatentTensor>; 4] = [None; 4];
        for (cond, p) in conds.iter().zip(&preds) {
            if p.shape3() != z.shape3() {
                return Err(SampleError::Shape {
                    step,
                    t,
                    expected: z.shape3(),
                    got: p.shape3(),
                });
            }
            slots[*cond as usize] = Some(p);
        }
        let eps = compose_partial(slots, scales).map_err(|source| SampleError::Guidance { step, source })?;
        z = ddim_step(&z, &eps, t, t_prev, schedule)?;
        observe(StepInfo {
            step,
            t,
            t_prev,
            latent: &z,
        });
    }
    Ok(z)
}

fn predict_step(
    denoiser: &dyn Denoiser,
    z: &LatentTensor,
    t: usize,
    conds: &BTreeSet<ConditionSelector>,
    directive: Option<&AttentionDirective>,
    session: &str,
    step: usize,
) -> Result<Vec<NoisePrediction>, SampleError> {
    let reqs: Vec<PredictRequest<'_>> = conds
        .iter()
        .map(|&cond| PredictRequest {
            z,
            t,
            cond,
            session,
            directive: directive.filter(|_| cond.takes_directive()),
        })
        .collect();
    let wrap = |cond: ConditionSelector| move |source| SampleError::Denoiser { step, t, cond, source };
    match denoiser.concurrency() {
        Concurrency::Serial => reqs
            .iter()
            .map(|r| denoiser.predict(r).map_err(wrap(r.cond)))
            .collect(),
        Concurrency::Batched => {
            let first = reqs.first().map_or(ConditionSelector::Uncond, |r| r.cond);
            let out = denoiser.predict_batch(&reqs).map_err(wrap(first))?;
            if out.len() != reqs.len() {
                return Err(SampleError::Denoiser {
                    step,
                    t,
                    cond: first,
                    source: DenoiseError::Invalid(format!(
                        "batch returned {} predictions for {} requests",
                        out.len(),
                        reqs.len()
                    )),
                });
            }
            Ok(out)
        }
        Concurrency::Concurrent => {
            let results = Mutex::new(Vec::new());
            thread::scope(|scope| {
                for (i, r) in reqs.iter().enumerate() {
                    let results = &results;
                    scope.spawn(move || {
                        let out = denoiser.predict(r);
                        results.lock().expect("poisoned").push((i, out));
                    });
                }
            });
            let mut results = results.into_inner().expect("poisoned");
            results.sort_by_key(|(i, _)| *i);
            results
                .into_iter()
                .map(|(i, out)| out.map_err(wrap(reqs[i].cond)))
                .collect()
        }
    }
}
