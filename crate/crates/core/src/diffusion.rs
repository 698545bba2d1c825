//! Gaussian forward process, its closed-form marginal, and reverse samplers.
//!
//! Timesteps are 1-based (`1..=T`). Internally `alpha_bar(0) = 1` so the
//! last reverse step lands on the clean sample.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// Precomputed β, α = 1 − β and ᾱ = ∏α tables (index 0 holds step 1).
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

pub fn make_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "schedule bounds must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(VarianceSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

impl VarianceSchedule {
    /// Linear β from 1e-4 to 0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        make_schedule(
            ScheduleKind::Linear,
            DEFAULT_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }

    /// Chain length T.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: TimeStep) -> f64 {
        self.beta[t.get() - 1]
    }

    pub fn alpha(&self, t: TimeStep) -> f64 {
        self.alpha[t.get() - 1]
    }

    pub fn alpha_bar(&self, t: TimeStep) -> f64 {
        self.alpha_bar[t.get() - 1]
    }

    /// ᾱ at a raw index, with ᾱ(0) = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn step(&self, t: usize) -> Result<TimeStep> {
        TimeStep::new(t, self)
    }

    /// Posterior variance β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t (zero at t = 1).
    pub fn posterior_variance(&self, t: TimeStep) -> f64 {
        let ab_prev = self.alpha_bar_at(t.get() - 1);
        (1.0 - ab_prev) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

/// A validated 1-based timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep {
    t: usize,
    total: usize,
}

impl TimeStep {
    pub fn new(t: usize, sched: &VarianceSchedule) -> Result<Self> {
        if t == 0 || t > sched.len() {
            return Err(Error::config(format!(
                "timestep {t} outside [1, {}]",
                sched.len()
            )));
        }
        Ok(TimeStep { t, total: sched.len() })
    }

    pub fn get(self) -> usize {
        self.t
    }

    /// `t / T`, the scalar fed to the denoiser's time embedding.
    pub fn fraction(self) -> f64 {
        self.t as f64 / self.total as f64
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn axpby<T: Real>(ca: f64, a: &Tensor<T>, cb: f64, b: &Tensor<T>) -> Tensor<T> {
    let (ca, cb) = (T::from_f64_lossy(ca), T::from_f64_lossy(cb));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

/// i.i.d. standard normal tensor.
pub fn gaussian<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

/// One forward step: `√(1−β_t)·x_prev + √β_t·ε`.
pub fn q_step<T: Real>(
    x_prev: &Tensor<T>,
    t: TimeStep,
    eps: &Tensor<T>,
    sched: &VarianceSchedule,
) -> Result<Tensor<T>> {
    same_shape(x_prev, eps, "q_step")?;
    let b = sched.beta(t);
    Ok(axpby((1.0 - b).sqrt(), x_prev, b.sqrt(), eps))
}

/// Closed-form marginal: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_marginal<T: Real>(
    x0: &Tensor<T>,
    t: TimeStep,
    eps: &Tensor<T>,
    sched: &VarianceSchedule,
) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_marginal")?;
    let ab = sched.alpha_bar(t);
    Ok(axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps))
}

/// Ancestral DDPM step `t → t−1` with posterior variance β̃_t.
pub fn ddpm_reverse_step<T: Real>(
    x_t: &Tensor<T>,
    t: TimeStep,
    eps_hat: &Tensor<T>,
    noise: &Tensor<T>,
    sched: &VarianceSchedule,
) -> Result<Tensor<T>> {
    same_shape(x_t, eps_hat, "ddpm_reverse_step")?;
    same_shape(x_t, noise, "ddpm_reverse_step noise")?;
    let (b, a, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
    let inv_sqrt_a = 1.0 / a.sqrt();
    let mean = axpby(inv_sqrt_a, x_t, -inv_sqrt_a * b / (1.0 - ab).sqrt(), eps_hat);
    if t.get() == 1 {
        return Ok(mean);
    }
    let sigma = sched.posterior_variance(t).sqrt();
    Ok(axpby(1.0, &mean, sigma, noise))
}

/// DDIM step from `t` to `t_prev < t` (`t_prev = 0` means the clean sample).
/// `eta = 0` is deterministic; `eta = 1` matches the ancestral posterior.
pub fn ddim_step<T: Real>(
    x_t: &Tensor<T>,
    t: TimeStep,
    t_prev: usize,
    eps_hat: &Tensor<T>,
    noise: Option<&Tensor<T>>,
    sched: &VarianceSchedule,
    eta: f64,
) -> Result<Tensor<T>> {
    same_shape(x_t, eps_hat, "ddim_step")?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta {eta} outside [0, 1]")));
    }
    if t_prev >= t.get() {
        return Err(Error::config(format!(
            "ddim_step must move backwards, got {} -> {t_prev}",
            t.get()
        )));
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar_at(t_prev);
    let x0_pred = axpby(1.0 / ab.sqrt(), x_t, -(1.0 - ab).sqrt() / ab.sqrt(), eps_hat);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = axpby(ab_prev.sqrt(), &x0_pred, dir, eps_hat);
    if sigma == 0.0 {
        return Ok(mean);
    }
    let noise = noise.ok_or_else(|| Error::config("eta > 0 requires a noise tensor"))?;
    same_shape(x_t, noise, "ddim_step noise")?;
    Ok(axpby(1.0, &mean, sigma, noise))
}

/// DDIM step between consecutive timesteps.
pub fn ddim_reverse_step<T: Real>(
    x_t: &Tensor<T>,
    t: TimeStep,
    eps_hat: &Tensor<T>,
    noise: Option<&Tensor<T>>,
    sched: &VarianceSchedule,
    eta: f64,
) -> Result<Tensor<T>> {
    ddim_step(x_t, t, t.get() - 1, eps_hat, noise, sched, eta)
}

/// Anything that predicts the injected noise for a batch `[B, ...]` at a
/// shared timestep, given one condition per batch item.
pub trait NoisePredictor<T: Real, C> {
    fn predict_noise(&self, x_t: &Tensor<T>, t: TimeStep, cond: &[C]) -> Result<Tensor<T>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    /// Ancestral sampling over every timestep; requires `steps == T`.
    Ddpm,
    Ddim { eta: f64 },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Ddim { eta: 0.0 }
    }
}

/// Evenly spaced, strictly decreasing timesteps from `T` down to 1.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(Error::config(format!(
            "{steps} sampling steps exceed the chain length {total}"
        )));
    }
    Ok(match steps {
        0 => Vec::new(),
        1 => vec![total],
        k => (0..k).map(|i| total - i * (total - 1) / (k - 1)).collect(),
    })
}

/// Initial Gaussian draw for one batch item, from the item's own seed.
pub fn initial_noise<T: Real>(seed: u64, item_shape: &[usize]) -> Tensor<T> {
    gaussian(item_shape, &mut stream(seed, 0))
}

fn stack<T: Real>(items: &[Tensor<T>]) -> Tensor<T> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stacked shapes agree")
}

/// Generates one sample per condition, starting from pure noise at `t = T`.
///
/// Item `i` draws its initial noise and any per-step noise from streams of
/// `seeds[i]`, so results do not depend on how items are batched.
pub fn sample<T: Real, C>(
    denoiser: &impl NoisePredictor<T, C>,
    cond: &[C],
    sched: &VarianceSchedule,
    steps: usize,
    seeds: &[u64],
    item_shape: &[usize],
    sampler: Sampler,
) -> Result<Tensor<T>> {
    if cond.len() != seeds.len() || cond.is_empty() {
        return Err(Error::config("sample needs one seed per condition"));
    }
    if sampler == Sampler::Ddpm && steps != sched.len() && steps != 0 {
        return Err(Error::config("ancestral sampling runs every timestep"));
    }
    let ts = sampling_timesteps(sched.len(), steps)?;
    let inits: Vec<Tensor<T>> = seeds.iter().map(|&s| initial_noise(s, item_shape)).collect();
    let mut x = stack(&inits);
    for (i, &t) in ts.iter().enumerate() {
        let step = TimeStep::new(t, sched)?;
        let eps_hat = denoiser.predict_noise(&x, step, cond)?;
        if eps_hat.shape() != x.shape() {
            return Err(Error::shape(format!(
                "denoiser returned {:?} for input {:?}",
                eps_hat.shape(),
                x.shape()
            )));
        }
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let stochastic = match sampler {
            Sampler::Ddpm => t > 1,
            Sampler::Ddim { eta } => eta > 0.0,
        };
        let noise = stochastic.then(|| {
            let per_item: Vec<Tensor<T>> = seeds
                .iter()
                .map(|&s| gaussian(item_shape, &mut stream(s, t as u64)))
                .collect();
            stack(&per_item)
        });
        x = match sampler {
            Sampler::Ddpm => {
                let z = noise.unwrap_or_else(|| Tensor::zeros(x.shape()));
                ddpm_reverse_step(&x, step, &eps_hat, &z, sched)?
            }
            Sampler::Ddim { eta } => ddim_step(&x, step, t_prev, &eps_hat, noise.as_ref(), sched, eta)?,
        };
    }
    Ok(x)
}
