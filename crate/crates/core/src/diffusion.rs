//! DDPM machinery: variance schedule, forward noising (closed form and
//! stepwise), the reverse posterior mean and the ancestral sampling loop.
//!
//! Everything here works on motor sequences in the zero-centered diffusion
//! space (`x = 2m - 1`) and is independent of the denoiser network, which is
//! plugged in through [`X0Predictor`].

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{BlendshapeSequence, MotorSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Parameters from which a [`DiffusionSchedule`] is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.35,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.kind, self.beta_start, self.beta_end)
    }
}

/// Per-level coefficients of the forward process. Index `n - 1` holds the
/// values for noise level `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

/// Builds a schedule of `steps` levels with β interpolated between the bounds.
pub fn make_schedule(
    steps: usize,
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
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
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma2 = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(DiffusionSchedule {
        config: ScheduleConfig {
            steps,
            kind,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

impl DiffusionSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of noise levels `N`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    /// `ᾱ_n` with the convention `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bar[n - 1]
        }
    }

    fn check_level(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::StepOutOfRange {
                n,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Coefficients `(c_xn, c_x0, variance)` of the reverse transition from
    /// level `n` to level `prev < n`. For `prev = n - 1` this is exactly the
    /// one-step posterior; larger gaps use the same form with the effective
    /// `α = ᾱ_n / ᾱ_prev`.
    pub fn transition(&self, n: usize, prev: usize) -> Result<(f64, f64, f64)> {
        self.check_level(n)?;
        if prev >= n {
            return Err(Error::InvalidInput(format!(
                "reverse transition must decrease the level ({n} -> {prev})"
            )));
        }
        let ab_n = self.alpha_bar_at(n);
        let ab_prev = self.alpha_bar_at(prev);
        let (alpha_eff, beta_eff) = if prev + 1 == n {
            (self.alpha[n - 1], self.beta[n - 1])
        } else {
            let a = ab_n / ab_prev;
            (a, 1.0 - a)
        };
        let denom = 1.0 - ab_n;
        let c_xn = alpha_eff.sqrt() * (1.0 - ab_prev) / denom;
        let c_x0 = ab_prev.sqrt() * beta_eff / denom;
        let var = (1.0 - ab_prev) / denom * beta_eff;
        Ok((c_xn, c_x0, var))
    }

    /// Descending noise levels visited by a sampler with the given stride:
    /// `N, N - s, N - 2s, ...` down to the smallest level `>= 1`.
    pub fn timesteps(&self, stride: usize) -> Vec<usize> {
        let stride = stride.max(1);
        (1..=self.steps()).rev().step_by(stride).collect()
    }

    /// Stride that visits at most `steps` levels.
    pub fn stride_for_steps(&self, steps: usize) -> usize {
        self.steps().div_ceil(steps.max(1))
    }
}

fn check_clean(x0: &MotorSequence) -> Result<()> {
    if x0.noise_level != 0 {
        return Err(Error::InvalidInput(format!(
            "expected a clean sequence, got noise level {}",
            x0.noise_level
        )));
    }
    Ok(())
}

/// Closed-form forward noising `x_n = √ᾱ_n x_0 + √(1 - ᾱ_n) ε`.
///
/// `x0` must already be in diffusion space; `noise` is the Gaussian draw `ε`.
pub fn add_noise(
    x0: &MotorSequence,
    n: usize,
    noise: &Array2<f32>,
    sched: &DiffusionSchedule,
) -> Result<MotorSequence> {
    sched.check_level(n)?;
    check_clean(x0)?;
    if noise.dim() != x0.data().dim() {
        return Err(Error::InvalidInput("noise shape differs from x0".into()));
    }
    let ab = sched.alpha_bar_at(n);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    let data = Zip::from(x0.data())
        .and(noise)
        .map_collect(|&x, &e| a * x + b * e);
    Ok(MotorSequence::noisy(data, n))
}

/// Draws a standard normal array.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

/// Stepwise forward Markov chain, one `q(x_n | x_{n-1})` factor at a time.
pub fn forward_chain<R: Rng + ?Sized>(
    x0: &MotorSequence,
    n: usize,
    rng: &mut R,
    sched: &DiffusionSchedule,
) -> Result<MotorSequence> {
    sched.check_level(n)?;
    check_clean(x0)?;
    let mut x = x0.data().mapv(f64::from);
    for level in 1..=n {
        let beta = sched.beta[level - 1];
        let (keep, spread) = ((1.0 - beta).sqrt(), beta.sqrt());
        x.mapv_inplace(|v| keep * v + spread * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(MotorSequence::noisy(x.mapv(|v| v as f32), n))
}

/// Mean of the reverse step `p(x_{n-1} | x_n)` given a clean-signal estimate.
pub fn posterior_mean(
    xn: &MotorSequence,
    x0_hat: &MotorSequence,
    n: usize,
    sched: &DiffusionSchedule,
) -> Result<MotorSequence> {
    let (c_xn, c_x0, _) = sched.transition(n, n - 1)?;
    Ok(MotorSequence::noisy(
        combine(xn.data(), x0_hat.data(), c_xn, c_x0)?,
        n - 1,
    ))
}

fn combine(xn: &Array2<f32>, x0: &Array2<f32>, c_xn: f64, c_x0: f64) -> Result<Array2<f32>> {
    if xn.dim() != x0.dim() {
        return Err(Error::DimensionMismatch {
            context: "posterior mean",
            expected: xn.len(),
            actual: x0.len(),
        });
    }
    Ok(Zip::from(xn)
        .and(x0)
        .map_collect(|&a, &b| (c_xn * f64::from(a) + c_x0 * f64::from(b)) as f32))
}

/// A conditional clean-signal predictor `x̂_θ(x_n, n, c)`.
pub trait X0Predictor {
    /// Predicts `x_0` (diffusion space, `T x dof`) from the noisy sequence.
    fn predict_x0(
        &self,
        xn: &Array2<f32>,
        n: usize,
        c: &BlendshapeSequence,
    ) -> Result<Array2<f32>>;
}

impl<F> X0Predictor for F
where
    F: Fn(&Array2<f32>, usize, &BlendshapeSequence) -> Result<Array2<f32>>,
{
    fn predict_x0(
        &self,
        xn: &Array2<f32>,
        n: usize,
        c: &BlendshapeSequence,
    ) -> Result<Array2<f32>> {
        self(xn, n, c)
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub stochastic: bool,
    pub stride: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            stochastic: false,
            stride: 4,
        }
    }
}

/// Runs the reverse chain from `x_N ~ N(0, I)` and returns the clean motor
/// sequence (mapped back into `[0, 1]`).
pub fn sample<D, R>(
    denoiser: &D,
    c: &BlendshapeSequence,
    dof: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
    cfg: SamplerConfig,
) -> Result<MotorSequence>
where
    D: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let shape = (c.len(), dof);
    let mut x = gaussian(rng, shape);
    let levels = sched.timesteps(cfg.stride);
    for (i, &n) in levels.iter().enumerate() {
        let prev = levels.get(i + 1).copied().unwrap_or(0);
        let x0_hat = denoiser.predict_x0(&x, n, c)?;
        if x0_hat.dim() != shape {
            return Err(Error::Sampler(format!(
                "denoiser returned {:?} at level {n}, expected {:?}",
                x0_hat.dim(),
                shape
            )));
        }
        if x0_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampler(format!(
                "denoiser returned non-finite values at level {n}"
            )));
        }
        let (c_xn, c_x0, var) = sched.transition(n, prev)?;
        let mut next = combine(&x, &x0_hat, c_xn, c_x0)?;
        if cfg.stochastic && prev > 0 {
            let sigma = var.sqrt() as f32;
            next.iter_mut()
                .for_each(|v| *v += sigma * rng.sample::<f32, _>(StandardNormal));
        }
        x = next;
    }
    Ok(MotorSequence::noisy(x, 0).from_diffusion_space())
}
