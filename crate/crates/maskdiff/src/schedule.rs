//! Discrete noise schedules and the forward diffusion process.
//!
//! The forward chain destroys data over `T` steps; `alpha_bar[t-1]` is the
//! surviving signal fraction at step `t` so that
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.

use crate::compute::{Scalar, Tensor};
use crate::error::{err_fmt, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(err_fmt!(Config, "unknown schedule kind '{other}'")),
        }
    }
}

/// Which per-step reverse standard deviation the ancestral sampler uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaKind {
    /// σ_t = √β_t (the "large" choice).
    Beta,
    /// σ_t = √β̃_t with β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t.
    TildeBeta,
}

impl std::str::FromStr for SigmaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaKind::Beta),
            "tilde_beta" => Ok(SigmaKind::TildeBeta),
            other => Err(err_fmt!(Config, "unknown sigma kind '{other}'")),
        }
    }
}

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
const BETA_CLIP: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma_kind: SigmaKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, sigma_kind: SigmaKind) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => {
                make_linear_schedule(steps, DEFAULT_BETA_START, DEFAULT_BETA_END, sigma_kind)
            }
            ScheduleKind::Cosine => {
                make_cosine_schedule(steps, DEFAULT_COSINE_OFFSET, sigma_kind)
            }
        }
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>, sigma_kind: SigmaKind) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = match sigma_kind {
            SigmaKind::Beta => beta.iter().map(|b| b.sqrt()).collect(),
            SigmaKind::TildeBeta => (0..beta.len())
                .map(|i| {
                    let abar_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    ((1.0 - abar_prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                })
                .collect(),
        };
        NoiseSchedule { kind, sigma_kind, beta, alpha, alpha_bar, sigma }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// β_t, 1-indexed t ∈ [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t; the pseudo-index t = 0 yields 1 (no noise).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(err_fmt!(Contract, "t={t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }

    /// Diffuse clean data: x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps.
    pub fn forward_sample<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        eps: &Tensor<T>,
        t: usize,
    ) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(err_fmt!(Shape, "x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
        }
        let a = T::from_f64(self.alpha_bar(t).sqrt());
        let b = T::from_f64((1.0 - self.alpha_bar(t)).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(eps.data().iter())
            .map(|(&x, &e)| a * x + b * e)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Reverse-step mean from the ε-parameterization plus σ_t:
    /// μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t.
    pub fn posterior_step_params<T: Scalar>(
        &self,
        xt: &Tensor<T>,
        eps_pred: &Tensor<T>,
        t: usize,
    ) -> Result<(Tensor<T>, f64)> {
        self.check_t(t)?;
        if xt.shape() != eps_pred.shape() {
            return Err(err_fmt!(Shape, "xt {:?} vs eps {:?}", xt.shape(), eps_pred.shape()));
        }
        let inv_sqrt_a = T::from_f64(1.0 / self.alpha(t).sqrt());
        let coef = T::from_f64(self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt());
        let data = xt
            .data()
            .iter()
            .zip(eps_pred.data().iter())
            .map(|(&x, &e)| (x - coef * e) * inv_sqrt_a)
            .collect();
        Ok((Tensor::new(xt.shape().to_vec(), data)?, self.sigma(t)))
    }

    /// Continuous β(s), s ∈ [0, 1], from linear interpolation of the discrete
    /// betas scaled by T (so ∫₀¹β(u)du ≈ Σβ_t and the continuous marginal
    /// matches the discrete one).
    pub fn beta_continuous(&self, s: f64) -> f64 {
        let t = self.steps() as f64;
        let u = (s * t - 0.5).clamp(0.0, t - 1.0);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(self.steps() - 1);
        let w = u - i0 as f64;
        t * ((1.0 - w) * self.beta[i0] + w * self.beta[i1])
    }

    /// ᾱ(s) = exp(−∫₀ˢ β(u)du) for the continuous-time samplers; the
    /// piecewise-linear β integrates exactly segment by segment.
    pub fn alpha_bar_continuous(&self, s: f64) -> f64 {
        let t = self.steps() as f64;
        let u_end = (s * t - 0.5).clamp(0.0, t - 1.0);
        // integral in u of the interpolated beta from 0 to u_end, plus the
        // clamped head [s=0 .. first grid point] where beta is constant
        let head = 0.5 * self.beta[0];
        let mut integral = head.min(s * t * self.beta[0]);
        if s * t > 0.5 {
            let full_segments = u_end.floor() as usize;
            for i in 0..full_segments {
                integral += 0.5 * (self.beta[i] + self.beta[i + 1]);
            }
            let frac = u_end - u_end.floor();
            if frac > 0.0 {
                let i = full_segments;
                let i1 = (i + 1).min(self.steps() - 1);
                let b0 = self.beta[i];
                let b1 = b0 + (self.beta[i1] - b0) * frac;
                integral += 0.5 * (b0 + b1) * frac;
            }
            // clamped tail beyond the last grid point
            let tail = (s * t - 0.5) - u_end;
            if tail > 0.0 {
                integral += tail * self.beta[self.steps() - 1];
            }
        }
        (-integral).exp()
    }
}

/// β_t linearly interpolated from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_kind: SigmaKind,
) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(err_fmt!(Config, "schedule needs at least 1 step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(err_fmt!(
            Config,
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    Ok(NoiseSchedule::from_betas(ScheduleKind::Linear, beta, sigma_kind))
}

/// ᾱ_t = f(t)/f(0) with f(t) = cos²(((t/T)+s)/(1+s)·π/2);
/// β_t = 1 − ᾱ_t/ᾱ_{t−1} clipped to ≤ 0.999.
pub fn make_cosine_schedule(steps: usize, s: f64, sigma_kind: SigmaKind) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(err_fmt!(Config, "schedule needs at least 1 step"));
    }
    if s <= 0.0 {
        return Err(err_fmt!(Config, "cosine offset must be > 0, got {s}"));
    }
    let t_total = steps as f64;
    let f = |t: f64| {
        let x = ((t / t_total) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos() * x.cos()
    };
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 1..=steps {
        let abar = f(t as f64) / f0;
        let b = (1.0 - abar / prev).min(BETA_CLIP);
        prev *= 1.0 - b;
        beta.push(b);
    }
    Ok(NoiseSchedule::from_betas(ScheduleKind::Cosine, beta, sigma_kind))
}

/// A diffused sample together with everything that produced it.
#[derive(Debug, Clone)]
pub struct NoisySample<T: Scalar> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: usize,
    pub xt: Tensor<T>,
}

impl<T: Scalar> NoisySample<T> {
    pub fn diffuse(sched: &NoiseSchedule, x0: Tensor<T>, eps: Tensor<T>, t: usize) -> Result<Self> {
        let xt = sched.forward_sample(&x0, &eps, t)?;
        Ok(NoisySample { x0, eps, t, xt })
    }
}
