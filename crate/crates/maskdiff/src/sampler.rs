//! Reverse-process sampling: ancestral DDPM, deterministic DDIM (η = 0),
//! Euler–Maruyama over the reverse VP-SDE, and masked "marginal" sampling
//! where the reverse process runs on visible tokens only.
//!
//! The update loops are generic over a [`NoisePredictor`], so the samplers
//! can be validated against an analytic Gaussian oracle without any training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{ParamSet, Scalar, Tensor};
use crate::error::{err_fmt, Result};
use crate::masking::Mask;
use crate::model::{self, UViTConfig};
use crate::schedule::NoiseSchedule;

/// Mid-gray fill for masked regions of rendered samples.
pub const MASK_FILL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim { steps: usize },
    EmSde { steps: usize },
}

impl std::str::FromStr for SamplerKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim { steps: 0 }),
            "em_sde" => Ok(SamplerKind::EmSde { steps: 0 }),
            other => Err(err_fmt!(Config, "unknown sampler '{other}'")),
        }
    }
}

/// ε-prediction for a state tensor at a (discrete, continuous) time.
///
/// Network predictors use `t_index`; analytic ones use `alpha_bar`, which the
/// SDE sampler evaluates at continuous time.
pub trait NoisePredictor<T: Scalar> {
    fn predict(&self, x: &Tensor<T>, t_index: usize, alpha_bar: f64) -> Result<Tensor<T>>;
}

/// Exact ε for 1-D data x0 ~ N(0, data_var): the marginal at ᾱ is
/// N(0, ᾱ·v + 1 − ᾱ), whose score gives ε*(x) = √(1−ᾱ)·x / (ᾱ·v + 1−ᾱ).
pub struct GaussianOracle {
    pub data_var: f64,
}

impl<T: Scalar> NoisePredictor<T> for GaussianOracle {
    fn predict(&self, x: &Tensor<T>, _t: usize, alpha_bar: f64) -> Result<Tensor<T>> {
        let vt = alpha_bar * self.data_var + 1.0 - alpha_bar;
        let c = T::from_f64((1.0 - alpha_bar).sqrt() / vt);
        Ok(x.map(|v| v * c))
    }
}

/// ε ≡ 0 (pure drift); handy for closed-form edge cases.
pub struct ZeroPredictor;

impl<T: Scalar> NoisePredictor<T> for ZeroPredictor {
    fn predict(&self, x: &Tensor<T>, _t: usize, _alpha_bar: f64) -> Result<Tensor<T>> {
        Ok(Tensor::zeros(x.shape().to_vec()))
    }
}

/// The backbone as a predictor over a full n_tokens×token_dim state: visible
/// rows (per the mask) go through the model, masked rows predict 0 and never
/// enter it.
pub struct NetworkPredictor<'a> {
    pub params: &'a ParamSet<f32>,
    pub cfg: &'a UViTConfig,
    pub mask: &'a Mask,
}

impl NoisePredictor<f32> for NetworkPredictor<'_> {
    fn predict(&self, x: &Tensor<f32>, t_index: usize, _alpha_bar: f64) -> Result<Tensor<f32>> {
        let visible = x.gather_rows(self.mask.tau())?;
        let pred = model::predict_noise(self.params, self.cfg, &visible, self.mask.tau(), t_index)?;
        let (_, td) = x.dims2()?;
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (&slot, row) in self.mask.tau().iter().zip(pred.data().chunks_exact(td)) {
            out.data_mut()[slot * td..(slot + 1) * td].copy_from_slice(row);
        }
        Ok(out)
    }
}

/// The DDIM timestep subsequence: uniform stride including t = 1, descending.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_total {
        return Err(err_fmt!(Contract, "ddim steps {steps} outside [1, {t_total}]"));
    }
    let ratio = t_total / steps;
    Ok((0..steps).map(|j| 1 + j * ratio).rev().collect())
}

/// Draw x_T ~ N(0, I) and run the reverse process down to a data-space
/// estimate. `clip` bounds the emitted values element-wise.
pub fn reverse_diffuse<T: Scalar, P: NoisePredictor<T>, R: Rng + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    shape: &[usize],
    rng: &mut R,
    clip: Option<(f64, f64)>,
) -> Result<Tensor<T>> {
    let init = Tensor::randn(shape.to_vec(), rng);
    reverse_diffuse_from(predictor, sched, kind, init, rng, clip)
}

/// [`reverse_diffuse`] from a caller-provided initial state (the per-step
/// noise still comes from `rng`).
pub fn reverse_diffuse_from<T: Scalar, P: NoisePredictor<T>, R: Rng + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    init: Tensor<T>,
    rng: &mut R,
    clip: Option<(f64, f64)>,
) -> Result<Tensor<T>> {
    let mut x = init;
    match kind {
        SamplerKind::Ddpm => {
            let t_total = sched.steps();
            for t in (1..=t_total).rev() {
                let eps = predictor.predict(&x, t, sched.alpha_bar(t))?;
                let (mu, sigma) = sched.posterior_step_params(&x, &eps, t)?;
                x = mu;
                if t > 1 {
                    let s = T::from_f64(sigma);
                    for v in x.data_mut() {
                        *v += s * T::standard_normal(rng);
                    }
                }
            }
        }
        SamplerKind::Ddim { steps } => {
            let ts = ddim_timesteps(sched.steps(), steps)?;
            for (i, &t_hi) in ts.iter().enumerate() {
                let ab_hi = sched.alpha_bar(t_hi);
                let eps = predictor.predict(&x, t_hi, ab_hi)?;
                let ab_lo = if i + 1 < ts.len() { sched.alpha_bar(ts[i + 1]) } else { 1.0 };
                let inv_sqrt_hi = T::from_f64(1.0 / ab_hi.sqrt());
                let sq_one_minus_hi = T::from_f64((1.0 - ab_hi).sqrt());
                let sq_lo = T::from_f64(ab_lo.sqrt());
                let sq_one_minus_lo = T::from_f64((1.0 - ab_lo).sqrt());
                for (xv, &ev) in x.data_mut().iter_mut().zip(eps.data().iter()) {
                    let x0 = (*xv - sq_one_minus_hi * ev) * inv_sqrt_hi;
                    *xv = sq_lo * x0 + sq_one_minus_lo * ev;
                }
            }
        }
        SamplerKind::EmSde { steps } => {
            if steps < 1 {
                return Err(err_fmt!(Contract, "em_sde needs steps >= 1"));
            }
            let t_total = sched.steps();
            let ds = 1.0 / steps as f64;
            for k in 0..steps {
                let s = 1.0 - k as f64 * ds;
                let beta = sched.beta_continuous(s);
                let abar = sched.alpha_bar_continuous(s);
                let t_index = ((s * t_total as f64).round() as usize).clamp(1, t_total);
                let eps = predictor.predict(&x, t_index, abar)?;
                // score s_theta = -eps / sqrt(1 - abar); reverse drift
                // dx/ds = -(1/2) beta x - beta score, integrated downward
                let score_coef = -1.0 / (1.0 - abar).sqrt();
                let drift_x = T::from_f64(0.5 * beta * ds);
                let drift_e = T::from_f64(beta * ds * score_coef);
                let noise = if k < steps - 1 {
                    Some(T::from_f64((beta * ds).sqrt()))
                } else {
                    None
                };
                for (xv, &ev) in x.data_mut().iter_mut().zip(eps.data().iter()) {
                    *xv = *xv + drift_x * *xv + drift_e * ev;
                    if let Some(n) = noise {
                        *xv += n * T::standard_normal(rng);
                    }
                }
            }
        }
    }
    if let Some((lo, hi)) = clip {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        for v in x.data_mut() {
            *v = (*v).max(lo).min(hi);
        }
    }
    Ok(x)
}

/// A sampling job: `mask = None` draws full images; with a mask the reverse
/// process runs on the visible tokens only and masked regions render as the
/// fill value.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub n: usize,
    pub sampler: SamplerKind,
    pub mask: Option<Mask>,
    pub seed: u64,
    /// Sample from the EMA weights (callers of [`sample_images`] select the
    /// parameter set; this flag travels with the request for CLI wiring).
    pub use_ema: bool,
    pub threads: usize,
}

impl SampleRequest {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.n == 0 {
            return Err(err_fmt!(Contract, "sample count must be >= 1"));
        }
        match self.sampler {
            SamplerKind::Ddim { steps } => {
                if steps < 1 || steps > sched.steps() {
                    return Err(err_fmt!(Contract, "ddim steps must be in [1, {}]", sched.steps()));
                }
            }
            SamplerKind::EmSde { steps } => {
                if steps < 1 {
                    return Err(err_fmt!(Contract, "em_sde steps must be >= 1"));
                }
            }
            SamplerKind::Ddpm => {}
        }
        Ok(())
    }
}

fn sample_one(
    params: &ParamSet<f32>,
    cfg: &UViTConfig,
    sched: &NoiseSchedule,
    request: &SampleRequest,
    mask: &Mask,
    index: usize,
) -> Result<Tensor<f32>> {
    // worker-independent stream per (seed, sample index)
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    rng.set_stream(index as u64 + 1);
    let predictor = NetworkPredictor { params, cfg, mask };
    let state = reverse_diffuse(
        &predictor,
        sched,
        request.sampler,
        &[cfg.n_tokens(), cfg.token_dim()],
        &mut rng,
        Some((-1.0, 1.0)),
    )?;
    let visible = state.gather_rows(mask.tau())?;
    model::unpatchify(&visible, cfg.grid(), cfg.patch, cfg.channels, MASK_FILL, Some(mask))
}

/// Generate `request.n` images. Sampling is seed-deterministic and
/// embarrassingly parallel: each sample owns an rng stream derived from
/// (seed, index), so the thread count never changes outputs.
pub fn sample_images(
    params: &ParamSet<f32>,
    cfg: &UViTConfig,
    sched: &NoiseSchedule,
    request: &SampleRequest,
) -> Result<Vec<Tensor<f32>>> {
    request.validate(sched)?;
    let identity = Mask::identity(cfg.grid());
    let mask = match &request.mask {
        Some(m) => {
            if m.grid() != cfg.grid() {
                return Err(err_fmt!(Contract, "mask grid does not match the model grid"));
            }
            m
        }
        None => &identity,
    };
    let threads = request.threads.max(1).min(request.n);
    if threads == 1 {
        return (0..request.n)
            .map(|i| sample_one(params, cfg, sched, request, mask, i))
            .collect();
    }
    let mut out: Vec<Option<Tensor<f32>>> = (0..request.n).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (w, chunk) in out.chunks_mut(request.n.div_ceil(threads)).enumerate() {
            let start = w * request.n.div_ceil(threads);
            handles.push(scope.spawn(move || -> Result<()> {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(sample_one(params, cfg, sched, request, mask, start + j)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().map_err(|_| err_fmt!(Contract, "sampler worker panicked"))??;
        }
        Ok(())
    })?;
    Ok(out.into_iter().map(|t| t.expect("filled")).collect())
}
