//! Variance-preserving diffusion: schedule, perturbation kernel, score and
//! the reverse-SDE sampler written in terms of a denoiser.
//!
//! With `φ(t) = ½ β_d t² + β_min t` the schedule is `σ_t = √(e^φ − 1)` and
//! `s_t = e^{−φ/2} = 1/√(σ_t² + 1)`; the forward kernel is
//! `x_t = s_t (x_0 + σ_t ε)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::Samples;
use crate::pde::SelectionMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpSchedule {
    pub beta_d: f64,
    pub beta_min: f64,
    pub eps_t: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta_d: 19.9,
            beta_min: 0.1,
            eps_t: 1e-3,
        }
    }
}

impl VpSchedule {
    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(invalid(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    fn phi(&self, t: f64) -> f64 {
        0.5 * self.beta_d * t * t + self.beta_min * t
    }

    fn phi_dot(&self, t: f64) -> f64 {
        self.beta_d * t + self.beta_min
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.phi(t).exp_m1().sqrt())
    }

    pub fn s(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok((-0.5 * self.phi(t)).exp())
    }

    /// `dσ/dt = e^φ φ' / (2σ)`.
    pub fn sigma_dot(&self, t: f64) -> Result<f64> {
        let sigma = self.sigma(t)?;
        if sigma == 0.0 {
            return Err(invalid("dσ/dt is singular at t = 0"));
        }
        Ok(self.phi(t).exp() * self.phi_dot(t) / (2.0 * sigma))
    }

    /// `ds/dt = −½ φ' s`.
    pub fn s_dot(&self, t: f64) -> Result<f64> {
        Ok(-0.5 * self.phi_dot(t) * self.s(t)?)
    }

    /// Positive root of `½ β_d t² + β_min t = log(σ² + 1)`.
    pub fn t_of_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be finite and non-negative, got {sigma}")));
        }
        let c = sigma.mul_add(sigma, 1.0).ln();
        // (-b + sqrt(b² + 2 β_d c)) / β_d, rewritten to avoid cancellation
        let b = self.beta_min;
        let t = 2.0 * c / (b + (b * b + 2.0 * self.beta_d * c).sqrt());
        Self::check_t(t)?;
        Ok(t)
    }

    pub fn sigma_min(&self) -> f64 {
        self.phi(self.eps_t).exp_m1().sqrt()
    }

    pub fn sigma_max(&self) -> f64 {
        self.phi(1.0).exp_m1().sqrt()
    }

    /// Training loss weight `(σ² + σ_d²) / (σ σ_d)²`.
    pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
        (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
    }

    /// One time per stratum of `[eps_t, 1]`, sharing a uniform offset.
    pub fn stratified_times<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let dt = (1.0 - self.eps_t) / n as f64;
        let t0 = self.eps_t + dt * rng.random::<f64>();
        (0..n).map(|i| t0 + i as f64 * dt).collect()
    }

    /// `x_t = s_t (x_0 + σ_t ε)`; returns `(x_t, ε)`.
    pub fn perturb<R: Rng>(&self, x0: &[f64], t: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, sigma) = (self.s(t)?, self.sigma(t)?);
        let eps: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
        let xt = x0.iter().zip(&eps).map(|(x, e)| s * (x + sigma * e)).collect();
        Ok((xt, eps))
    }

    /// Times whose noise levels are `σ_max (σ_min/σ_max)^{i/N}`, `i = 0..=N`.
    pub fn exponential_time_grid(&self, n: usize, sigma_min: f64, sigma_max: f64) -> Result<Vec<f64>> {
        exponential_sigma_grid(n, sigma_min, sigma_max)?
            .into_iter()
            .map(|s| self.t_of_sigma(s))
            .collect()
    }
}

pub fn exponential_sigma_grid(n: usize, sigma_min: f64, sigma_max: f64) -> Result<Vec<f64>> {
    if n == 0 || !(sigma_min > 0.0) || !(sigma_max > sigma_min) {
        return Err(invalid(format!(
            "need n >= 1 and 0 < sigma_min < sigma_max, got n={n}, [{sigma_min}, {sigma_max}]"
        )));
    }
    let ratio = (sigma_min / sigma_max).ln();
    let mut grid: Vec<f64> = (0..=n).map(|i| sigma_max * (ratio * i as f64 / n as f64).exp()).collect();
    grid[0] = sigma_max;
    grid[n] = sigma_min;
    Ok(grid)
}

/// A denoiser `D(x̂, σ) ≈ E[x_0 | x̂]`, evaluated on a batch of rows that
/// share one noise level.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, x_hat: &Samples, sigma: f64) -> Result<Samples>;

    /// `D(x̂, σ)` together with `∇_x̂ ‖C' D(x̂, σ) − y'‖²` for each row.
    fn denoise_with_constraint_grad(
        &self,
        x_hat: &Samples,
        sigma: f64,
        mask: &SelectionMask,
        y: &Samples,
    ) -> Result<(Samples, Samples)>;
}

/// Tweedie's formula: `∇ log p_t(x) = (D(x̂, σ) − x̂) / (s σ²)` with `x̂ = x/s`.
pub fn score_from_denoised(denoised: &[f64], x_hat: &[f64], s: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid("score is singular at sigma = 0"));
    }
    check_dim("score", x_hat.len(), denoised.len())?;
    let k = 1.0 / (s * sigma * sigma);
    Ok(denoised.iter().zip(x_hat).map(|(d, x)| k * (d - x)).collect())
}

pub fn score<D: Denoiser + ?Sized>(den: &D, schedule: &VpSchedule, x_t: &Samples, t: f64) -> Result<Samples> {
    if t <= 0.0 {
        return Err(invalid("score is singular at t = 0"));
    }
    let (s, sigma) = (schedule.s(t)?, schedule.sigma(t)?);
    let x_hat = Samples::new(x_t.dim(), x_t.data().iter().map(|v| v / s).collect())?;
    let d = den.denoise(&x_hat, sigma)?;
    let data = d
        .rows()
        .zip(x_hat.rows())
        .map(|(a, b)| score_from_denoised(a, b, s, sigma))
        .collect::<Result<Vec<_>>>()?;
    Samples::from_rows(x_t.dim(), data)
}

/// Exact denoiser for data `N(μ, σ_d² I)`:
/// `D(x̂, σ) = (σ_d² x̂ + σ² μ) / (σ_d² + σ²)`.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    pub mean: Vec<f64>,
    pub sigma_data: f64,
}

impl GaussianDenoiser {
    fn skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sd2 + sigma * sigma)
    }
}

impl Denoiser for GaussianDenoiser {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn denoise(&self, x_hat: &Samples, sigma: f64) -> Result<Samples> {
        check_dim("gaussian denoiser input", self.dim(), x_hat.dim())?;
        let c = self.skip(sigma);
        let data = x_hat
            .rows()
            .flat_map(|r| r.iter().zip(&self.mean).map(move |(x, m)| c * x + (1.0 - c) * m))
            .collect();
        Samples::new(self.dim(), data)
    }

    fn denoise_with_constraint_grad(
        &self,
        x_hat: &Samples,
        sigma: f64,
        mask: &SelectionMask,
        y: &Samples,
    ) -> Result<(Samples, Samples)> {
        let d = self.denoise(x_hat, sigma)?;
        let c = self.skip(sigma);
        let grads = d
            .rows()
            .zip(y.rows())
            .map(|(row, yr)| {
                let resid: Vec<f64> = mask.apply(row)?.iter().zip(yr).map(|(a, b)| 2.0 * c * (a - b)).collect();
                mask.pinv(&resid)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((d, Samples::from_rows(self.dim(), grads)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Return `D̃(x/s, σ_min)` instead of the raw final state.
    pub terminal_denoise: bool,
    /// Chains evaluated together in one denoiser call.
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            terminal_denoise: true,
            batch: 64,
        }
    }
}

/// Drift of the reverse SDE in denoiser form:
/// `(ṡ/s + 2σ̇/σ) x − (2 s σ̇/σ) D(x/s, σ)`, which equals `f x − g² ∇log p`
/// for `f = ṡ/s`, `g² = 2 s² σ̇ σ`.
pub fn reverse_drift(x: f64, denoised: f64, s: f64, s_dot: f64, sigma: f64, sigma_dot: f64) -> f64 {
    (s_dot / s + 2.0 * sigma_dot / sigma) * x - 2.0 * s * sigma_dot / sigma * denoised
}

/// Euler–Maruyama integration of the reverse SDE over the exponential
/// σ grid for a block of chains. `denoise(x̂, σ, first_chain)` returns the
/// (possibly post-processed) denoiser output for the rows of `x̂`, which
/// are chains `first_chain..`. Chain `c` draws all its noise from
/// `rngs[c]`, so results do not depend on how chains are blocked.
pub fn sample_chains<F>(
    schedule: &VpSchedule,
    cfg: &SamplerConfig,
    dim: usize,
    rngs: &mut [ChaCha8Rng],
    first_chain: usize,
    denoise: &F,
) -> Result<Samples>
where
    F: Fn(&Samples, f64, usize) -> Result<Samples> + Sync,
{
    let sigmas = exponential_sigma_grid(cfg.steps, schedule.sigma_min(), schedule.sigma_max())?;
    let times: Vec<f64> = sigmas.iter().map(|s| schedule.t_of_sigma(*s)).collect::<Result<_>>()?;
    let s_max = schedule.s(times[0])?;
    let init = s_max * sigmas[0];
    let mut x = Vec::with_capacity(rngs.len() * dim);
    for rng in rngs.iter_mut() {
        for _ in 0..dim {
            x.push(init * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let mut x = Samples::new(dim, x)?;
    for i in 0..cfg.steps {
        let (t, t_next) = (times[i], times[i + 1]);
        let sigma = sigmas[i];
        let s = schedule.s(t)?;
        let (s_dot, sigma_dot) = (schedule.s_dot(t)?, schedule.sigma_dot(t)?);
        let dt = t_next - t;
        let x_hat = Samples::new(dim, x.data().iter().map(|v| v / s).collect())?;
        let d = denoise(&x_hat, sigma, first_chain)?;
        let g = s * (2.0 * sigma_dot * sigma).sqrt();
        let noise_scale = g * (-dt).sqrt();
        for (c, rng) in rngs.iter_mut().enumerate() {
            let (xr, dr) = (x.row_mut(c), d.row(c));
            for (xv, dv) in xr.iter_mut().zip(dr) {
                let z: f64 = rng.sample(StandardNormal);
                *xv += reverse_drift(*xv, *dv, s, s_dot, sigma, sigma_dot) * dt + noise_scale * z;
            }
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "reverse SDE",
                step: i + 1,
            });
        }
    }
    let t_end = times[cfg.steps];
    if cfg.terminal_denoise {
        let s = schedule.s(t_end)?;
        let x_hat = Samples::new(dim, x.data().iter().map(|v| v / s).collect())?;
        denoise(&x_hat, sigmas[cfg.steps], first_chain)
    } else {
        Ok(x)
    }
}

/// Runs `rngs.len()` chains in blocks of `cfg.batch`, blocks in parallel.
pub fn sample_parallel<F>(
    schedule: &VpSchedule,
    cfg: &SamplerConfig,
    dim: usize,
    mut rngs: Vec<ChaCha8Rng>,
    denoise: &F,
) -> Result<Samples>
where
    F: Fn(&Samples, f64, usize) -> Result<Samples> + Sync,
{
    let batch = cfg.batch.max(1);
    let blocks: Vec<Samples> = rngs
        .par_chunks_mut(batch)
        .enumerate()
        .map(|(b, chunk)| sample_chains(schedule, cfg, dim, chunk, b * batch, denoise))
        .collect::<Result<_>>()?;
    let mut out = Samples::empty(dim);
    for b in &blocks {
        for r in b.rows() {
            out.push(r)?;
        }
    }
    Ok(out)
}

/// Unconditional samples; chain `c` uses `rng_for(c)`.
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    den: &D,
    schedule: &VpSchedule,
    cfg: &SamplerConfig,
    n: usize,
    rng_for: impl Fn(usize) -> ChaCha8Rng,
) -> Result<Samples> {
    let rngs = (0..n).map(rng_for).collect();
    sample_parallel(schedule, cfg, den.dim(), rngs, &|x: &Samples, sigma: f64, _| den.denoise(x, sigma))
}
