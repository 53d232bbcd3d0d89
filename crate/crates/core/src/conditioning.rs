//! A-posteriori conditioning on the linear constraint `C′x = ȳ′`.
//!
//! The post-processed denoiser is
//! `D̃ = C′†ȳ′ + (I − VVᵀ)[D − α ∇_x̂ ‖C′D − ȳ′‖²]`, with `V = C′ᵀ` for a
//! selection mask, so `VVᵀ` is the indicator of the selected coordinates
//! and `C′† = C′ᵀ`.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_parallel, Denoiser, SamplerConfig, VpSchedule};
use crate::error::{check_dim, invalid, Result};
use crate::field::Samples;
use crate::net::DenoiserModel;
use crate::ot::EntropicTransport;
use crate::pde::SelectionMask;
use crate::rng::stage_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintSpec {
    /// `None` is the empty constraint (`d′ = 0`).
    pub mask: Option<SelectionMask>,
    pub alpha_tilde: f64,
}

impl ConstraintSpec {
    pub fn new(mask: SelectionMask, alpha_tilde: f64) -> Result<Self> {
        if !(alpha_tilde >= 0.0) {
            return Err(invalid(format!("alpha_tilde must be non-negative, got {alpha_tilde}")));
        }
        Ok(Self {
            mask: Some(mask),
            alpha_tilde,
        })
    }

    /// `γ = d′/d`.
    pub fn gamma(&self) -> f64 {
        self.mask.map_or(0.0, |m| m.fraction())
    }

    /// `α = α̃ γ`.
    pub fn alpha(&self) -> f64 {
        self.alpha_tilde * self.gamma()
    }
}

/// `D̃(x̂, σ)` for each row of `x_hat` against the matching row of `y`.
pub fn conditioned_denoise<D: Denoiser + ?Sized>(
    den: &D,
    spec: &ConstraintSpec,
    x_hat: &Samples,
    sigma: f64,
    y: &Samples,
) -> Result<Samples> {
    let Some(mask) = spec.mask else {
        return den.denoise(x_hat, sigma);
    };
    check_dim("constraint mask", den.dim(), mask.d)?;
    check_dim("constraint values", mask.d_prime, y.dim())?;
    check_dim("constraint rows", x_hat.len(), y.len())?;
    let alpha = spec.alpha();
    let (d, grad) = if alpha == 0.0 {
        (den.denoise(x_hat, sigma)?, None)
    } else {
        let (d, g) = den.denoise_with_constraint_grad(x_hat, sigma, &mask, y)?;
        (d, Some(g))
    };
    let selected = mask.indicator();
    let mut out = Samples::empty(mask.d);
    for i in 0..d.len() {
        let mut row = mask.pinv(y.row(i))?;
        for (k, v) in row.iter_mut().enumerate() {
            if !selected[k] {
                *v = d.row(i)[k] - grad.as_ref().map_or(0.0, |g| alpha * g.row(i)[k]);
            }
        }
        out.push(&row)?;
    }
    Ok(out)
}

/// Reverse-SDE samples under the conditioned denoiser, `per_condition`
/// chains per row of `conditions`, condition-major. Chain `c` uses
/// `rng_for(c)`.
pub fn sample_conditional<D: Denoiser + ?Sized>(
    den: &D,
    schedule: &VpSchedule,
    sampler: &SamplerConfig,
    spec: &ConstraintSpec,
    conditions: &Samples,
    per_condition: usize,
    rng_for: impl Fn(usize) -> rand_chacha::ChaCha8Rng,
) -> Result<Samples> {
    if per_condition == 0 {
        return Err(invalid("per_condition must be positive"));
    }
    let chains = conditions.len() * per_condition;
    let rngs = (0..chains).map(rng_for).collect();
    let denoise = |x: &Samples, sigma: f64, first: usize| {
        let rows = (first..first + x.len()).map(|c| conditions.row(c / per_condition));
        let y = Samples::from_rows(conditions.dim(), rows)?;
        conditioned_denoise(den, spec, x, sigma, &y)
    };
    sample_parallel(schedule, sampler, den.dim(), rngs, &denoise)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownscaleConfig {
    pub alpha_tilde: f64,
    pub samples_per_condition: usize,
    pub sampler: SamplerConfig,
}

impl Default for DownscaleConfig {
    fn default() -> Self {
        Self {
            alpha_tilde: 1.0,
            samples_per_condition: 16,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Debiases low-resolution conditions with `transport` (or uses them as
/// given), then draws conditioned high-resolution samples. Inputs and
/// outputs are in physical units; the constraint is imposed on the
/// standardized fields the model was trained on.
pub fn downscale(
    model: &DenoiserModel,
    transport: Option<&EntropicTransport>,
    y_bar: &Samples,
    mask: SelectionMask,
    schedule: &VpSchedule,
    cfg: &DownscaleConfig,
    seed: u64,
) -> Result<Samples> {
    let debiased = match transport {
        Some(t) => t.map_samples(y_bar)?,
        None => y_bar.clone(),
    };
    let sd = model.sigma_data;
    let standardized = Samples::new(debiased.dim(), debiased.data().iter().map(|v| v / sd).collect())?;
    let spec = ConstraintSpec::new(mask, cfg.alpha_tilde)?;
    let out = sample_conditional(
        model,
        schedule,
        &cfg.sampler,
        &spec,
        &standardized,
        cfg.samples_per_condition,
        |c| stage_rng(seed, "downscale", c as u64),
    )?;
    Samples::new(out.dim(), out.data().iter().map(|v| v * sd).collect())
}
