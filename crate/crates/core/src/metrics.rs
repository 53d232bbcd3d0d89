//! Evaluation statistics for generated fields against a reference set.
//!
//! Pairwise kernel sums are accumulated in fixed point, which makes MMD
//! exactly symmetric and independent of sample order.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::field::Samples;
use crate::pde::SelectionMask;

/// Modes whose reference energy is below this fraction of the peak are
/// treated as empty in MELR.
pub const EMPTY_MODE_FRACTION: f64 = 1e-12;

/// `E(k)` for `k = 0..=n/2` with an unnormalized forward DFT; `±k` are
/// pooled into one bin.
pub fn energy_spectrum(u: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    spectrum_with(&mut planner, u)
}

fn spectrum_with(planner: &mut FftPlanner<f64>, u: &[f64]) -> Vec<f64> {
    let n = u.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = u.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let mut e = vec![0.0; n / 2 + 1];
    for (j, c) in buf.iter().enumerate() {
        let k = if j <= n / 2 { j } else { n - j };
        e[k] += c.norm_sqr();
    }
    e
}

/// Spectrum averaged over samples.
pub fn mean_energy_spectrum(samples: &Samples) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0; samples.dim() / 2 + 1];
    for r in samples.rows() {
        for (a, e) in acc.iter_mut().zip(spectrum_with(&mut planner, r)) {
            *a += e;
        }
    }
    let n = samples.len().max(1) as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Melr {
    pub value: f64,
    /// Reference modes skipped for carrying no energy.
    pub excluded: usize,
}

/// `Σ_k w_k |log(E_pred(k)/E_ref(k))|` with uniform weights or weights
/// proportional to the reference energy.
pub fn melr(e_pred: &[f64], e_ref: &[f64], weighted: bool) -> Result<Melr> {
    check_dim("energy spectrum", e_ref.len(), e_pred.len())?;
    let peak = e_ref.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(invalid("reference spectrum carries no energy"));
    }
    let keep: Vec<usize> = (0..e_ref.len()).filter(|k| e_ref[*k] > EMPTY_MODE_FRACTION * peak).collect();
    let excluded = e_ref.len() - keep.len();
    if excluded > 0 {
        log::warn!("MELR: {excluded} empty reference modes excluded");
    }
    if keep.iter().any(|k| !(e_pred[*k] > 0.0)) {
        return Err(invalid("predicted spectrum has an empty mode where the reference does not"));
    }
    let total: f64 = keep.iter().map(|k| e_ref[*k]).sum();
    let value = keep
        .iter()
        .map(|k| {
            let w = if weighted { e_ref[*k] / total } else { 1.0 / keep.len() as f64 };
            w * (e_pred[*k] / e_ref[*k]).ln().abs()
        })
        .sum();
    Ok(Melr { value, excluded })
}

/// `log(E_pred(k)/E_ref(k))` per mode; empty reference modes give `None`.
pub fn energy_log_ratio(e_pred: &[f64], e_ref: &[f64]) -> Vec<Option<f64>> {
    let peak = e_ref.iter().cloned().fold(0.0, f64::max);
    e_pred
        .iter()
        .zip(e_ref)
        .map(|(p, r)| (*r > EMPTY_MODE_FRACTION * peak && *p > 0.0).then(|| (p / r).ln()))
        .collect()
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn need(what: &str, s: &Samples, min: usize) -> Result<()> {
    if s.len() < min {
        return Err(invalid(format!("{what} needs at least {min} samples, got {}", s.len())));
    }
    Ok(())
}

/// `‖Cov_pred − Cov_ref‖_F / ‖Cov_pred‖_F` over the full domain.
pub fn cov_rmse(pred: &Samples, reference: &Samples) -> Result<f64> {
    check_dim("covariance", reference.dim(), pred.dim())?;
    need("covRMSE", pred, 2)?;
    need("covRMSE", reference, 2)?;
    let (cp, cr) = (pred.covariance(), reference.covariance());
    let diff: Vec<f64> = cp.iter().zip(&cr).map(|(a, b)| a - b).collect();
    let denom = frobenius(&cp);
    if denom == 0.0 {
        return Ok(if frobenius(&diff) == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(frobenius(&diff) / denom)
}

pub const KDE_GRID: usize = 512;

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scott's rule, floored so degenerate columns still give a kernel.
fn scott_bandwidth(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
    (std_dev(v) * (v.len() as f64).powf(-0.2)).max(1e-9 * scale)
}

fn kde_log_density(data: &[f64], h: f64, x: f64) -> f64 {
    let z = |v: &f64| -0.5 * ((x - v) / h).powi(2);
    let top = data.iter().map(z).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = data.iter().map(|v| (z(v) - top).exp()).sum();
    top + s.ln() - (data.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

fn kld_1d(pred: &[f64], reference: &[f64]) -> f64 {
    let (hp, hr) = (scott_bandwidth(pred), scott_bandwidth(reference));
    let pad = 3.0 * hp.max(hr);
    let lo = pred.iter().chain(reference).cloned().fold(f64::INFINITY, f64::min) - pad;
    let hi = pred.iter().chain(reference).cloned().fold(f64::NEG_INFINITY, f64::max) + pad;
    let dx = (hi - lo) / (KDE_GRID - 1) as f64;
    let f: Vec<f64> = (0..KDE_GRID)
        .map(|i| {
            let x = lo + i as f64 * dx;
            let lr = kde_log_density(reference, hr, x);
            let lp = kde_log_density(pred, hp, x);
            lr.exp() * (lr - lp)
        })
        .collect();
    dx * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[KDE_GRID - 1]))
}

/// Sum over dimensions of the KL divergence between 1D Gaussian KDEs
/// (reference ‖ prediction), by the trapezoid rule.
pub fn kde_kld(pred: &Samples, reference: &Samples) -> Result<f64> {
    check_dim("KLD", reference.dim(), pred.dim())?;
    need("KLD", pred, 30)?;
    need("KLD", reference, 30)?;
    Ok((0..pred.dim())
        .into_par_iter()
        .map(|m| kld_1d(&pred.column(m), &reference.column(m)))
        .collect::<Vec<_>>()
        .iter()
        .sum())
}

/// Fixed-point accumulator for kernel values in `[0, 1]`: integer sums do
/// not depend on order.
#[derive(Clone, Copy, Default)]
struct ExactSum(i128);

const FIXED_SCALE: f64 = 1_237_940_039_285_380_274_899_124_224.0; // 2^90, room for ~3.7e5 samples

impl ExactSum {
    fn add(&mut self, v: f64) {
        self.0 += (v * FIXED_SCALE) as i128;
    }

    fn merge(self, o: Self) -> Self {
        Self(self.0 + o.0)
    }

    fn value(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(d2: f64, inv_two_h2: &[f64]) -> f64 {
    inv_two_h2.iter().map(|c| (-d2 * c).exp()).sum::<f64>() / inv_two_h2.len() as f64
}

fn within_sum(a: &Samples, c: &[f64]) -> f64 {
    let s = (0..a.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = ExactSum::default();
            for j in i + 1..a.len() {
                acc.add(kernel(sq_dist(a.row(i), a.row(j)), c));
            }
            acc
        })
        .reduce(ExactSum::default, ExactSum::merge);
    2.0 * s.value()
}

fn cross_sum(a: &Samples, b: &Samples, c: &[f64]) -> f64 {
    (0..a.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = ExactSum::default();
            for r in b.rows() {
                acc.add(kernel(sq_dist(a.row(i), r), c));
            }
            acc
        })
        .reduce(ExactSum::default, ExactSum::merge)
        .value()
}

/// Unbiased `MMD²` with a kernel averaging Gaussians
/// `exp(−‖x − y‖²/(2h²))` over `bandwidths`.
pub fn mmd(pred: &Samples, reference: &Samples, bandwidths: &[f64]) -> Result<f64> {
    check_dim("MMD", reference.dim(), pred.dim())?;
    need("MMD", pred, 2)?;
    need("MMD", reference, 2)?;
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(invalid("MMD bandwidths must be positive and non-empty"));
    }
    let c: Vec<f64> = bandwidths.iter().map(|h| 0.5 / (h * h)).collect();
    let (np, nr) = (pred.len() as f64, reference.len() as f64);
    let within = within_sum(pred, &c) / (np * (np - 1.0)) + within_sum(reference, &c) / (nr * (nr - 1.0));
    Ok(within - 2.0 * cross_sum(pred, reference, &c) / (np * nr))
}

pub const MEDIAN_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Median pairwise distance over the pooled sets, times `scales`.
pub fn median_bandwidths(pred: &Samples, reference: &Samples, scales: &[f64]) -> Result<Vec<f64>> {
    check_dim("MMD", reference.dim(), pred.dim())?;
    let pooled: Vec<&[f64]> = pred.rows().chain(reference.rows()).collect();
    if pooled.len() < 2 {
        return Err(invalid("median heuristic needs at least two samples"));
    }
    let mut d: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let pooled = &pooled;
            (i + 1..pooled.len()).map(move |j| sq_dist(pooled[i], pooled[j]))
        })
        .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let median = m.sqrt();
    if !(median > 0.0) {
        return Err(invalid("median pairwise distance is zero"));
    }
    Ok(scales.iter().map(|s| s * median).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramRange {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramRange {
    fn default() -> Self {
        Self {
            lo: -20.0,
            hi: 20.0,
            bins: 400,
        }
    }
}

impl HistogramRange {
    /// Values beyond the range land in the end bins.
    fn counts(&self, v: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.bins];
        for x in v {
            let b = ((x - self.lo) * self.bins as f64 / (self.hi - self.lo)).floor();
            c[b.clamp(0.0, (self.bins - 1) as f64) as usize] += 1.0;
        }
        c
    }
}

fn wass1_1d(pred: &[f64], reference: &[f64], range: &HistogramRange) -> f64 {
    let (cp, cr) = (range.counts(pred), range.counts(reference));
    let width = (range.hi - range.lo) / range.bins as f64;
    let (np, nr) = (pred.len() as f64, reference.len() as f64);
    let (mut fp, mut fr, mut total) = (0.0, 0.0, 0.0);
    for (p, r) in cp.iter().zip(&cr) {
        fp += p;
        fr += r;
        total += (fp / np - fr / nr).abs();
    }
    total * width
}

/// Mean over dimensions of `∫|CDF_pred − CDF_ref|` from histogram CDFs.
pub fn wass1(pred: &Samples, reference: &Samples, range: &HistogramRange) -> Result<f64> {
    check_dim("Wass1", reference.dim(), pred.dim())?;
    need("Wass1", pred, 1)?;
    need("Wass1", reference, 1)?;
    if !(range.hi > range.lo) || range.bins == 0 {
        return Err(invalid("histogram range must be non-empty"));
    }
    let d = pred.dim();
    let per: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|m| wass1_1d(&pred.column(m), &reference.column(m), range))
        .collect();
    Ok(per.iter().sum::<f64>() / d as f64)
}

/// Root mean squared deviation from the per-condition mean, pooled over
/// pixels; rows are grouped condition-major, `per_condition` at a time.
pub fn variability(samples: &Samples, per_condition: usize) -> Result<f64> {
    if per_condition == 0 || samples.len() % per_condition != 0 {
        return Err(invalid(format!(
            "{} samples do not split into groups of {per_condition}",
            samples.len()
        )));
    }
    need("variability", samples, 1)?;
    let mut ss = 0.0;
    for g in 0..samples.len() / per_condition {
        let group = samples.slice(g * per_condition, per_condition);
        let mean = group.mean();
        for r in group.rows() {
            ss += r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    Ok((ss / samples.data().len() as f64).sqrt())
}

/// Symmetric mean absolute percentage error over all values; `0/0`
/// terms count as zero.
pub fn smape(y: &[f64], y_prime: &[f64]) -> Result<f64> {
    check_dim("sMAPE", y.len(), y_prime.len())?;
    if y.is_empty() {
        return Err(invalid("sMAPE of empty input"));
    }
    let s: f64 = y
        .iter()
        .zip(y_prime)
        .map(|(a, b)| {
            let den = 0.5 * (a.abs() + b.abs());
            if den == 0.0 { 0.0 } else { (a - b).abs() / den }
        })
        .sum();
    Ok(s / y.len() as f64)
}

/// Mean over samples of `‖C′x_n − ȳ_n‖ / ‖C′x_n‖`; row `n` is paired
/// with condition `n / per_condition`. `mask = None` means the samples are
/// already low-resolution.
pub fn constraint_rmse(
    samples: &Samples,
    mask: Option<&SelectionMask>,
    conditions: &Samples,
    per_condition: usize,
) -> Result<f64> {
    if per_condition == 0 {
        return Err(invalid("per_condition must be positive"));
    }
    check_dim("constraint rows", conditions.len() * per_condition, samples.len())?;
    need("constraint RMSE", samples, 1)?;
    let mut total = 0.0;
    for (n, x) in samples.rows().enumerate() {
        let c = match mask {
            Some(m) => m.apply(x)?,
            None => x.to_vec(),
        };
        let y = conditions.row(n / per_condition);
        check_dim("constraint values", y.len(), c.len())?;
        let num = c.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den = c.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += if num == 0.0 { 0.0 } else { num / den };
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Fixed MMD bandwidths; when absent the median heuristic is used.
    #[serde(default)]
    pub mmd_bandwidths: Option<Vec<f64>>,
    pub mmd_scales: Vec<f64>,
    pub histogram: HistogramRange,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mmd_bandwidths: None,
            mmd_scales: MEDIAN_SCALES.to_vec(),
            histogram: HistogramRange::default(),
        }
    }
}

/// How a method's output relates to its low-resolution input.
pub struct LowResView<'a> {
    /// `None` when the output is itself low-resolution.
    pub mask: Option<&'a SelectionMask>,
    /// Uncorrected low-resolution inputs, one row per condition.
    pub lflr: &'a Samples,
    /// The values the method was asked to match, one row per condition.
    pub imposed: &'a Samples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "covRMSE")]
    pub cov_rmse: f64,
    #[serde(rename = "MELRu")]
    pub melr_u: f64,
    #[serde(rename = "MELRw")]
    pub melr_w: f64,
    #[serde(rename = "KLD")]
    pub kld: f64,
    #[serde(rename = "Wass1")]
    pub wass1: f64,
    #[serde(rename = "MMD")]
    pub mmd: f64,
    #[serde(rename = "Var")]
    pub variability: f64,
    #[serde(rename = "constraintRMSE")]
    pub constraint_rmse: f64,
    #[serde(rename = "sMAPE")]
    pub smape: f64,
    pub mmd_bandwidths: Vec<f64>,
    pub melr_excluded_modes: usize,
    /// `log(E_pred/E_ref)` per mode; `None` for empty reference modes.
    pub energy_log_ratio: Vec<Option<f64>>,
}

impl MetricsReport {
    /// `k,log_ratio` lines; empty modes are left blank.
    pub fn energy_ratio_csv(&self) -> String {
        let mut s = String::from("k,log_ratio\n");
        for (k, r) in self.energy_log_ratio.iter().enumerate() {
            match r {
                Some(v) => s.push_str(&format!("{k},{v:e}\n")),
                None => s.push_str(&format!("{k},\n")),
            }
        }
        s
    }
}

/// Every metric of `pred` (condition-major, `per_condition` rows per
/// condition) against `reference`.
pub fn evaluate(
    pred: &Samples,
    reference: &Samples,
    per_condition: usize,
    low_res: &LowResView,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let (ep, er) = (mean_energy_spectrum(pred), mean_energy_spectrum(reference));
    let mu = melr(&ep, &er, false)?;
    let mw = melr(&ep, &er, true)?;
    let bandwidths = match &cfg.mmd_bandwidths {
        Some(b) => b.clone(),
        None => median_bandwidths(pred, reference, &cfg.mmd_scales)?,
    };
    let projected = match low_res.mask {
        Some(m) => pred.map_rows(m.d_prime, |r| m.apply(r))?,
        None => pred.clone(),
    };
    let lflr_rows = Samples::from_rows(
        low_res.lflr.dim(),
        (0..pred.len()).map(|n| low_res.lflr.row(n / per_condition.max(1))),
    )?;
    let report = MetricsReport {
        cov_rmse: cov_rmse(pred, reference)?,
        melr_u: mu.value,
        melr_w: mw.value,
        kld: kde_kld(pred, reference)?,
        wass1: wass1(pred, reference, &cfg.histogram)?,
        mmd: mmd(pred, reference, &bandwidths)?,
        variability: variability(pred, per_condition)?,
        constraint_rmse: constraint_rmse(pred, low_res.mask, low_res.imposed, per_condition)?,
        smape: smape(lflr_rows.data(), projected.data())?,
        mmd_bandwidths: bandwidths,
        melr_excluded_modes: mu.excluded,
        energy_log_ratio: energy_log_ratio(&ep, &er),
    };
    let scalars = [
        report.cov_rmse,
        report.melr_u,
        report.melr_w,
        report.kld,
        report.wass1,
        report.mmd,
        report.variability,
        report.constraint_rmse,
        report.smape,
    ];
    if scalars.iter().any(|v| !v.is_finite()) {
        return Err(crate::error::CoreError::NonFinite { what: "metrics", step: 0 });
    }
    Ok(report)
}
