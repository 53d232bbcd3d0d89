//! Kuramoto–Sivashinsky data generation.
//!
//! `u_t + u u_x + nu u_xx + nu u_xxxx = 0` on a periodic domain of length
//! `L`. The high-fidelity solver is pseudo-spectral with a low-storage
//! IMEX Runge–Kutta scheme (linear part Crank–Nicolson, nonlinear part
//! explicit). The low-fidelity solver is a finite-volume Van Leer /
//! Lax–Wendroff advection step followed by a Crank–Nicolson step of the
//! second-order finite-difference linear operators.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, SnapshotDataset};
use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::{GridField, Samples};
use crate::rng::stage_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Hf,
    Lf,
}

impl Fidelity {
    pub fn tag(self) -> &'static str {
        match self {
            Fidelity::Hf => "hf",
            Fidelity::Lf => "lf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KsConfig {
    pub length: f64,
    pub nu: f64,
    pub n_grid: usize,
    pub dt: f64,
    /// Number of sine terms in the initial condition.
    pub n_modes: usize,
    pub ramp_time: f64,
    pub sample_interval: f64,
    pub n_snapshots_per_traj: usize,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl KsConfig {
    pub fn hf() -> Self {
        Self {
            length: 64.0,
            nu: 1.0,
            n_grid: 192,
            dt: 0.0025,
            n_modes: 30,
            ramp_time: 25.0,
            sample_interval: 12.5,
            n_snapshots_per_traj: 80,
            n_trajectories: 64,
            seed: 0,
        }
    }

    pub fn lf() -> Self {
        Self {
            n_grid: 48,
            dt: 0.02,
            ..Self::hf()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid < 8 || self.n_grid % 2 != 0 {
            return Err(invalid(format!("n_grid must be even and >= 8, got {}", self.n_grid)));
        }
        if !(self.dt > 0.0) || !(self.length > 0.0) || !(self.nu > 0.0) {
            return Err(invalid("dt, length and nu must be positive"));
        }
        if self.sample_interval < self.dt || self.ramp_time < 0.0 {
            return Err(invalid("sample_interval must be >= dt and ramp_time >= 0"));
        }
        Ok(())
    }

    fn steps(&self, time: f64) -> usize {
        (time / self.dt).round() as usize
    }
}

/// `u0(x) = sum_j a_j sin(w_j x + phi_j)` with `a_j ~ U[-1/2, 1/2]`,
/// `phi_j ~ U[0, 2pi]` and `w_j` drawn from `{2pi/L, 4pi/L, 6pi/L}`.
pub fn sample_initial_condition<R: Rng>(cfg: &KsConfig, rng: &mut R) -> GridField {
    let dx = cfg.length / cfg.n_grid as f64;
    let mut u = vec![0.0; cfg.n_grid];
    for _ in 0..cfg.n_modes {
        let a = rng.random_range(-0.5..0.5);
        let w = 2.0 * PI * rng.random_range(1..=3) as f64 / cfg.length;
        let phi = rng.random_range(0.0..2.0 * PI);
        for (i, v) in u.iter_mut().enumerate() {
            *v += a * (w * i as f64 * dx + phi).sin();
        }
    }
    GridField { values: u, length: cfg.length }
}

/// Signed wavenumber index of FFT bin `j` for an `n`-point transform.
pub fn mode_index(j: usize, n: usize) -> isize {
    if j <= n / 2 {
        j as isize
    } else {
        j as isize - n as isize
    }
}

pub trait Solver {
    fn set_state(&mut self, u: &[f64]) -> Result<()>;
    fn step(&mut self) -> Result<()>;
    fn state(&self) -> Vec<f64>;
}

// Low-storage coefficients of the IMEX Runge–Kutta scheme.
const RK_ALPHA: [f64; 6] = [0.0, 0.1496590219993, 0.3704009573644, 0.6222557631345, 0.9582821306748, 1.0];
const RK_BETA: [f64; 5] = [0.0, -0.4178904745, -1.192151694643, -1.697784692471, -1.514183444257];
const RK_GAMMA: [f64; 5] = [0.1496590219993, 0.3792103129999, 0.8229550293869, 0.6994504559488, 0.1530572479681];

pub struct SpectralSolver {
    n: usize,
    dt: f64,
    /// Linear symbol `nu k^2 - nu k^4`.
    lin: Vec<f64>,
    /// `k` with the Nyquist bin zeroed, for `d/dx`.
    wave: Vec<f64>,
    keep: Vec<bool>,
    nonlinear: bool,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buf: Vec<Complex64>,
    h: Vec<Complex64>,
    nl: Vec<Complex64>,
    u_hat: Vec<Complex64>,
    steps_taken: usize,
}

impl SpectralSolver {
    pub fn new(cfg: &KsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_grid;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let scratch_len = fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len());
        let mut lin = vec![0.0; n];
        let mut wave = vec![0.0; n];
        let mut keep = vec![false; n];
        for j in 0..n {
            let m = mode_index(j, n);
            let k = 2.0 * PI * m as f64 / cfg.length;
            lin[j] = cfg.nu * k * k - cfg.nu * k.powi(4);
            wave[j] = if 2 * j == n { 0.0 } else { k };
            // 2/3 rule
            keep[j] = 3 * m.unsigned_abs() < n;
        }
        let zero = Complex64::new(0.0, 0.0);
        Ok(Self {
            n,
            dt: cfg.dt,
            lin,
            wave,
            keep,
            nonlinear: true,
            fft,
            ifft,
            scratch: vec![zero; scratch_len],
            buf: vec![zero; n],
            h: vec![zero; n],
            nl: vec![zero; n],
            u_hat: vec![zero; n],
            steps_taken: 0,
        })
    }

    /// Disables the advection term, leaving the linear dynamics only.
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn modes(&self) -> &[Complex64] {
        &self.u_hat
    }

    pub fn set_modes(&mut self, u_hat: &[Complex64]) -> Result<()> {
        check_dim("spectral state", self.n, u_hat.len())?;
        self.u_hat.copy_from_slice(u_hat);
        self.steps_taken = 0;
        Ok(())
    }

    /// Physical-space state and the largest imaginary residue of the
    /// inverse transform (zero for a Hermitian spectrum).
    pub fn physical(&self) -> (Vec<f64>, f64) {
        let mut buf = self.u_hat.clone();
        let mut scratch = self.scratch.clone();
        self.ifft.process_with_scratch(&mut buf, &mut scratch);
        let scale = 1.0 / self.n as f64;
        let max_imag = buf.iter().map(|c| (c.im * scale).abs()).fold(0.0, f64::max);
        (buf.iter().map(|c| c.re * scale).collect(), max_imag)
    }

    /// `-1/2 i k FFT(u^2)`, dealiased.
    fn eval_nonlinear(&mut self) {
        for ((b, u), keep) in self.buf.iter_mut().zip(&self.u_hat).zip(&self.keep) {
            *b = if *keep { *u } else { Complex64::new(0.0, 0.0) };
        }
        self.ifft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        for b in self.buf.iter_mut() {
            let u = b.re * scale;
            *b = Complex64::new(u * u, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for j in 0..self.n {
            let v = self.buf[j];
            self.nl[j] = if self.keep[j] {
                // -1/2 i k v
                Complex64::new(0.5 * self.wave[j] * v.im, -0.5 * self.wave[j] * v.re)
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
    }

    /// Projects onto Hermitian spectra. The anti-Hermitian part (an
    /// imaginary physical field) is untouched by the real-valued
    /// nonlinearity, so roundoff in it would otherwise grow at the linear
    /// KS rate until it swamps the real part.
    fn symmetrize(&mut self) {
        let n = self.n;
        self.u_hat[0].im = 0.0;
        if n % 2 == 0 {
            self.u_hat[n / 2].im = 0.0;
        }
        for j in 1..n.div_ceil(2) {
            let avg = 0.5 * (self.u_hat[j] + self.u_hat[n - j].conj());
            self.u_hat[j] = avg;
            self.u_hat[n - j] = avg.conj();
        }
    }

    /// One full time step on the stored modes.
    pub fn step_modes(&mut self) -> Result<()> {
        let dt = self.dt;
        for k in 0..5 {
            if self.nonlinear {
                self.eval_nonlinear();
            } else {
                self.nl.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            }
            let mu = 0.5 * dt * (RK_ALPHA[k + 1] - RK_ALPHA[k]);
            for j in 0..self.n {
                self.h[j] = self.nl[j] + self.h[j] * RK_BETA[k];
                let l = self.lin[j];
                self.u_hat[j] = (self.u_hat[j] * (1.0 + mu * l) + self.h[j] * (RK_GAMMA[k] * dt)) / (1.0 - mu * l);
            }
        }
        self.symmetrize();
        self.steps_taken += 1;
        if self.u_hat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "spectral solver",
                step: self.steps_taken,
            });
        }
        Ok(())
    }
}

impl Solver for SpectralSolver {
    fn set_state(&mut self, u: &[f64]) -> Result<()> {
        check_dim("spectral state", self.n, u.len())?;
        for (c, v) in self.u_hat.iter_mut().zip(u) {
            *c = Complex64::new(*v, 0.0);
        }
        self.fft.process_with_scratch(&mut self.u_hat, &mut self.scratch);
        self.h.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        self.steps_taken = 0;
        Ok(())
    }

    fn step(&mut self) -> Result<()> {
        self.step_modes()
    }

    fn state(&self) -> Vec<f64> {
        self.physical().0
    }
}

fn van_leer(r: f64) -> f64 {
    (r + r.abs()) / (1.0 + r.abs())
}

pub struct FiniteVolumeSolver {
    n: usize,
    dt: f64,
    dx: f64,
    /// Crank–Nicolson amplification per FFT bin.
    cn: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buf: Vec<Complex64>,
    flux: Vec<f64>,
    u: Vec<f64>,
    steps_taken: usize,
}

impl FiniteVolumeSolver {
    pub fn new(cfg: &KsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_grid;
        let dx = cfg.length / n as f64;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let scratch_len = fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len());
        let cn = (0..n)
            .map(|j| {
                let k = 2.0 * PI * mode_index(j, n) as f64 / cfg.length;
                let s2 = (0.5 * k * dx).sin().powi(2);
                // symbols of the centered second and fourth differences
                let d2 = -4.0 * s2 / (dx * dx);
                let d4 = 16.0 * s2 * s2 / dx.powi(4);
                let lam = -cfg.nu * d2 - cfg.nu * d4;
                (1.0 + 0.5 * cfg.dt * lam) / (1.0 - 0.5 * cfg.dt * lam)
            })
            .collect();
        let zero = Complex64::new(0.0, 0.0);
        Ok(Self {
            n,
            dt: cfg.dt,
            dx,
            cn,
            fft,
            ifft,
            scratch: vec![zero; scratch_len],
            buf: vec![zero; n],
            flux: vec![0.0; n],
            u: vec![0.0; n],
            steps_taken: 0,
        })
    }

    /// Conservative flux-limited Lax–Wendroff update for `(u^2/2)_x`.
    /// `flux[i]` lives on the face between cells `i` and `i+1`.
    pub fn advect(&mut self) {
        let n = self.n;
        let nu = self.dt / self.dx;
        let u = &self.u;
        for i in 0..n {
            let ip = (i + 1) % n;
            let (ul, ur) = (u[i], u[ip]);
            let du = ur - ul;
            let a = 0.5 * (ul + ur);
            let (fl, fr) = (0.5 * ul * ul, 0.5 * ur * ur);
            let upwind = if a >= 0.0 {
                u[i] - u[(i + n - 1) % n]
            } else {
                u[(i + 2) % n] - u[ip]
            };
            let phi = if du != 0.0 { van_leer(upwind / du) } else { 0.0 };
            self.flux[i] = 0.5 * (fl + fr) - 0.5 * a.abs() * du + 0.5 * a.abs() * (1.0 - a.abs() * nu) * phi * du;
        }
        for i in 0..n {
            self.u[i] -= nu * (self.flux[i] - self.flux[(i + n - 1) % n]);
        }
    }

    /// Crank–Nicolson step of `-nu (D2 + D4) u`, diagonal in Fourier space.
    pub fn diffuse(&mut self) {
        for (b, v) in self.buf.iter_mut().zip(&self.u) {
            *b = Complex64::new(*v, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (b, g) in self.buf.iter_mut().zip(&self.cn) {
            *b *= *g;
        }
        self.ifft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / self.n as f64;
        for (v, b) in self.u.iter_mut().zip(&self.buf) {
            *v = b.re * scale;
        }
    }
}

impl Solver for FiniteVolumeSolver {
    fn set_state(&mut self, u: &[f64]) -> Result<()> {
        check_dim("finite-volume state", self.n, u.len())?;
        self.u.copy_from_slice(u);
        self.steps_taken = 0;
        Ok(())
    }

    fn step(&mut self) -> Result<()> {
        self.advect();
        self.diffuse();
        self.steps_taken += 1;
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "finite-volume solver",
                step: self.steps_taken,
            });
        }
        Ok(())
    }

    fn state(&self) -> Vec<f64> {
        self.u.clone()
    }
}

pub fn make_solver(cfg: &KsConfig, fidelity: Fidelity) -> Result<Box<dyn Solver + Send>> {
    Ok(match fidelity {
        Fidelity::Hf => Box::new(SpectralSolver::new(cfg)?),
        Fidelity::Lf => Box::new(FiniteVolumeSolver::new(cfg)?),
    })
}

/// One trajectory: spin up for `ramp_time`, then record a snapshot every
/// `sample_interval`.
pub fn simulate_trajectory(cfg: &KsConfig, fidelity: Fidelity, index: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = stage_rng(cfg.seed, fidelity.tag(), index);
    let u0 = sample_initial_condition(cfg, &mut rng);
    let mut solver = make_solver(cfg, fidelity)?;
    solver.set_state(&u0.values)?;
    for _ in 0..cfg.steps(cfg.ramp_time) {
        solver.step()?;
    }
    let interval = cfg.steps(cfg.sample_interval).max(1);
    let mut out = Vec::with_capacity(cfg.n_snapshots_per_traj);
    for _ in 0..cfg.n_snapshots_per_traj {
        for _ in 0..interval {
            solver.step()?;
        }
        out.push(solver.state());
    }
    Ok(out)
}

/// Trajectory-major snapshot set. Trajectories run in parallel; the result
/// does not depend on the thread count.
pub fn simulate(cfg: &KsConfig, fidelity: Fidelity) -> Result<SnapshotDataset> {
    cfg.validate()?;
    let trajs: Vec<Vec<Vec<f64>>> = (0..cfg.n_trajectories as u64)
        .into_par_iter()
        .map(|i| simulate_trajectory(cfg, fidelity, i))
        .collect::<Result<_>>()?;
    let samples = Samples::from_rows(cfg.n_grid, trajs.iter().flatten())?;
    Ok(SnapshotDataset {
        samples,
        meta: DatasetMeta::new(fidelity.tag(), cfg.length, cfg.seed, serde_json::to_value(cfg)?),
    })
}

/// Row-selection operator `C'`: keeps `x[offset + i * stride]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub d: usize,
    pub d_prime: usize,
    pub stride: usize,
    pub offset: usize,
}

impl SelectionMask {
    pub fn new(d: usize, d_prime: usize, offset: usize) -> Result<Self> {
        if d_prime == 0 || d % d_prime != 0 {
            return Err(invalid(format!("coarse size {d_prime} must divide fine size {d}")));
        }
        let stride = d / d_prime;
        if offset >= stride {
            return Err(invalid(format!("offset {offset} must be below stride {stride}")));
        }
        Ok(Self { d, d_prime, stride, offset })
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.d_prime).map(move |i| self.offset + i * self.stride)
    }

    /// Indicator of selected coordinates (the diagonal of `V V^T`).
    pub fn indicator(&self) -> Vec<bool> {
        let mut m = vec![false; self.d];
        self.indices().for_each(|i| m[i] = true);
        m
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("selection input", self.d, x.len())?;
        Ok(self.indices().map(|i| x[i]).collect())
    }

    /// Pseudo-inverse `C'^T y'`: values at selected indices, zeros elsewhere.
    pub fn pinv(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("selection pseudo-inverse input", self.d_prime, y.len())?;
        let mut x = vec![0.0; self.d];
        for (i, v) in self.indices().zip(y) {
            x[i] = *v;
        }
        Ok(x)
    }

    pub fn fraction(&self) -> f64 {
        self.d_prime as f64 / self.d as f64
    }
}

pub fn apply_selection(x: &GridField, mask: &SelectionMask) -> Result<GridField> {
    Ok(GridField {
        values: mask.apply(&x.values)?,
        length: x.length,
    })
}

/// Stride-subsamples a low-fidelity field to `target` points.
pub fn lf_to_y(u: &GridField, target: usize) -> Result<GridField> {
    let n = u.len();
    if target == 0 || n % target != 0 {
        return Err(invalid(format!("cannot subsample length {n} to {target}")));
    }
    let stride = n / target;
    Ok(GridField {
        values: u.values.iter().step_by(stride).copied().collect(),
        length: u.length,
    })
}

pub fn select_dataset(ds: &SnapshotDataset, mask: &SelectionMask) -> Result<Samples> {
    ds.samples.map_rows(mask.d_prime, |r| mask.apply(r))
}

pub fn lf_dataset_to_y(ds: &SnapshotDataset, target: usize) -> Result<Samples> {
    let length = ds.meta.length;
    ds.samples.map_rows(target, |r| {
        lf_to_y(&GridField { values: r.to_vec(), length }, target).map(|g| g.values)
    })
}
