//! Run configuration: one JSON document, versioned, unknown keys rejected.

use std::path::Path;

use dsk_core::diffusion::{SamplerConfig, VpSchedule};
use dsk_core::metrics::MetricsConfig;
use dsk_core::net::UNetConfig;
use dsk_core::ot::SinkhornConfig;
use dsk_core::pde::{KsConfig, SelectionMask};
use dsk_core::rng::split_seed;
use dsk_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Solver and dataset settings for one fidelity. Seeds come from the
/// master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeBlock {
    pub length: f64,
    pub nu: f64,
    pub n_grid: usize,
    pub dt: f64,
    pub n_modes: usize,
    pub ramp_time: f64,
    pub sample_interval: f64,
    pub n_snapshots_per_traj: usize,
    pub n_trajectories: usize,
}

impl PdeBlock {
    fn from_ks(k: KsConfig) -> Self {
        Self {
            length: k.length,
            nu: k.nu,
            n_grid: k.n_grid,
            dt: k.dt,
            n_modes: k.n_modes,
            ramp_time: k.ramp_time,
            sample_interval: k.sample_interval,
            n_snapshots_per_traj: k.n_snapshots_per_traj,
            n_trajectories: k.n_trajectories,
        }
    }

    pub fn ks(&self, seed: u64) -> KsConfig {
        KsConfig {
            length: self.length,
            nu: self.nu,
            n_grid: self.n_grid,
            dt: self.dt,
            n_modes: self.n_modes,
            ramp_time: self.ramp_time,
            sample_interval: self.sample_interval,
            n_snapshots_per_traj: self.n_snapshots_per_traj,
            n_trajectories: self.n_trajectories,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    /// Points kept by the coarsening mask `C′` (and by the LF subsampling).
    pub coarse_points: usize,
    /// Trailing trajectories of each fidelity kept out of fitting and
    /// training; HF ones are the evaluation reference, LF ones supply the
    /// conditions.
    pub holdout_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtBlock {
    pub epsilon: f64,
    /// Samples drawn from each side for the fit.
    pub samples: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl OtBlock {
    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub batch: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub val_size: usize,
    pub val_every: usize,
}

impl TrainBlock {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            steps: self.steps,
            warmup_steps: self.warmup_steps,
            lr_peak: self.lr_peak,
            lr_final: self.lr_final,
            clip_norm: self.clip_norm,
            ema_decay: self.ema_decay,
            val_size: self.val_size,
            val_every: self.val_every,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    pub steps: usize,
    pub alpha_tilde: f64,
    pub conditions: usize,
    pub samples_per_condition: usize,
    pub terminal_denoise: bool,
    pub batch: usize,
}

impl SamplingBlock {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            terminal_denoise: self.terminal_denoise,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineBlock {
    pub quantiles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub hf: PdeBlock,
    pub lf: PdeBlock,
    pub data: DataBlock,
    pub ot: OtBlock,
    pub model: UNetConfig,
    pub train: TrainBlock,
    pub sampling: SamplingBlock,
    pub metrics: MetricsConfig,
    pub baseline: BaselineBlock,
}

impl RunConfig {
    /// Desk-scale KS defaults.
    pub fn desk() -> Self {
        let t = TrainConfig::default();
        Self {
            schema_version: SCHEMA_VERSION,
            name: "desk".into(),
            seed: 0,
            hf: PdeBlock::from_ks(KsConfig::hf()),
            lf: PdeBlock::from_ks(KsConfig::lf()),
            data: DataBlock {
                coarse_points: 24,
                holdout_trajectories: 8,
            },
            ot: OtBlock {
                epsilon: 1e-3,
                samples: 4000,
                max_iters: 5000,
                tol: 1e-6,
            },
            model: UNetConfig::default(),
            train: TrainBlock {
                batch: t.batch,
                steps: t.steps,
                warmup_steps: t.warmup_steps,
                lr_peak: t.lr_peak,
                lr_final: t.lr_final,
                clip_norm: t.clip_norm,
                ema_decay: t.ema_decay,
                val_size: t.val_size,
                val_every: t.val_every,
            },
            sampling: SamplingBlock {
                steps: 256,
                alpha_tilde: 1.0,
                conditions: 128,
                samples_per_condition: 8,
                terminal_denoise: true,
                batch: 64,
            },
            metrics: MetricsConfig::default(),
            baseline: BaselineBlock { quantiles: 1000 },
        }
    }

    /// A small end-to-end run: 8 trajectories per fidelity, 500 training
    /// steps, 32 conditions with 4 samples each (the KDE metric needs at
    /// least 30 rows per method).
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.name = "smoke".into();
        for p in [&mut c.hf, &mut c.lf] {
            p.n_trajectories = 8;
            p.n_snapshots_per_traj = 40;
        }
        c.data.holdout_trajectories = 2;
        c.ot.samples = 200;
        c.ot.max_iters = 500;
        c.train.steps = 500;
        c.train.warmup_steps = 50;
        c.train.val_size = 64;
        c.train.val_every = 100;
        c.sampling.steps = 64;
        c.sampling.conditions = 32;
        c.sampling.samples_per_condition = 4;
        c.sampling.batch = 32;
        c.baseline.quantiles = 100;
        c
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("at `{field}`: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        for (field, block) in [("hf", &self.hf), ("lf", &self.lf)] {
            if let Err(e) = block.ks(0).validate() {
                return bad(field, e.to_string());
            }
            if block.n_trajectories <= self.data.holdout_trajectories || block.n_snapshots_per_traj == 0 {
                return bad(field, "needs snapshots and more trajectories than the holdout".into());
            }
        }
        if self.hf.n_grid != self.model.length {
            return bad("model.length", format!("must equal hf.n_grid = {}", self.hf.n_grid));
        }
        if let Err(e) = self.mask() {
            return bad("data.coarse_points", e.to_string());
        }
        if self.lf.n_grid % self.data.coarse_points != 0 {
            return bad("data.coarse_points", format!("must divide lf.n_grid = {}", self.lf.n_grid));
        }
        if self.data.holdout_trajectories == 0 {
            return bad("data.holdout_trajectories", "must be positive".into());
        }
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        if let Err(e) = self.train.train_config(0).validate() {
            return bad("train", e.to_string());
        }
        if !(self.ot.epsilon > 0.0) || self.ot.samples < 2 || self.ot.max_iters == 0 || !(self.ot.tol > 0.0) {
            return bad("ot", "epsilon and tol must be positive, samples >= 2, max_iters >= 1".into());
        }
        let s = &self.sampling;
        if s.steps == 0 || s.conditions == 0 || s.samples_per_condition == 0 || s.batch == 0 {
            return bad("sampling", "steps, conditions, samples_per_condition and batch must be positive".into());
        }
        if !(s.alpha_tilde >= 0.0) {
            return bad("sampling.alpha_tilde", "must be non-negative".into());
        }
        if self.baseline.quantiles == 0 {
            return bad("baseline.quantiles", "must be positive".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        split_seed(self.seed, stage, 0)
    }

    pub fn hf_ks(&self) -> KsConfig {
        self.hf.ks(self.stage_seed("gen-hf"))
    }

    pub fn lf_ks(&self) -> KsConfig {
        self.lf.ks(self.stage_seed("gen-lf"))
    }

    pub fn mask(&self) -> dsk_core::Result<SelectionMask> {
        SelectionMask::new(self.hf.n_grid, self.data.coarse_points, 0)
    }

    pub fn schedule(&self) -> VpSchedule {
        VpSchedule::default()
    }
}
