//! On-disk layout of a run and the `.meta.json` sidecar written next to
//! every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context};

/// Methods compared in the report, in table order.
pub const METHODS: [Method; 6] = [
    Method::Lflr,
    Method::Ot,
    Method::OtCubic,
    Method::Bcsd,
    Method::RawCdfn,
    Method::OtCdfn,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Lflr,
    Ot,
    OtCubic,
    Bcsd,
    RawCdfn,
    OtCdfn,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Lflr => "LFLR",
            Method::Ot => "OT",
            Method::OtCubic => "OT+Cubic",
            Method::Bcsd => "BCSD",
            Method::RawCdfn => "Raw+cDfn",
            Method::OtCdfn => "OT+cDfn",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Method::Lflr => "lflr",
            Method::Ot => "ot",
            Method::OtCubic => "ot_cubic",
            Method::Bcsd => "bcsd",
            Method::RawCdfn => "raw_cdfn",
            Method::OtCdfn => "ot_cdfn",
        }
    }

    /// Stage that writes this method's samples.
    pub fn stage(self) -> &'static str {
        match self {
            Method::OtCubic | Method::Bcsd => "baseline",
            _ => "sample",
        }
    }

    /// Outputs live on the coarse grid.
    pub fn is_low_res(self) -> bool {
        matches!(self, Method::Lflr | Method::Ot)
    }

    /// Conditioned on debiased rather than raw inputs.
    pub fn is_debiased(self) -> bool {
        matches!(self, Method::Ot | Method::OtCubic | Method::OtCdfn)
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, Method::RawCdfn | Method::OtCdfn)
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn hf(&self) -> PathBuf {
        self.at("data/hf.dsnp")
    }
    pub fn lf(&self) -> PathBuf {
        self.at("data/lf.dsnp")
    }
    /// `C′` applied to every HF snapshot.
    pub fn hflr(&self) -> PathBuf {
        self.at("data/hflr.dsnp")
    }
    /// LF snapshots subsampled to the coarse grid.
    pub fn lflr(&self) -> PathBuf {
        self.at("data/lflr.dsnp")
    }
    pub fn transport(&self) -> PathBuf {
        self.at("ot/transport.dotm")
    }
    pub fn model(&self) -> PathBuf {
        self.at("model/denoiser.dkpt")
    }
    pub fn train_report(&self) -> PathBuf {
        self.at("model/train_report.json")
    }
    pub fn quantiles(&self) -> PathBuf {
        self.at("baseline/quantiles.dqtb")
    }
    pub fn samples(&self, m: Method) -> PathBuf {
        self.at(&format!("samples/{}.dsnp", m.file_stem()))
    }
    pub fn metrics(&self, m: Method) -> PathBuf {
        self.at(&format!("metrics/{}.json", m.file_stem()))
    }
    pub fn energy_csv(&self, m: Method) -> PathBuf {
        self.at(&format!("metrics/{}_energy.csv", m.file_stem()))
    }
    pub fn report_json(&self) -> PathBuf {
        self.at("report.json")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.at("report.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: String,
    pub config_hash: String,
    pub producer: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn write_sidecar(path: &Path, stage: &str, config_hash: &str) -> Result<(), CliError> {
    let meta = Sidecar {
        stage: stage.into(),
        config_hash: config_hash.into(),
        producer: dsk_core::dataset::PRODUCER.into(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    let p = sidecar_path(path);
    std::fs::write(&p, text).context(|| format!("writing {}", p.display()))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar, CliError> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("malformed sidecar {}: {e}", p.display())))
}

/// Fails with the producing stage's name when `path` does not exist.
pub fn require(path: &Path, stage: &'static str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

/// Warns when an input was produced under a different configuration.
pub fn check_input(path: &Path, config_hash: &str) {
    match read_sidecar(path) {
        Ok(meta) if meta.config_hash != config_hash => log::warn!(
            "{} was produced by a different config ({}), current is {}",
            path.display(),
            &meta.config_hash[..12.min(meta.config_hash.len())],
            &config_hash[..12]
        ),
        Ok(_) => {}
        Err(e) => log::warn!("{e}"),
    }
}
