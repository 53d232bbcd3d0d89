//! Comparison baselines: periodic cubic-convolution upsampling and BCSD
//! (cubic upsampling followed by per-pixel quantile matching).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::Samples;

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

pub const DEFAULT_QUANTILES: usize = 1000;

fn keys(x: f64) -> f64 {
    let (a, x) = (KEYS_A, x.abs());
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Upsamples a periodic field by `factor`; coarse node `j` lands on fine
/// index `j * factor`.
pub fn cubic_upsample(y: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor < 2 {
        return Err(invalid(format!("upsampling factor must be at least 2, got {factor}")));
    }
    let n = y.len();
    if n == 0 {
        return Err(invalid("cannot upsample an empty field"));
    }
    let weights: Vec<[f64; 4]> = (0..factor)
        .map(|r| {
            let t = r as f64 / factor as f64;
            [keys(t + 1.0), keys(t), keys(1.0 - t), keys(2.0 - t)]
        })
        .collect();
    let mut out = Vec::with_capacity(n * factor);
    for j in 0..n {
        let taps = [y[(j + n - 1) % n], y[j], y[(j + 1) % n], y[(j + 2) % n]];
        for w in &weights {
            out.push(w.iter().zip(&taps).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

pub fn cubic_upsample_samples(y: &Samples, factor: usize) -> Result<Samples> {
    y.map_rows(y.dim() * factor, |r| cubic_upsample(r, factor))
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-pixel quantile boundaries of a source and a reference
/// distribution: `q + 1` non-decreasing edges per pixel delimiting `q`
/// equal-probability segments.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    pub q: usize,
    pub d: usize,
    /// `d x (q + 1)`, row-major.
    pub source: Vec<f64>,
    pub reference: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"DQTB";

impl QuantileTable {
    pub fn fit(source: &Samples, reference: &Samples, q: usize) -> Result<Self> {
        check_dim("quantile table", source.dim(), reference.dim())?;
        if q == 0 {
            return Err(invalid("number of quantiles must be positive"));
        }
        if source.len() < 2 || reference.len() < 2 {
            return Err(invalid("quantile fitting needs at least two samples per set"));
        }
        let edges = |s: &Samples| {
            let mut out = Vec::with_capacity(s.dim() * (q + 1));
            for m in 0..s.dim() {
                let mut col = s.column(m);
                col.sort_by(f64::total_cmp);
                out.extend((0..=q).map(|i| quantile(&col, i as f64 / q as f64)));
            }
            out
        };
        Ok(Self {
            q,
            d: source.dim(),
            source: edges(source),
            reference: edges(reference),
        })
    }

    fn source_edges(&self, m: usize) -> &[f64] {
        &self.source[m * (self.q + 1)..(m + 1) * (self.q + 1)]
    }

    fn reference_edges(&self, m: usize) -> &[f64] {
        &self.reference[m * (self.q + 1)..(m + 1) * (self.q + 1)]
    }

    /// Maps `v` at pixel `m` to the midpoint of the matching reference
    /// segment; the flag reports a value outside the fitted source range.
    pub fn match_value(&self, m: usize, v: f64) -> (f64, bool) {
        let src = self.source_edges(m);
        let clamped = v < src[0] || v > src[self.q];
        let s = src.partition_point(|e| *e <= v).saturating_sub(1).min(self.q - 1);
        let r = self.reference_edges(m);
        (0.5 * (r[s] + r[s + 1]), clamped)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.q as u32).to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        for v in self.source.iter().chain(&self.reference) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format("not a quantile table (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let q = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        if q == 0 || d == 0 {
            return Err(CoreError::Format(format!("degenerate quantile table q={q} d={d}")));
        }
        let count = d * (q + 1);
        let mut read_block = || -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        };
        let source = read_block()?;
        let reference = read_block()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CoreError::Format(format!("{} trailing bytes after quantile table", rest.len())));
        }
        let table = Self { q, d, source, reference };
        for m in 0..d {
            for e in [table.source_edges(m), table.reference_edges(m)] {
                if e.windows(2).any(|w| !(w[0] <= w[1])) {
                    return Err(CoreError::Format(format!("quantile edges of pixel {m} are not sorted")));
                }
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Clone, Debug)]
pub struct Matched {
    pub samples: Samples,
    /// Values that fell outside the fitted source range.
    pub clamped: usize,
}

/// Pixel-wise quantile matching of high-resolution samples.
pub fn quantile_match(x: &Samples, table: &QuantileTable) -> Result<Matched> {
    check_dim("quantile table", table.d, x.dim())?;
    let mut clamped = 0;
    let samples = x.map_rows(x.dim(), |r| {
        Ok(r.iter()
            .enumerate()
            .map(|(m, v)| {
                let (out, c) = table.match_value(m, *v);
                clamped += c as usize;
                out
            })
            .collect())
    })?;
    if clamped > 0 {
        log::warn!("BCSD: {clamped} values outside the fitted range were clamped");
    }
    Ok(Matched { samples, clamped })
}

/// Cubic upsampling of `y` by `factor`, then quantile matching.
pub fn bcsd(y: &Samples, table: &QuantileTable, factor: usize) -> Result<Matched> {
    quantile_match(&cubic_upsample_samples(y, factor)?, table)
}
