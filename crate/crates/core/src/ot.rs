//! Entropic optimal transport between two empirical measures with uniform
//! weights and cost `½‖y − y'‖²`, solved by log-domain Sinkhorn.
//!
//! The plan is `γ_ij = exp((f_i + g_j − C_ij)/ε) / (n m)`. The debiasing
//! map is its barycentric projection `T(y) = E_γ[Y' | Y = y]`, which extends
//! to points outside the training set through the target potential `g`.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{read_f64, read_f64s, read_u32, write_f64s, SnapshotDataset};
use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::Samples;

pub const MAGIC: &[u8; 4] = b"DOTM";

/// Cost matrices with at most this many entries are stored densely.
pub const DENSE_LIMIT: usize = 25_000_000;

/// Terms this far below the row maximum (in units of ε) are dropped from
/// log-sum-exp; their total weight is below `m e^{-50}`.
const LSE_CUTOFF: f64 = -50.0;

#[derive(Clone, Copy, Debug)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L1 marginal violation falls below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iters: 5000,
            tol: 1e-6,
        }
    }
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Cost scaled by `1/ε`.
enum Cost<'a> {
    Dense { c: Vec<f64>, ct: Vec<f64>, n: usize, m: usize },
    Lazy { source: &'a Samples, target: &'a Samples, inv_eps: f64 },
}

impl<'a> Cost<'a> {
    fn new(source: &'a Samples, target: &'a Samples, eps: f64) -> Result<Self> {
        let (n, m) = (source.len(), target.len());
        let inv_eps = 1.0 / eps;
        if n * m > DENSE_LIMIT {
            return Ok(Cost::Lazy { source, target, inv_eps });
        }
        let c: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| target.rows().map(move |t| half_sq_dist(source.row(i), t) * inv_eps))
            .collect();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite cost entry"));
        }
        let mut ct = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                ct[j * n + i] = c[i * m + j];
            }
        }
        Ok(Cost::Dense { c, ct, n, m })
    }

    /// Calls `f` with row `i` of `C/ε`, or of `C^T/ε` when `transposed`.
    fn with_line<R>(&self, i: usize, transposed: bool, buf: &mut Vec<f64>, f: impl FnOnce(&[f64]) -> R) -> R {
        match self {
            Cost::Dense { c, ct, n, m } => {
                if transposed {
                    f(&ct[i * n..(i + 1) * n])
                } else {
                    f(&c[i * m..(i + 1) * m])
                }
            }
            Cost::Lazy { source, target, inv_eps } => {
                let (fixed, others) = if transposed { (target.row(i), *source) } else { (source.row(i), *target) };
                buf.clear();
                buf.extend(others.rows().map(|o| half_sq_dist(fixed, o) * inv_eps));
                f(buf)
            }
        }
    }
}

/// `−log((1/len) Σ_j exp(pot_j − k_j))` for potentials and costs in units of ε.
fn soft_min(pot: &[f64], k: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (p, c) in pot.iter().zip(k) {
        mx = mx.max(p - c);
    }
    let mut s = 0.0;
    for (p, c) in pot.iter().zip(k) {
        let x = p - c - mx;
        if x > LSE_CUTOFF {
            s += x.exp();
        }
    }
    -(mx + (s / pot.len() as f64).ln())
}

/// Soft-min update of `current` using `current` itself as the log-sum-exp
/// shift. Returns the new value and the plan's line sum times the line
/// count (`exp(current − new)`), falling back to the max-shifted form when
/// the shift would lose accuracy.
fn soft_min_update(pot: &[f64], k: &[f64], current: f64) -> (f64, f64) {
    let len = pot.len() as f64;
    let mut s = 0.0;
    for (p, c) in pot.iter().zip(k) {
        let x = p - c + current;
        if x > LSE_CUTOFF {
            s += x.exp();
        }
    }
    // With s >= 1 the dropped terms are below len·e^{-50} relative.
    if s.is_finite() && s >= 1.0 {
        (current - (s / len).ln(), s / len)
    } else {
        let new = soft_min(pot, k);
        (new, (current - new).exp())
    }
}

#[derive(Clone, Debug)]
pub struct EntropicTransport {
    pub epsilon: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub source: Samples,
    pub target: Samples,
    pub iterations_run: usize,
    pub marginal_error: f64,
    /// Marginal violation observed at each iteration.
    pub history: Vec<f64>,
}

/// Gibbs kernel `exp(ū_i + v̄_j − C_ij/ε)` cached at reference potentials
/// `(ū, v̄)`. While the current potentials stay within `ABSORB_LOG` of the
/// reference, a Sinkhorn half-step is a matrix-vector product with the
/// scalings `e^{u − ū}`, `e^{v − v̄}`; otherwise the step is done in the
/// log domain and the kernel is rebuilt there.
struct Kernel {
    k: Vec<f64>,
    ubar: Vec<f64>,
    vbar: Vec<f64>,
}

const ABSORB_LOG: f64 = 50.0;

/// Kernel entries below `e^{-700}` are flushed to zero to keep the
/// products out of the subnormal range.
const KERNEL_FLOOR: f64 = -700.0;

/// Rows per partial sum in the column product; fixed so the reduction
/// order does not depend on the thread count.
const COL_CHUNK: usize = 64;

impl Kernel {
    fn build(c: &[f64], ubar: Vec<f64>, vbar: Vec<f64>) -> Self {
        let m = vbar.len();
        let k = c
            .par_chunks(m)
            .zip(ubar.par_iter())
            .flat_map_iter(|(row, ui)| {
                row.iter().zip(&vbar).map(move |(cij, vj)| {
                    let x = ui + vj - cij;
                    if x > KERNEL_FLOOR {
                        x.exp()
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { k, ubar, vbar }
    }

    /// New row potentials, or `None` when the step leaves the absorbed range.
    fn row_step(&self, v: &[f64]) -> Option<Vec<f64>> {
        let m = self.vbar.len();
        let b: Vec<f64> = v.iter().zip(&self.vbar).map(|(x, r)| (x - r).exp()).collect();
        let out: Vec<f64> = self
            .k
            .par_chunks(m)
            .zip(self.ubar.par_iter())
            .map(|(row, ub)| {
                let r: f64 = row.iter().zip(&b).map(|(k, b)| k * b).sum();
                ub + (m as f64 / r).ln()
            })
            .collect();
        in_range(&out, &self.ubar).then_some(out)
    }

    fn col_step(&self, u: &[f64]) -> Option<Vec<f64>> {
        let (n, m) = (self.ubar.len(), self.vbar.len());
        let a: Vec<f64> = u.iter().zip(&self.ubar).map(|(x, r)| (x - r).exp()).collect();
        let partials: Vec<Vec<f64>> = self
            .k
            .par_chunks(COL_CHUNK * m)
            .zip(a.par_chunks(COL_CHUNK))
            .map(|(rows, a)| {
                let mut acc = vec![0.0; m];
                for (row, ai) in rows.chunks(m).zip(a) {
                    for (s, k) in acc.iter_mut().zip(row) {
                        *s += ai * k;
                    }
                }
                acc
            })
            .collect();
        let mut sums = vec![0.0; m];
        for p in &partials {
            for (s, x) in sums.iter_mut().zip(p) {
                *s += x;
            }
        }
        let out: Vec<f64> = sums.iter().zip(&self.vbar).map(|(s, vb)| vb + (n as f64 / s).ln()).collect();
        in_range(&out, &self.vbar).then_some(out)
    }
}

fn in_range(pot: &[f64], reference: &[f64]) -> bool {
    pot.iter().zip(reference).all(|(p, r)| (p - r).abs() <= ABSORB_LOG)
}

/// Alternating Sinkhorn in potentials `u = f/ε`, `v = g/ε`. Each iteration
/// updates `u` then `v`; after a `v`-update the column marginals are exact,
/// so the row-marginal L1 violation measured during the next `u`-update is
/// the full violation. Dense costs use the cached kernel with absorption,
/// lazy costs the log-domain update throughout.
pub fn sinkhorn_fit(source: &Samples, target: &Samples, cfg: &SinkhornConfig) -> Result<EntropicTransport> {
    if !(cfg.epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    check_dim("sinkhorn target", source.dim(), target.dim())?;
    if source.is_empty() || target.is_empty() {
        return Err(invalid("sinkhorn needs nonempty sample sets"));
    }
    if source.data().iter().chain(target.data()).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite cost entry"));
    }
    let (n, m) = (source.len(), target.len());
    let eps = cfg.epsilon;
    let cost = Cost::new(source, target, eps)?;
    let dense = match &cost {
        Cost::Dense { c, .. } => Some(c.as_slice()),
        Cost::Lazy { .. } => None,
    };
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut kernel: Option<Kernel> = None;
    let mut history = Vec::new();
    let mut err: f64;
    let mut iters = 0;
    let mut rebuilds = 0;

    let log_update = |pot: &[f64], cur: &[f64], transposed: bool| -> Vec<f64> {
        (0..cur.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, i| cost.with_line(i, transposed, buf, |k| soft_min_update(pot, k, cur[i]).0))
            .collect()
    };

    loop {
        let u_new = match kernel.as_ref().and_then(|k| k.row_step(&v)) {
            Some(x) => x,
            None => {
                let x = log_update(&v, &u, false);
                if let Some(c) = dense {
                    kernel = Some(Kernel::build(c, x.clone(), v.clone()));
                    rebuilds += 1;
                }
                x
            }
        };
        if iters > 0 {
            // exp(u_old − u_new) is the row sum of the current plan times n
            err = u.iter().zip(&u_new).map(|(a, b)| ((a - b).exp() - 1.0).abs()).sum::<f64>() / n as f64;
            history.push(err);
            if !err.is_finite() {
                return Err(CoreError::NonFinite { what: "sinkhorn", step: iters });
            }
            if err < cfg.tol || iters == cfg.max_iters {
                break;
            }
        }
        u = u_new;
        v = match kernel.as_ref().and_then(|k| k.col_step(&u)) {
            Some(x) => x,
            None => {
                let x = log_update(&u, &v, true);
                if let Some(c) = dense {
                    kernel = Some(Kernel::build(c, u.clone(), x.clone()));
                    rebuilds += 1;
                }
                x
            }
        };
        iters += 1;
    }
    log::debug!("sinkhorn: {rebuilds} kernel rebuilds");
    log::info!("sinkhorn: {iters} iterations, marginal L1 violation {err:.3e}");
    Ok(EntropicTransport {
        epsilon: eps,
        f: u.iter().map(|x| x * eps).collect(),
        g: v.iter().map(|x| x * eps).collect(),
        source: source.clone(),
        target: target.clone(),
        iterations_run: iters,
        marginal_error: err,
        history,
    })
}

impl EntropicTransport {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn plan_entry(&self, i: usize, j: usize) -> f64 {
        let (n, m) = (self.f.len(), self.g.len());
        let c = half_sq_dist(self.source.row(i), self.target.row(j));
        ((self.f[i] + self.g[j] - c) / self.epsilon).exp() / (n * m) as f64
    }

    /// Dense `n x m` plan, row-major.
    pub fn plan(&self) -> Vec<f64> {
        let (n, m) = (self.f.len(), self.g.len());
        (0..n)
            .into_par_iter()
            .flat_map_iter(|i| (0..m).map(move |j| self.plan_entry(i, j)))
            .collect()
    }

    /// (row sums, column sums) of the plan.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.f.len(), self.g.len());
        let plan = self.plan();
        let rows = plan.chunks(m).map(|r| r.iter().sum()).collect();
        let mut cols = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                cols[j] += plan[i * m + j];
            }
        }
        (rows, cols)
    }

    /// Barycentric projection of `y` onto the target samples.
    pub fn map(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("barycentric map input", self.dim(), y.len())?;
        let logits: Vec<f64> = self
            .g
            .iter()
            .zip(self.target.rows())
            .map(|(g, t)| (g - half_sq_dist(y, t)) / self.epsilon)
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; self.dim()];
        let mut total = 0.0;
        for (l, t) in logits.iter().zip(self.target.rows()) {
            let x = l - mx;
            if x > LSE_CUTOFF {
                let w = x.exp();
                total += w;
                for (o, v) in out.iter_mut().zip(t) {
                    *o += w * v;
                }
            }
        }
        out.iter_mut().for_each(|o| *o /= total);
        Ok(out)
    }

    pub fn map_samples(&self, ys: &Samples) -> Result<Samples> {
        check_dim("barycentric map input", self.dim(), ys.dim())?;
        let rows: Vec<Vec<f64>> = (0..ys.len())
            .into_par_iter()
            .map(|i| self.map(ys.row(i)))
            .collect::<Result<_>>()?;
        Samples::from_rows(self.dim(), rows)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let u32_of = |v: usize| u32::try_from(v).map_err(|_| CoreError::Format("size exceeds u32".into()));
        w.write_all(MAGIC)?;
        w.write_all(&self.epsilon.to_le_bytes())?;
        w.write_all(&u32_of(self.f.len())?.to_le_bytes())?;
        w.write_all(&u32_of(self.g.len())?.to_le_bytes())?;
        w.write_all(&u32_of(self.dim())?.to_le_bytes())?;
        write_f64s(&mut w, &self.f)?;
        write_f64s(&mut w, &self.g)?;
        write_f64s(&mut w, self.source.data())?;
        write_f64s(&mut w, self.target.data())?;
        Ok(())
    }

    /// Reads a fitted map. The iteration count is not stored and reads back
    /// as zero; the marginal violation is recomputed from the potentials.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format(format!("not a transport map file (magic {magic:?})")));
        }
        let epsilon = read_f64(&mut r)?;
        let n = read_u32(&mut r)? as usize;
        let m = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        if d == 0 || !(epsilon > 0.0) {
            return Err(CoreError::Format("invalid transport map header".into()));
        }
        let f = read_f64s(&mut r, n)?;
        let g = read_f64s(&mut r, m)?;
        let source = Samples::new(d, read_f64s(&mut r, n * d)?)?;
        let target = Samples::new(d, read_f64s(&mut r, m * d)?)?;
        let mut t = Self {
            epsilon,
            f,
            g,
            source,
            target,
            iterations_run: 0,
            marginal_error: f64::NAN,
            history: Vec::new(),
        };
        t.marginal_error = t.row_violation();
        Ok(t)
    }

    /// L1 distance of the plan's row sums from `1/n`.
    pub fn row_violation(&self) -> f64 {
        let n = self.f.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let inv = 1.0 / self.epsilon;
                let k: Vec<f64> = self.target.rows().map(|t| half_sq_dist(self.source.row(i), t) * inv).collect();
                let pot: Vec<f64> = self.g.iter().map(|g| g * inv).collect();
                (soft_min_update(&pot, &k, self.f[i] * inv).1 - 1.0).abs()
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Applies the fitted map to every snapshot.
pub fn debias_dataset(t: &EntropicTransport, ds: &SnapshotDataset) -> Result<SnapshotDataset> {
    let samples = t.map_samples(&ds.samples)?;
    let mut meta = ds.meta.clone();
    meta.provenance = Some(serde_json::json!({
        "transform": "entropic-ot-barycentric",
        "epsilon": t.epsilon,
        "ot_source_count": t.source.len(),
        "ot_target_count": t.target.len(),
        "input": ds.meta.provenance,
    }));
    Ok(SnapshotDataset { samples, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_cost_lines_match_dense() {
        let s = Samples::new(2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        let t = Samples::new(2, vec![1.0, 1.0, -3.0, 2.0]).unwrap();
        let dense = Cost::new(&s, &t, 0.5).unwrap();
        let lazy = Cost::Lazy { source: &s, target: &t, inv_eps: 2.0 };
        let mut buf = Vec::new();
        for (transposed, count) in [(false, 3), (true, 2)] {
            for i in 0..count {
                let a = dense.with_line(i, transposed, &mut buf, |c| c.to_vec());
                let b = lazy.with_line(i, transposed, &mut buf, |c| c.to_vec());
                assert_eq!(a, b);
            }
        }
    }
}
