//! Sample containers.

use crate::error::{check_dim, invalid, Result};

/// A real field on a uniform periodic grid over `[0, length)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub values: Vec<f64>,
    pub length: f64,
}

impl GridField {
    pub fn new(values: Vec<f64>, length: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid field contains non-finite values"));
        }
        Ok(Self { values, length })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.length / self.values.len() as f64
    }

    /// Circular shift: `out[i] = values[i - shift]`.
    pub fn rolled(&self, shift: isize) -> Self {
        Self {
            values: roll(&self.values, shift),
            length: self.length,
        }
    }
}

pub fn roll(values: &[f64], shift: isize) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let s = shift.rem_euclid(n as isize) as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&values[n - s..]);
    out.extend_from_slice(&values[..n - s]);
    out
}

/// `n` samples of dimension `d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    d: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("sample dimension must be positive"));
        }
        if data.len() % d != 0 {
            return Err(invalid(format!(
                "{} values do not split into rows of length {d}",
                data.len()
            )));
        }
        Ok(Self { d, data })
    }

    pub fn empty(d: usize) -> Self {
        Self { d, data: Vec::new() }
    }

    pub fn from_rows<I, R>(d: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut data = Vec::new();
        for r in rows {
            let r = r.as_ref();
            check_dim("sample row", d, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(d, data)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        check_dim("sample row", self.d, row.len())?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Rows `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Self {
        Self {
            d: self.d,
            data: self.data[start * self.d..(start + count) * self.d].to_vec(),
        }
    }

    /// Values of coordinate `j` across all samples.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn map_rows<F>(&self, d_out: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut out = Samples::empty(d_out);
        for r in self.rows() {
            out.push(&f(r)?)?;
        }
        Ok(out)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Standard deviation over every stored value.
    pub fn global_std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    /// Empirical covariance with `1/N` normalization, `d x d` row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.d;
        let m = self.mean();
        let mut c = vec![0.0; d * d];
        for r in self.rows() {
            for i in 0..d {
                let ci = r[i] - m[i];
                for j in i..d {
                    c[i * d + j] += ci * (r[j] - m[j]);
                }
            }
        }
        let denom = self.len().max(1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = c[i * d + j] / denom;
                c[i * d + j] = v;
                c[j * d + i] = v;
            }
        }
        c
    }
}
