//! Raw slice kernels shared by the tape's forward and backward passes.
//!
//! Layout convention: activations are `[batch, channels, length]`, row-major.
//! Convolutions are lowered to one GEMM per batch item over a batch-major
//! im2col buffer.

/// Dimensions of a circular 1D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn len_out(&self) -> usize {
        self.len / self.stride
    }

    fn krows(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// `C = A * B` with explicit row/column strides, overwriting `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    gemm_acc(m, k, n, a, (rsa, csa), b, (rsb, csb), 0.0, c, n);
}

/// `C = A * B + beta C`, `C` row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || c.len() >= (m - 1) * rsc + n);
    if k == 0 {
        for row in c.chunks_mut(rsc).take(m) {
            row[..n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: every stride/extent pair above addresses memory inside the
    // respective slices; callers size `a`, `b`, `c` from the same dims.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Appends the `len_out` taps of kernel offset `k` read from one circular
/// channel `src`.
#[inline]
fn gather_tap(out: &mut Vec<f64>, src: &[f64], d: &ConvDims, k: usize) {
    let pad = (d.kernel - 1) / 2;
    let start = (k + d.len - pad) % d.len;
    if d.stride == 1 {
        out.extend_from_slice(&src[start..]);
        out.extend_from_slice(&src[..start]);
    } else {
        out.extend((0..d.len_out()).map(|lo| src[(start + lo * d.stride) % d.len]));
    }
}

/// Adjoint of `gather_tap`: adds `g` back onto the channel `dst`.
#[inline]
fn scatter_tap(dst: &mut [f64], g: &[f64], d: &ConvDims, k: usize) {
    let pad = (d.kernel - 1) / 2;
    let start = (k + d.len - pad) % d.len;
    if d.stride == 1 {
        let (head, tail) = g.split_at(d.len - start);
        dst[start..].iter_mut().zip(head).for_each(|(a, b)| *a += b);
        dst[..start].iter_mut().zip(tail).for_each(|(a, b)| *a += b);
    } else {
        for (lo, v) in g.iter().enumerate() {
            dst[(start + lo * d.stride) % d.len] += v;
        }
    }
}

/// Returns the output and the im2col buffer, laid out `[batch, C_in * K,
/// len_out]`.
pub(crate) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let lout = d.len_out();
    let krows = d.krows();
    let mut cols = Vec::with_capacity(d.batch * krows * lout);
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let src = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
            for k in 0..d.kernel {
                gather_tap(&mut cols, src, &d, k);
            }
        }
    }
    let per = d.c_out * lout;
    let mut out = match bias {
        Some(bb) => (0..d.batch * d.c_out).flat_map(|i| std::iter::repeat_n(bb[i % d.c_out], lout)).collect(),
        None => vec![0.0; d.batch * per],
    };
    for (b, ob) in out.chunks_mut(per).enumerate() {
        let cb = &cols[b * krows * lout..(b + 1) * krows * lout];
        gemm_acc(d.c_out, krows, lout, w, (krows, 1), cb, (lout, 1), 1.0, ob, lout);
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv1d_backward(
    dout: &[f64],
    cols: &[f64],
    w: &[f64],
    d: ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads {
    let lout = d.len_out();
    let krows = d.krows();
    let per = d.c_out * lout;

    let db = need.2.then(|| {
        let mut db = vec![0.0; d.c_out];
        for ob in dout.chunks(per) {
            for (acc, row) in db.iter_mut().zip(ob.chunks(lout)) {
                *acc += row.iter().sum::<f64>();
            }
        }
        db
    });

    let dw = need.1.then(|| {
        let mut dw = vec![0.0; d.c_out * krows];
        for (b, ob) in dout.chunks(per).enumerate() {
            let cb = &cols[b * krows * lout..(b + 1) * krows * lout];
            gemm_acc(d.c_out, lout, krows, ob, (lout, 1), cb, (1, lout), 1.0, &mut dw, krows);
        }
        dw
    });

    let dx = need.0.then(|| {
        let mut dcols = vec![0.0; krows * lout];
        let mut dx = vec![0.0; d.batch * d.c_in * d.len];
        for (b, ob) in dout.chunks(per).enumerate() {
            gemm_acc(krows, d.c_out, lout, w, (1, krows), ob, (lout, 1), 0.0, &mut dcols, lout);
            for ci in 0..d.c_in {
                let dst = &mut dx[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                for k in 0..d.kernel {
                    let r = ci * d.kernel + k;
                    scatter_tap(dst, &dcols[r * lout..(r + 1) * lout], &d, k);
                }
            }
        }
        dx
    });

    ConvGrads { dx, dw, db }
}

/// `y = x * w^T (+ bias)` for `x: [rows, inner]`, `w: [outer, inner]`.
pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    rows: usize,
    inner: usize,
    outer: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * outer];
    gemm(rows, inner, outer, x, inner, 1, w, 1, inner, &mut y);
    if let Some(b) = bias {
        for row in y.chunks_mut(outer) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub(crate) fn linear_backward_input(
    dy: &[f64],
    w: &[f64],
    rows: usize,
    inner: usize,
    outer: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * inner];
    gemm(rows, outer, inner, dy, outer, 1, w, inner, 1, &mut dx);
    dx
}

pub(crate) fn linear_backward_weight(
    dy: &[f64],
    x: &[f64],
    rows: usize,
    inner: usize,
    outer: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; outer * inner];
    gemm(outer, rows, inner, dy, 1, outer, x, inner, 1, &mut dw);
    dw
}

/// Per-(batch, group) normalization statistics saved for backward.
pub(crate) struct GroupNormSaved {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    (batch, channels, len): (usize, usize, usize),
    groups: usize,
    eps: f64,
) -> (Vec<f64>, GroupNormSaved) {
    let cg = channels / groups;
    let span = cg * len;
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(batch * groups);
    let mut out = Vec::with_capacity(x.len());
    for (bg, seg) in x.chunks(span).enumerate() {
        let mean = seg.iter().sum::<f64>() / span as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        for (j, row) in seg.chunks(len).enumerate() {
            let c = (bg % groups) * cg + j;
            for v in row {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(gamma[c] * h + beta[c]);
            }
        }
    }
    (out, GroupNormSaved { xhat, rstd })
}

pub(crate) struct GroupNormGrads {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn group_norm_backward(
    dy: &[f64],
    gamma: &[f64],
    saved: &GroupNormSaved,
    (_batch, channels, len): (usize, usize, usize),
    groups: usize,
) -> GroupNormGrads {
    let cg = channels / groups;
    let span = cg * len;
    let mut dx = Vec::with_capacity(dy.len());
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (bg, (gseg, hseg)) in dy.chunks(span).zip(saved.xhat.chunks(span)).enumerate() {
        let r = saved.rstd[bg];
        let c0 = (bg % groups) * cg;
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for (j, (grow, hrow)) in gseg.chunks(len).zip(hseg.chunks(len)).enumerate() {
            let c = c0 + j;
            let (mut sg, mut sgh) = (0.0, 0.0);
            for (gy, h) in grow.iter().zip(hrow) {
                sg += gy;
                sgh += gy * h;
            }
            dgamma[c] += sgh;
            dbeta[c] += sg;
            mean_dh += gamma[c] * sg;
            mean_dh_h += gamma[c] * sgh;
        }
        mean_dh /= span as f64;
        mean_dh_h /= span as f64;
        for (j, (grow, hrow)) in gseg.chunks(len).zip(hseg.chunks(len)).enumerate() {
            let gc = gamma[c0 + j];
            dx.extend(grow.iter().zip(hrow).map(|(gy, h)| r * (gy * gc - mean_dh - h * mean_dh_h)));
        }
    }
    GroupNormGrads { dx, dgamma, dbeta }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
