//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so the node order is a topological order and backward is a
//! single reverse sweep. A node is *tracked* when any of its inputs is; only
//! tracked nodes receive gradients.

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, ConvDims, GroupNormSaved};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBatch(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    Gelu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        dims: (usize, usize, usize),
        saved: GroupNormSaved,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inner: usize,
        outer: usize,
    },
    AddChannel(Var, Var),
    Concat(Var, Var),
    Upsample(Var, usize),
    Select(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` has no path
    /// to the loss or is untracked.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when there is no path.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(invalid(
            op,
            format!("expected [C, L] or [B, C, L], got {shape:?}"),
        )),
    }
}

fn batched_shape(rank: usize, b: usize, c: usize, l: usize) -> Vec<usize> {
    if rank == 2 {
        vec![c, l]
    } else {
        vec![b, c, l]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted (a parameter or a differentiated input).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let s = tb.data()[0];
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x, s)).collect())?
        } else if ta.is_scalar() {
            let s = ta.data()[0];
            Tensor::new(tb.shape().to_vec(), tb.data().iter().map(|y| f(s, *y)).collect())?
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// Multiplies batch item `i` of `a` by the constant `coeffs[i]`.
    pub fn scale_batch(&mut self, a: Var, coeffs: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let b = t.shape().first().copied().unwrap_or(1);
        if b != coeffs.len() || t.rank() == 0 {
            return Err(invalid(
                "scale_batch",
                format!("{} coefficients for shape {:?}", coeffs.len(), t.shape()),
            ));
        }
        let per = t.numel() / b;
        let mut data = t.data().to_vec();
        for (chunk, c) in data.chunks_mut(per).zip(coeffs) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale_batch", value, Op::ScaleBatch(a, coeffs.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_sq();
        self.push("sum_sq", Tensor::scalar(s), Op::SumSq(a), &[a])
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )?;
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Circular cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`,
    /// `w` is `[C_out, C_in, K]` with odd `K`, padding `(K-1)/2` on each side.
    pub fn conv1d_circular(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c_in, len) = batch_dims("conv1d_circular", &xs)?;
        let [c_out, wc_in, kernel] = ws[..] else {
            return Err(invalid("conv1d_circular", format!("weight must be [C_out, C_in, K], got {ws:?}")));
        };
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_circular",
                left: xs,
                right: ws,
            });
        }
        if kernel % 2 == 0 {
            return Err(invalid("conv1d_circular", format!("kernel width {kernel} is not odd")));
        }
        if stride == 0 || len % stride != 0 {
            return Err(invalid(
                "conv1d_circular",
                format!("length {len} is not divisible by stride {stride}"),
            ));
        }
        if let Some(bv) = b {
            if self.value(bv).shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_circular",
                    left: vec![c_out],
                    right: self.value(bv).shape().to_vec(),
                });
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            len,
            c_out,
            kernel,
            stride,
        };
        let bias = b.map(|bv| self.value(bv).data());
        let (out, cols) =
            kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), bias, dims);
        let value = Tensor::new(batched_shape(xs.len(), batch, c_out, dims.len_out()), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv1d_circular",
            value,
            Op::Conv1d {
                x,
                w,
                b,
                dims,
                cols,
            },
            &inputs,
        )
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let dims = batch_dims("group_norm", &xs)?;
        let channels = dims.1;
        if groups == 0 || channels % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{channels} channels are not divisible into {groups} groups"),
            ));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm",
                    left: vec![channels],
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let (out, saved) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            dims,
            groups,
            eps,
        );
        let value = Tensor::new(xs, out)?;
        self.push(
            "group_norm",
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                dims,
                saved,
            },
            &[x, gamma, beta],
        )
    }

    /// `x: [rows, inner]`, `w: [outer, inner]`, `b: [outer]` -> `[rows, outer]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (rows, inner) = match xs[..] {
            [n] => (1, n),
            [r, n] => (r, n),
            _ => return Err(invalid("linear", format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        if ws.len() != 2 || ws[1] != inner {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let outer = ws[0];
        if let Some(bv) = b {
            if self.value(bv).shape() != [outer] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    left: vec![outer],
                    right: self.value(bv).shape().to_vec(),
                });
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bv| self.value(bv).data()),
            rows,
            inner,
            outer,
        );
        let shape = if xs.len() == 1 { vec![outer] } else { vec![rows, outer] };
        let value = Tensor::new(shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "linear",
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inner,
                outer,
            },
            &inputs,
        )
    }

    /// Adds a per-channel shift: `x: [B, C, L]` with `v: [B, C]` or `[C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        let (b, c, l) = batch_dims("add_channel", &xs)?;
        let per_batch = match vs[..] {
            [vc] if vc == c => false,
            [vb, vc] if vb == b && vc == c => true,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "add_channel",
                    left: xs,
                    right: vs,
                })
            }
        };
        let vd = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let s = if per_batch { vd[bi * c + ci] } else { vd[ci] };
                data[(bi * c + ci) * l..(bi * c + ci + 1) * l]
                    .iter_mut()
                    .for_each(|e| *e += s);
            }
        }
        let value = Tensor::new(xs, data)?;
        self.push("add_channel", value, Op::AddChannel(x, v), &[x, v])
    }

    /// Channel concatenation of two `[B, C_i, L]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let (ba, ca, la) = batch_dims("concat_channels", &as_)?;
        let (bb, cb, lb) = batch_dims("concat_channels", &bs)?;
        if ba != bb || la != lb || as_.len() != bs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: as_,
                right: bs,
            });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for bi in 0..ba {
            data.extend_from_slice(&da[bi * ca * la..(bi + 1) * ca * la]);
            data.extend_from_slice(&db[bi * cb * lb..(bi + 1) * cb * lb]);
        }
        let value = Tensor::new(batched_shape(as_.len(), ba, ca + cb, la), data)?;
        self.push("concat_channels", value, Op::Concat(a, b), &[a, b])
    }

    /// Nearest-neighbour upsampling along the last axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be positive"));
        }
        let xs = self.value(x).shape().to_vec();
        let Some(&len) = xs.last() else {
            return Err(invalid("upsample_nearest", "scalar input"));
        };
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = len * factor;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(len)
            .flat_map(|row| (0..len * factor).map(move |j| row[j / factor]))
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("upsample_nearest", value, Op::Upsample(x, factor), &[x])
    }

    /// Gathers `indices` along the last axis.
    pub fn select_last(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let Some(&len) = xs.last() else {
            return Err(invalid("select_last", "scalar input"));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(invalid("select_last", format!("index {bad} out of range for length {len}")));
        }
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = indices.len();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(len)
            .flat_map(|row| indices.iter().map(move |&i| row[i]))
            .collect();
        let value = Tensor::new(shape, data)?;
        self.push("select_last", value, Op::Select(x, indices.to_vec()), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Untracked leaves never receive gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces an elementwise gradient onto an operand that may have been a
    /// broadcast scalar.
    fn reduce_to(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.value(v).numel() == g.len() {
            g
        } else {
            vec![g.iter().sum()]
        }
    }

    fn operand<'a>(&'a self, v: Var, n: usize) -> impl Fn(usize) -> f64 + 'a {
        let d = self.value(v).data();
        let scalar = d.len() != n;
        move |i| if scalar { d[0] } else { d[i] }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.to_vec()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.to_vec()));
                let neg = g.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, self.reduce_to(*b, neg));
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    let bv = self.operand(*b, n);
                    let ga = g.iter().enumerate().map(|(i, x)| x * bv(i)).collect();
                    self.accumulate(grads, *a, self.reduce_to(*a, ga));
                }
                if self.is_tracked(*b) {
                    let av = self.operand(*a, n);
                    let gb = g.iter().enumerate().map(|(i, x)| x * av(i)).collect();
                    self.accumulate(grads, *b, self.reduce_to(*b, gb));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * c).collect());
            }
            Op::ScaleBatch(a, coeffs) => {
                let per = n / coeffs.len();
                let mut ga = g.to_vec();
                for (chunk, c) in ga.chunks_mut(per).zip(coeffs) {
                    chunk.iter_mut().for_each(|v| *v *= c);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let m = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; m]);
            }
            Op::Mean(a) => {
                let m = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / m as f64; m]);
            }
            Op::SumSq(a) => {
                let ga = self.value(*a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gy)| gy * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Conv1d { x, w, b, dims, cols } => {
                let need = (
                    self.is_tracked(*x),
                    self.is_tracked(*w),
                    b.is_some_and(|bv| self.is_tracked(bv)),
                );
                let cg = kernels::conv1d_backward(g, cols, self.value(*w).data(), *dims, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(bv), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *bv, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                dims,
                saved,
            } => {
                let gg = kernels::group_norm_backward(g, self.value(*gamma).data(), saved, *dims, *groups);
                self.accumulate(grads, *x, gg.dx);
                self.accumulate(grads, *gamma, gg.dgamma);
                self.accumulate(grads, *beta, gg.dbeta);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inner,
                outer,
            } => {
                if self.is_tracked(*x) {
                    let dx = kernels::linear_backward_input(g, self.value(*w).data(), *rows, *inner, *outer);
                    self.accumulate(grads, *x, dx);
                }
                if self.is_tracked(*w) {
                    let dw = kernels::linear_backward_weight(g, self.value(*x).data(), *rows, *inner, *outer);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(bv) = b {
                    if self.is_tracked(*bv) {
                        let mut db = vec![0.0; *outer];
                        for row in g.chunks(*outer) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        self.accumulate(grads, *bv, db);
                    }
                }
            }
            Op::AddChannel(x, v) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.is_tracked(*v) {
                    let (b, c, l) = batch_dims("add_channel", self.value(*x).shape()).unwrap();
                    let per_batch = self.value(*v).rank() == 2;
                    let mut gv = vec![0.0; self.value(*v).numel()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: f64 = g[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter().sum();
                            gv[if per_batch { bi * c + ci } else { ci }] += s;
                        }
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::Concat(a, b) => {
                let (ba, ca, l) = batch_dims("concat_channels", self.value(*a).shape()).unwrap();
                let cb = self.value(*b).numel() / (ba * l);
                let mut ga = Vec::with_capacity(ba * ca * l);
                let mut gb = Vec::with_capacity(ba * cb * l);
                for chunk in g.chunks((ca + cb) * l) {
                    ga.extend_from_slice(&chunk[..ca * l]);
                    gb.extend_from_slice(&chunk[ca * l..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Upsample(x, factor) => {
                let len = *self.value(*x).shape().last().unwrap();
                let gx = g
                    .chunks(len * factor)
                    .flat_map(|row| row.chunks(*factor).map(|c| c.iter().sum::<f64>()))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Select(x, indices) => {
                let len = *self.value(*x).shape().last().unwrap();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (row, grow) in gx.chunks_mut(len).zip(g.chunks(indices.len())) {
                    for (&i, gi) in indices.iter().zip(grow) {
                        row[i] += gi;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
