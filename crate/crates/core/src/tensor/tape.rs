use super::kernels::{self, ConvDims, ConvGeom};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics produced by a training-mode batch norm.
/// `var` is the unbiased estimate used for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulPrefix(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Upsample(Var),
    AvgPool(Var),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Wengert list of every value computed in one forward pass.
///
/// Single-owner by construction: ops take `&mut self`, and
/// [`Tape::backward`] may run once.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) const BCE_CLAMP: f64 = 1e-6;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
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

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `x[i, ...] * s[i]` where `s.shape` is a prefix of `x.shape`.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss.is_empty() || ss.len() > xs.len() || xs[..ss.len()] != *ss {
            return Err(shape_err(
                "mul_prefix",
                format!("scale shape {ss:?} is not a prefix of {xs:?}"),
            ));
        }
        let sv = self.value(s).data();
        let inner = self.value(x).numel() / sv.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / inner])
            .collect();
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, Op::MulPrefix(x, s), &[x, s]))
    }

    /// Adds `b[c]` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match axis 1 of {xs:?}", self.shape(b)),
            ));
        }
        let (_, c, inner) = split_axis(&xs, 1);
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % c])
            .collect();
        let value = Tensor::new(&xs, data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], kernels::transpose(r, c, self.value(x).data()))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    /// Row-wise softmax of a matrix. Columns with `mask[j] == false` get
    /// probability zero, as if their logits were negative infinity.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(shape_err(
                    "softmax_rows",
                    format!("mask of length {} for {cols} columns", m.len()),
                ));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&j| keep(j))
                .fold(T::neg_infinity(), |m, j| m.max(row[j]));
            if max == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for j in (0..cols).filter(|&j| keep(j)) {
                o[j] = (row[j] - max).exp();
                total = total + o[j];
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,k,k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (dims, n, o) = self.conv_dims(x, w, geom)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            o,
            &dims,
            &geom,
        );
        let value = Tensor::new(&[n, o, dims.oh, dims.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    fn conv_dims(&self, x: Var, w: Var, geom: ConvGeom) -> Result<(ConvDims, usize, usize)> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected NCHW input and OIkk weight, got {xs:?} and {ws:?}"),
            ));
        }
        if ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("kernel axes 2,3 differ: {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!("input axis 1 has {} channels, weight axis 1 expects {}", xs[1], ws[1]),
            ));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::Param("conv2d stride and dilation must be >= 1".into()));
        }
        let k = ws[2];
        let (Some(oh), Some(ow)) = (geom.out_size(xs[2], k), geom.out_size(xs[3], k)) else {
            return Err(shape_err(
                "conv2d",
                format!("spatial axes 2,3 of {xs:?} smaller than the dilated kernel"),
            ));
        };
        let dims = ConvDims {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            oh,
            ow,
        };
        Ok((dims, xs[0], ws[0]))
    }

    /// Batch normalisation over every axis except axis 1.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned so the caller can update running averages. With
    /// `running = Some((mean, var))` the op is a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", format!("expected rank >= 2, got {xs:?}")));
        }
        let (n, c, inner) = split_axis(&xs, 1);
        if n == 0 || inner == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("affine params must have {c} entries"),
            ));
        }
        let xv = self.value(x).data();
        let m = n * inner;
        let mf = T::of(m as f64);
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", "running stats length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                            s = s + v;
                        }
                    }
                    mean[ch] = s / mf;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                            let d = v - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / mf;
                }
                let unbiased = if m > 1 {
                    var.iter().map(|&v| v * mf / T::of((m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&v, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *xh + bv[ch];
        }
        let value = Tensor::new(&xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training: running.is_none(),
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Bilinear resize of `[N,C,H,W]` with half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(shape_err(
                "upsample_bilinear",
                format!("cannot resize {xs:?} to {oh}x{ow}"),
            ));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let ty = kernels::bilinear_taps::<T>(h, oh);
        let tx = kernels::bilinear_taps::<T>(w, ow);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let a = plane[y0 * w + x0];
                    let b = plane[y0 * w + x1];
                    let c = plane[y1 * w + x0];
                    let d = plane[y1 * w + x1];
                    let top = a + lx * (b - a);
                    let bottom = c + lx * (d - c);
                    out.push(top + ly * (bottom - top));
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::Upsample(x), &[x]))
    }

    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,oh,ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 || oh > xs[2] || ow > xs[3] {
            return Err(shape_err(
                "adaptive_avg_pool",
                format!("cannot pool {xs:?} to {oh}x{ow}"),
            ));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = kernels::adaptive_bin(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = kernels::adaptive_bin(ox, w, ow);
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s = s + plane[y * w + xx];
                        }
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool(x), &[x]))
    }

    /// Maximum over `axis`, which is removed from the shape. Ties go to the
    /// lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Axis {
                op: "max_axis",
                axis,
                rank: xs.len(),
            });
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        if len == 0 {
            return Err(shape_err("max_axis", "reducing an empty axis"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut shape = xs.clone();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: xs.len(),
            });
        }
        if start + len > xs[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {xs:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Rows of `x` (axis 0) selected by `idx`; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(shape_err("gather_rows", "scalar input"));
        }
        let row = xs[1..].iter().product::<usize>();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xs[0]) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} out of range for axis 0 of {xs:?}"),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = xs;
        shape[0] = idx.len();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Places row `r` of `x` at row `idx[r]` of an `n_rows` zero tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != idx.len() {
            return Err(shape_err(
                "scatter_rows",
                format!("{} indices for {xs:?}", idx.len()),
            ));
        }
        let mut seen = vec![false; n_rows];
        for &i in idx {
            if i >= n_rows || std::mem::replace(&mut seen[i], true) {
                return Err(shape_err(
                    "scatter_rows",
                    format!("index {i} repeated or out of range for {n_rows} rows"),
                ));
            }
        }
        let row = xs[1..].iter().product::<usize>();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); n_rows * row];
        for (r, &i) in idx.iter().enumerate() {
            out[i * row..(i + 1) * row].copy_from_slice(&d[r * row..(r + 1) * row]);
        }
        let mut shape = xs;
        shape[0] = n_rows;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean binary cross entropy against a constant target, with
    /// predictions clamped to `[1e-6, 1 - 1e-6]`.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return Err(shape_err(
                "bce",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
        let mut total = T::zero();
        for (&pv, &t) in p.iter().zip(target) {
            let q = pv.max(lo).min(hi);
            total = total - (t * q.ln() + (T::one() - t) * (T::one() - q).ln());
        }
        let value = Tensor::scalar(total / T::of(p.len() as f64));
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar("backward", ls.to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(gy) = upper[0].as_deref() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: lower,
            };
            sink.propagate(&self.nodes[i], gy);
        }
        Ok(())
    }
}

struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> GradSink<'_, T> {
    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, node: &Node<T>, gy: &[T]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, gy.to_vec());
                self.acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(*a, gy.to_vec());
                self.acc(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let ga = zip_map(gy, self.val(*b), |g, v| g * v);
                let gb = zip_map(gy, self.val(*a), |g, v| g * v);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Div(a, b) => {
                let ga = zip_map(gy, self.val(*b), |g, v| g / v);
                let gb = gy
                    .iter()
                    .zip(self.val(*a).iter().zip(self.val(*b)))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut ga = vec![T::zero(); gy.len()];
                let mut gb = vec![T::zero(); gy.len()];
                for i in 0..gy.len() {
                    let pick_a = if is_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                    if pick_a {
                        ga[i] = gy[i];
                    } else {
                        gb[i] = gy[i];
                    }
                }
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Scale(x, s) => self.acc(*x, gy.iter().map(|&g| g * *s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(*x, gy.to_vec()),
            Op::MulPrefix(x, s) => {
                let (xv, sv) = (self.val(*x), self.val(*s));
                let inner = xv.len() / sv.len().max(1);
                let gx = gy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * sv[i / inner])
                    .collect();
                let gs = (0..sv.len())
                    .map(|j| {
                        (j * inner..(j + 1) * inner).fold(T::zero(), |acc, i| acc + gy[i] * xv[i])
                    })
                    .collect();
                self.acc(*x, gx);
                self.acc(*s, gs);
            }
            Op::AddBias(x, b) => {
                let (n, c, inner) = split_axis(self.shape(*x), 1);
                let mut gb = vec![T::zero(); c];
                for s in 0..n {
                    for (ch, slot) in gb.iter_mut().enumerate() {
                        let base = (s * c + ch) * inner;
                        for &g in &gy[base..base + inner] {
                            *slot = *slot + g;
                        }
                    }
                }
                self.acc(*x, gy.to_vec());
                self.acc(*b, gb);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bt = kernels::transpose(k, n, self.val(*b));
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, gy, &bt, &mut ga);
                    self.acc(*a, ga);
                }
                if self.wants(*b) {
                    let at = kernels::transpose(m, k, self.val(*a));
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, &at, gy, &mut gb);
                    self.acc(*b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let g = kernels::transpose(s[1], s[0], gy);
                self.acc(*x, g);
            }
            Op::Relu(x) => {
                let g = zip_map(gy, self.val(*x), |g, v| if v > T::zero() { g } else { T::zero() });
                self.acc(*x, g);
            }
            Op::LeakyRelu(x, slope) => {
                let g = zip_map(gy, self.val(*x), |g, v| if v > T::zero() { g } else { g * *slope });
                self.acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let g = zip_map(gy, y, |g, s| g * s * (T::one() - s));
                self.acc(*x, g);
            }
            Op::Abs(x) => {
                let g = zip_map(gy, self.val(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.acc(*x, g);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                self.acc(*x, vec![gy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                self.acc(*x, vec![gy[0] / T::of(n as f64); n]);
            }
            Op::Softmax(x) => {
                let cols = node.value.shape()[1];
                let mut g = vec![T::zero(); y.len()];
                for (r, (yr, gr)) in y.chunks(cols).zip(gy.chunks(cols)).enumerate() {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..cols {
                        g[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*x, g);
            }
            Op::Conv2d { x, w, geom } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let dims = ConvDims {
                    c: xs[1],
                    h: xs[2],
                    w: xs[3],
                    k: ws[2],
                    oh: node.value.shape()[2],
                    ow: node.value.shape()[3],
                };
                let (n, o) = (xs[0], ws[0]);
                let (gx, gw) = kernels::conv2d_backward(
                    self.val(*x),
                    n,
                    self.val(*w),
                    o,
                    gy,
                    &dims,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    self.acc(*x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(*w, gw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, inner) = split_axis(self.shape(*x), 1);
                let m = T::of((n * inner) as f64);
                let gv = self.val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            sum_dy[ch] = sum_dy[ch] + gy[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gy[i] * xhat[i];
                        }
                    }
                }
                let gx = (0..gy.len())
                    .map(|i| {
                        let ch = (i / inner) % c;
                        let k = gv[ch] * inv_std[ch];
                        if *training {
                            k / m * (m * gy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                        } else {
                            k * gy[i]
                        }
                    })
                    .collect();
                self.acc(*x, gx);
                self.acc(*gamma, sum_dy_xhat);
                self.acc(*beta, sum_dy);
            }
            Op::Upsample(x) => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let ty = kernels::bilinear_taps::<T>(h, oh);
                let tx = kernels::bilinear_taps::<T>(w, ow);
                let mut g = vec![T::zero(); planes * h * w];
                let one = T::one();
                for p in 0..planes {
                    let plane = &mut g[p * h * w..(p + 1) * h * w];
                    let gp = &gy[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let v = gp[oy * ow + ox];
                            plane[y0 * w + x0] = plane[y0 * w + x0] + v * (one - lx) * (one - ly);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + v * lx * (one - ly);
                            plane[y1 * w + x0] = plane[y1 * w + x0] + v * (one - lx) * ly;
                            plane[y1 * w + x1] = plane[y1 * w + x1] + v * lx * ly;
                        }
                    }
                }
                self.acc(*x, g);
            }
            Op::AvgPool(x) => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let mut g = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        let (y0, y1) = kernels::adaptive_bin(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = kernels::adaptive_bin(ox, w, ow);
                            let v = gy[(p * oh + oy) * ow + ox]
                                / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let slot = &mut g[(p * h + yy) * w + xx];
                                    *slot = *slot + v;
                                }
                            }
                        }
                    }
                }
                self.acc(*x, g);
            }
            Op::MaxAxis { x, argmax, .. } => {
                let mut g = vec![T::zero(); self.val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gy) {
                    g[src] = g[src] + gv;
                }
                self.acc(*x, g);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[base..base + len * inner]);
                        }
                        self.acc(v, g);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(*x, g);
            }
            Op::GatherRows { x, idx } => {
                let n = self.val(*x).len();
                let row = gy.len() / idx.len().max(1);
                let mut g = vec![T::zero(); n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..row {
                        g[i * row + j] = g[i * row + j] + gy[r * row + j];
                    }
                }
                self.acc(*x, g);
            }
            Op::ScatterRows { x, idx } => {
                let row = self.val(*x).len() / idx.len().max(1);
                let mut g = Vec::with_capacity(idx.len() * row);
                for &i in idx {
                    g.extend_from_slice(&gy[i * row..(i + 1) * row]);
                }
                self.acc(*x, g);
            }
            Op::Bce { pred, target } => {
                let p = self.val(*pred);
                let (lo, hi) = (T::of(BCE_CLAMP), T::one() - T::of(BCE_CLAMP));
                let n = T::of(p.len() as f64);
                let g = p
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            gy[0] * ((T::one() - t) / (T::one() - pv) - t / pv) / n
                        }
                    })
                    .collect();
                self.acc(*pred, g);
            }
        }
    }
}
