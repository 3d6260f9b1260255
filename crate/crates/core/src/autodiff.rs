//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! materialized eagerly; [`Tape::backward`] then walks the nodes in reverse
//! recording order, which is a valid topological order because an op can
//! only consume vars that already exist.
//!
//! ```
//! use crica::autodiff::Tape;
//! use crica::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward_scalar(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).item(), 6.0);
//! ```
//!
//! Binary elementwise ops broadcast the right operand over leading axes:
//! its shape must be a suffix of the left operand's shape (a `[]` scalar
//! is the empty suffix).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul { a: Var, b: Var, batched: bool },
    Permute { a: Var, axes: Vec<usize> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Softmax { a: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    ClampMin { a: Var, min: T },
    Pow { a: Var, p: Var },
    SumAxis { a: Var, axis: usize },
    L2Normalize { a: Var, axis: usize, eps: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Discard it after [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(tape.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zeros when `v` did not influence the output.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(tape, v)
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

/// `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Folds a full-size gradient onto a suffix-broadcast operand.
fn reduce_to<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::of(0.5)).exp()
}

/// Builds the `[C_in·kh·kw, H·W]` patch matrix of one image with zero padding.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![T::zero(); c * kh * kw * hw];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kj as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + xx] = x[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kj as isize - pw as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = &mut dx[(ci * h + sy as usize) * w + sx as usize];
                        *d = *d + src[y * w + xx];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if !is_suffix(xa.shape(), xb.shape()) {
            return Err(Error::shape(
                name,
                format!("{:?} and {:?}", xa.shape(), xb.shape()),
            ));
        }
        let nb = xb.numel();
        let bd = xb.data();
        let data = xa
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, bd[i % nb]))
            .collect();
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| x * gelu_cdf(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| x.recip())
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let min = T::of(min);
        self.unary(a, Op::ClampMin { a, min }, |x| if x > min { x } else { min })
    }

    /// Elementwise `a^p` with a one-element exponent var (differentiable in
    /// both). Non-integer exponents require strictly positive inputs.
    pub fn pow(&mut self, a: Var, p: Var) -> Result<Var> {
        if self.value(p).numel() != 1 {
            return Err(Error::shape(
                "pow",
                format!("exponent must have one element, got {:?}", self.shape(p)),
            ));
        }
        let e = self.value(p).item();
        if e.fract() != T::zero() && self.data(a).iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonPositiveBase {
                exponent: e.as_f64(),
            });
        }
        let rg = self.any_grad(&[a, p]);
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.powf(e)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Pow { a, p }, rg))
    }

    /// `a^p` for a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let pv = self.constant(Tensor::scalar(T::of(p)));
        self.pow(a, pv)
    }

    /// Matrix product. Either `[G,m,k]·[G,k,n]` (batched) or
    /// `[...,k]·[k,n]`, where the leading axes of the left operand are
    /// flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        let (value, batched) = if sa.len() == 3 && sb.len() == 3 {
            let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if sb[0] != g || sb[1] != k {
                return Err(mismatch());
            }
            let (ad, bd) = (self.data(a), self.data(b));
            let mut out = vec![T::zero(); g * m * n];
            out.par_chunks_mut((m * n).max(1))
                .enumerate()
                .for_each(|(gi, c)| {
                    T::gemm(
                        m,
                        k,
                        n,
                        &ad[gi * m * k..(gi + 1) * m * k],
                        (k as isize, 1),
                        &bd[gi * k * n..(gi + 1) * k * n],
                        (n as isize, 1),
                        false,
                        c,
                    )
                });
            (Tensor::new(vec![g, m, n], out)?, true)
        } else if sb.len() == 2 && !sa.is_empty() {
            let (k, n) = (sb[0], sb[1]);
            if *sa.last().unwrap() != k {
                return Err(mismatch());
            }
            let m = self.value(a).numel() / k.max(1);
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                self.data(a),
                (k as isize, 1),
                self.data(b),
                (n as isize, 1),
                false,
                &mut out,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            (Tensor::new(shape, out)?, false)
        } else {
            return Err(mismatch());
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b, batched }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(Error::shape("permute", format!("{axes:?} for {shape:?}")));
        }
        for &ax in axes {
            if ax >= shape.len() || seen[ax] {
                return Err(Error::shape("permute", format!("{axes:?} for {shape:?}")));
            }
            seen[ax] = true;
        }
        let data = permute_data(self.data(a), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if start >= end || end > len {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let width = (end - start) * inner;
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice { a, axis, start },
            rg,
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / sum;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { a, axis }, rg))
    }

    /// Layer normalization over the last axis. A row whose variance plus
    /// `eps` is zero normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for last axis {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(eps);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let n = T::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let denom = (var + eps).sqrt();
            let rs = if denom > T::zero() {
                denom.recip()
            } else {
                T::zero()
            };
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stride-1 convolution with zero "same" padding. `x` is `[C_in,H,W]`
    /// or `[B,C_in,H,W]`; `kernel` is `[C_out,C_in,kh,kw]` with odd extents;
    /// `bias`, when given, is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let mismatch = || Error::shape("conv2d", format!("input {xs:?}, kernel {ks:?}"));
        if ks.len() != 4 {
            return Err(mismatch());
        }
        let (b, c, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(mismatch()),
        };
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        if ks[1] != c {
            return Err(mismatch());
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel { kh, kw });
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {co} outputs", self.shape(bv)),
                ));
            }
        }
        let hw = h * w;
        let ckk = c * kh * kw;
        let (xd, kd) = (self.data(x), self.data(kernel));
        let bd = bias.map(|v| self.data(v));
        let mut out = vec![T::zero(); b * co * hw];
        out.par_chunks_mut((co * hw).max(1))
            .enumerate()
            .for_each(|(bi, o)| {
                let img = &xd[bi * c * hw..(bi + 1) * c * hw];
                let cols;
                let cols_ref = if kh == 1 && kw == 1 {
                    img
                } else {
                    cols = im2col(img, c, h, w, kh, kw);
                    &cols
                };
                T::gemm(
                    co,
                    ckk,
                    hw,
                    kd,
                    (ckk as isize, 1),
                    cols_ref,
                    (hw as isize, 1),
                    false,
                    o,
                );
                if let Some(bd) = bd {
                    for (oc, chunk) in o.chunks_mut(hw.max(1)).enumerate() {
                        for v in chunk {
                            *v = *v + bd[oc];
                        }
                    }
                }
            });
        let mut shape = xs.clone();
        let cdim = shape.len() - 3;
        shape[cdim] = co;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, kernel, bias }, rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or(Error::InvalidAxis {
            axis,
            rank: self.shape(a).len(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements as a `[]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum_axis(flat, 0)
    }

    /// Divides each fiber along `axis` by `max(‖x‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let x = self.data(a);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                // 64-bit accumulation keeps long f32 rows unit-norm to ~1e-8
                let norm = (0..len).map(|j| x[at(j)].as_f64().powi(2)).sum::<f64>().sqrt();
                let n = norm.max(eps);
                for j in 0..len {
                    y[at(j)] = T::of(x[at(j)].as_f64() / n);
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, y)?, Op::L2Normalize { a, axis, eps }, rg))
    }

    /// Backward pass seeded with `seed` at `output`.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass for a one-element output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(shape));
        }
        self.backward(output, &Tensor::ones(shape))
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                self.accum(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let mut gb = reduce_to(g, self.value(*b).numel());
                    if neg {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, &v)| v * bd[k % nb]).collect();
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let prod: Vec<T> = g.iter().zip(ad).map(|(&v, &x)| v * x).collect();
                    self.accum(grads, *b, reduce_to(&prod, nb));
                }
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.to_vec()),
            Op::Matmul { a, b, batched } => self.backprop_matmul(*a, *b, *batched, g, grads),
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let ga = permute_data(g, node.value.shape(), &inv);
                self.accum(grads, *a, ga);
            }
            Op::Reshape(a) => self.accum(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis).expect("recorded axis");
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.accum(grads, v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.shape(*a);
                let (outer, len, inner) = split_axis(in_shape, *axis).expect("recorded axis");
                let width = node.value.shape()[*axis] * inner;
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                self.accum(grads, *a, ga);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) =
                    split_axis(node.value.shape(), *axis).expect("recorded axis");
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                let rows = g.len() / d.max(1);
                let n = T::of(d as f64);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            db[j] = db[j] + g[r * d + j];
                        }
                    }
                    self.accum(grads, *gamma, dg);
                    self.accum(grads, *beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gh: Vec<T> = (0..d).map(|j| g[r * d + j] * gd[j]).collect();
                        let h = &xhat[r * d..(r + 1) * d];
                        let mean_g = gh.iter().copied().sum::<T>() / n;
                        let mean_gh = gh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (gh[j] - mean_g - h[j] * mean_gh);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Conv2d { x, kernel, bias } => self.backprop_conv(*x, *kernel, *bias, g, grads),
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&v, &xv)| if xv > T::zero() { v } else { T::zero() })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&v, &xv)| v * (gelu_cdf(xv) + xv * gelu_pdf(xv)))
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => {
                self.accum(grads, *a, g.iter().zip(y).map(|(&v, &e)| v * e).collect());
            }
            Op::Ln(a) => {
                let x = self.data(*a);
                self.accum(grads, *a, g.iter().zip(x).map(|(&v, &xv)| v / xv).collect());
            }
            Op::Recip(a) => {
                let ga = g.iter().zip(y).map(|(&v, &r)| -v * r * r).collect();
                self.accum(grads, *a, ga);
            }
            Op::ClampMin { a, min } => {
                let x = self.data(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(&v, &xv)| if xv > *min { v } else { T::zero() })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Pow { a, p } => {
                let x = self.data(*a);
                let e = self.value(*p).item();
                if self.wants(*a) {
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(&v, &xv)| v * e * xv.powf(e - T::one()))
                        .collect();
                    self.accum(grads, *a, ga);
                }
                if self.wants(*p) {
                    let gp: T = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .filter(|(_, (&xv, _))| xv > T::zero())
                        .map(|(&v, (&xv, &yv))| v * yv * xv.ln())
                        .sum();
                    self.accum(grads, *p, vec![gp]);
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis).expect("recorded axis");
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::L2Normalize { a, axis, eps } => {
                let (outer, len, inner) =
                    split_axis(node.value.shape(), *axis).expect("recorded axis");
                let x = self.data(*a);
                let mut ga = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let norm = (0..len).map(|j| x[at(j)].as_f64().powi(2)).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            let norm = T::of(norm);
                            for j in 0..len {
                                ga[at(j)] = (g[at(j)] - y[at(j)] * dot) / norm;
                            }
                        } else {
                            let eps = T::of(*eps);
                            for j in 0..len {
                                ga[at(j)] = g[at(j)] / eps;
                            }
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        batched: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (ad, bd) = (self.data(a), self.data(b));
        let sb = self.shape(b);
        if batched {
            let sa = self.shape(a);
            let (m, k, n) = (sa[1], sa[2], sb[2]);
            if self.wants(a) {
                let mut ga = vec![T::zero(); ad.len()];
                ga.par_chunks_mut((m * k).max(1))
                    .enumerate()
                    .for_each(|(gi, out)| {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            (n as isize, 1),
                            &bd[gi * k * n..(gi + 1) * k * n],
                            (1, n as isize),
                            false,
                            out,
                        )
                    });
                self.accum(grads, a, ga);
            }
            if self.wants(b) {
                let mut gb = vec![T::zero(); bd.len()];
                gb.par_chunks_mut((k * n).max(1))
                    .enumerate()
                    .for_each(|(gi, out)| {
                        T::gemm(
                            k,
                            m,
                            n,
                            &ad[gi * m * k..(gi + 1) * m * k],
                            (1, k as isize),
                            &g[gi * m * n..(gi + 1) * m * n],
                            (n as isize, 1),
                            false,
                            out,
                        )
                    });
                self.accum(grads, b, gb);
            }
        } else {
            let (k, n) = (sb[0], sb[1]);
            let m = ad.len() / k.max(1);
            if self.wants(a) {
                let mut ga = vec![T::zero(); ad.len()];
                T::gemm(m, n, k, g, (n as isize, 1), bd, (1, n as isize), false, &mut ga);
                self.accum(grads, a, ga);
            }
            if self.wants(b) {
                let mut gb = vec![T::zero(); bd.len()];
                T::gemm(k, m, n, ad, (1, k as isize), g, (n as isize, 1), false, &mut gb);
                self.accum(grads, b, gb);
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        let (b, c, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            _ => (xs[0], xs[1], xs[2], xs[3]),
        };
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let hw = h * w;
        let ckk = c * kh * kw;
        let (xd, kd) = (self.data(x), self.data(kernel));

        if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
            let mut gb = vec![T::zero(); co];
            for bi in 0..b {
                for (oc, acc) in gb.iter_mut().enumerate() {
                    let base = (bi * co + oc) * hw;
                    *acc = *acc + g[base..base + hw].iter().copied().sum::<T>();
                }
            }
            self.accum(grads, bv, gb);
        }
        if self.wants(kernel) {
            let gk = (0..b)
                .into_par_iter()
                .map(|bi| {
                    let img = &xd[bi * c * hw..(bi + 1) * c * hw];
                    let cols = if kh == 1 && kw == 1 {
                        img.to_vec()
                    } else {
                        im2col(img, c, h, w, kh, kw)
                    };
                    let mut out = vec![T::zero(); co * ckk];
                    T::gemm(
                        co,
                        hw,
                        ckk,
                        &g[bi * co * hw..(bi + 1) * co * hw],
                        (hw as isize, 1),
                        &cols,
                        (1, hw as isize),
                        false,
                        &mut out,
                    );
                    out
                })
                .collect::<Vec<_>>()
                .into_iter()
                .reduce(|mut acc, v| {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a = *a + b;
                    }
                    acc
                })
                .unwrap_or_else(|| vec![T::zero(); co * ckk]);
            self.accum(grads, kernel, gk);
        }
        if self.wants(x) {
            let mut gx = vec![T::zero(); xd.len()];
            gx.par_chunks_mut((c * hw).max(1))
                .enumerate()
                .for_each(|(bi, dx)| {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    T::gemm(
                        ckk,
                        co,
                        hw,
                        kd,
                        (1, ckk as isize),
                        &g[bi * co * hw..(bi + 1) * co * hw],
                        (hw as isize, 1),
                        false,
                        &mut dcols,
                    );
                    if kh == 1 && kw == 1 {
                        dx.copy_from_slice(&dcols);
                    } else {
                        col2im_add(&dcols, dx, c, h, w, kh, kw);
                    }
                });
            self.accum(grads, x, gx);
        }
    }
}
