//! Reverse-mode tape. Every operation records its inputs and whatever it
//! needs for the backward sweep; [`Tape::backward`] visits each node once in
//! reverse creation order.

use std::cell::{Cell, Ref, RefCell};

use crate::ad::conv::{self, ConvGeom};
use crate::ad::fft;
use crate::ad::ssim::{self, SsimParams, SsimPlaneAux};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MulConst(Var, Tensor<T>),
    Affine(Var, T),
    DivScalar(Var, Var),
    MulScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    ChannelBias(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log1p(Var),
    SignedLog1p(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>),
    Fft2 {
        x: Var,
        inverse: bool,
    },
    FftShift {
        x: Var,
        inverse: bool,
    },
    CAbs(Var),
    MeanRows(Var),
    ExpandRows(Var),
    MaskComplex {
        y: Var,
        m: Var,
    },
    StraightThrough {
        p: Var,
        m_prev: Var,
        u: Vec<T>,
        eligible: Vec<bool>,
        slope: T,
    },
    Ssim {
        x: Var,
        target: Tensor<T>,
        aux: Vec<SsimPlaneAux<T>>,
        window: usize,
    },
    PercentileAbs {
        x: Var,
        picks: Vec<(usize, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward value of a straight-through Bernoulli draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawForward<'a> {
    /// Binary increment supplied by the sampler.
    Hard(&'a [bool]),
    /// Use the sigmoid surrogate itself as the forward value (for gradient checks).
    Relaxed,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    /// Running hash of every discrete choice made by the recorded ops.
    branches: Cell<u64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const CABS_EPS: f64 = 1e-12;

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn last2(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need rank >= 2, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let lead: usize = shape[..shape.len() - 2].iter().product();
    Ok((lead, h, w))
}

fn complex_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 || shape[shape.len() - 3] != 2 {
        return Err(shape_err(
            op,
            format!("expected [.., 2, H, W] complex layout, got {shape:?}"),
        ));
    }
    let (lead, h, w) = last2(shape, op)?;
    Ok((lead / 2, h, w))
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            branches: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// Hash of the discrete decisions taken so far (ReLU signs, argmax and
    /// order-statistic picks, draw eligibility). Two evaluations with equal
    /// signatures lie on the same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    fn note_branches(&self, choices: impl IntoIterator<Item = u64>) {
        let mut h = self.branches.get();
        for c in choices {
            h = (h ^ c).wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.branches.set(h);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leaves that require gradients.
    pub fn param_leaf_count(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .count()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        nodes[a.0]
            .value
            .zip_map(&nodes[b.0].value, f)
            .map_err(|_| {
                shape_err(
                    name,
                    format!(
                        "{:?} vs {:?}",
                        nodes[a.0].value.shape(),
                        nodes[b.0].value.shape()
                    ),
                )
            })
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.nodes.borrow()[x.0].value.map(f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), self.rg(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), self.rg(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), self.rg(&[a, b]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.zip_map(c, |a, b| a * b).map_err(|_| {
                shape_err(
                    "mul_const",
                    format!("{:?} vs {:?}", nodes[x.0].value.shape(), c.shape()),
                )
            })?
        };
        self.push("mul_const", v, Op::MulConst(x, c.clone()), self.rg(&[x]))
    }

    /// `a·x + b` with constant scalars.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Result<Var> {
        let (ta, tb) = (T::c(a), T::c(b));
        let v = self.unary(x, |e| ta * e + tb);
        self.push("affine", v, Op::Affine(x, ta), self.rg(&[x]))
    }

    pub fn scale(&self, x: Var, a: f64) -> Result<Var> {
        self.affine(x, a, 0.0)
    }

    fn scalar_of(&self, s: Var, op: &'static str) -> Result<T> {
        let nodes = self.nodes.borrow();
        let t = &nodes[s.0].value;
        if t.len() != 1 {
            return Err(shape_err(op, format!("expected scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    /// `x / s` for a scalar node `s`.
    pub fn div_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "div_scalar")?;
        let v = self.unary(x, |e| e / sv);
        self.push("div_scalar", v, Op::DivScalar(x, s), self.rg(&[x, s]))
    }

    /// `x · s` for a scalar node `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s, "mul_scalar")?;
        let v = self.unary(x, |e| e * sv);
        self.push("mul_scalar", v, Op::MulScalar(x, s), self.rg(&[x, s]))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.nodes.borrow()[x.0].value.sum());
        self.push("sum", v, Op::Sum(x), self.rg(&[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.nodes.borrow()[x.0].value.mean());
        self.push("mean", v, Op::Mean(x), self.rg(&[x]))
    }

    /// Global maximum; the gradient goes to the first maximising entry.
    pub fn max(&self, x: Var) -> Result<Var> {
        let (idx, m) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            if d.is_empty() {
                return Err(arg_err("max", "empty tensor"));
            }
            let mut best = 0;
            for (i, &e) in d.iter().enumerate() {
                if e > d[best] {
                    best = i;
                }
            }
            (best, d[best])
        };
        self.note_branches([idx as u64]);
        self.push("max", Tensor::scalar(m), Op::Max(x, idx), self.rg(&[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes.borrow()[x.0].value.reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), self.rg(&[x]))
    }

    /// `x·W + b` with `x: [B, in]` (or `[in]`), `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (v, batch) = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            if wv.rank() != 2 {
                return Err(shape_err("linear", format!("weight must be rank 2, got {:?}", wv.shape())));
            }
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            let (batch, xin, out_shape) = match xv.shape() {
                [n] => (1, *n, vec![dout]),
                [b, n] => (*b, *n, vec![*b, dout]),
                s => return Err(shape_err("linear", format!("input must be rank 1 or 2, got {s:?}"))),
            };
            if xin != din || bv.shape() != [dout] {
                return Err(shape_err(
                    "linear",
                    format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
                ));
            }
            let mut out = Vec::with_capacity(batch * dout);
            for _ in 0..batch {
                out.extend_from_slice(bv.data());
            }
            gemm(false, false, batch, din, dout, xv.data(), wv.data(), T::one(), &mut out);
            (Tensor::new(&out_shape, out)?, batch)
        };
        self.push("linear", v, Op::Linear { x, w, b, batch }, self.rg(&[x, w, b]))
    }

    /// Zero-padded cross-correlation; `x: [N, C, H, W]`, `kernel: [Co, C, k, k]`.
    pub fn conv2d(&self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be >= 1"));
        }
        let (v, geom) = {
            let nodes = self.nodes.borrow();
            let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
            let (xs, ks) = (xv.shape(), kv.shape());
            if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] || xs[1] != ks[1] {
                return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ks:?}")));
            }
            let k = ks[2];
            let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
            if k > hp || k > wp {
                return Err(arg_err(
                    "conv2d",
                    format!("kernel {k} larger than padded input {hp}x{wp}"),
                ));
            }
            let geom = ConvGeom {
                n: xs[0],
                cin: xs[1],
                h: xs[2],
                w: xs[3],
                cout: ks[0],
                k,
                stride,
                pad: padding,
                ho: (hp - k) / stride + 1,
                wo: (wp - k) / stride + 1,
            };
            (conv::forward(xv, kv, &geom), geom)
        };
        self.push("conv2d", v, Op::Conv2d { x, k: kernel, geom }, self.rg(&[x, kernel]))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [N, C, H, W]`.
    pub fn channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[b.0].value);
            let xs = xv.shape();
            if xs.len() != 4 || bv.shape() != [xs[1]] {
                return Err(shape_err("channel_bias", format!("x {:?}, b {:?}", xs, bv.shape())));
            }
            let plane = xs[2] * xs[3];
            let mut out = xv.clone();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bias = bv.data()[i % xs[1]];
                chunk.iter_mut().for_each(|e| *e += bias);
            }
            out
        };
        self.push("channel_bias", v, Op::ChannelBias(x, b), self.rg(&[x, b]))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, |e| if e > T::zero() { e } else { T::zero() });
        self.note_branches(v.data().iter().map(|&e| (e > T::zero()) as u64));
        self.push("relu", v, Op::Relu(x), self.rg(&[x]))
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, softplus);
        self.push("softplus", v, Op::Softplus(x), self.rg(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x), self.rg(&[x]))
    }

    pub fn log1p(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, |e| e.ln_1p());
        self.push("log1p", v, Op::Log1p(x), self.rg(&[x]))
    }

    /// `sign(x)·ln(1 + |x|)`.
    pub fn signed_log1p(&self, x: Var) -> Result<Var> {
        let v = self.unary(x, |e| e.signum() * e.abs().ln_1p());
        self.push("signed_log1p", v, Op::SignedLog1p(x), self.rg(&[x]))
    }

    /// Affine-free normalisation of every `H×W` plane to zero mean and unit variance.
    pub fn instance_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (v, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (planes, h, w) = last2(xv.shape(), "instance_norm")?;
            let n = h * w;
            if n < 2 {
                return Err(shape_err("instance_norm", "plane size must be >= 2"));
            }
            let mut out = vec![T::zero(); xv.len()];
            let mut inv_std = Vec::with_capacity(planes);
            let tn = T::c(n as f64);
            for (src, dst) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
                let mean = src.iter().copied().sum::<T>() / tn;
                let var = src.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / tn;
                let is = T::one() / (var + T::c(eps)).sqrt();
                inv_std.push(is);
                let constant = src.iter().all(|&e| e == src[0]);
                if !constant {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (s - mean) * is;
                    }
                }
            }
            (Tensor::new(xv.shape(), out)?, inv_std)
        };
        self.push("instance_norm", v, Op::InstanceNorm { x, inv_std }, self.rg(&[x]))
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (lead, h, w) = last2(xv.shape(), "upsample2x")?;
            let mut shape = xv.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = 2 * h;
            shape[r - 1] = 2 * w;
            let mut out = vec![T::zero(); lead * 4 * h * w];
            for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                    }
                }
            }
            Tensor::new(&shape, out)?
        };
        self.push("upsample2x", v, Op::Upsample2x(x), self.rg(&[x]))
    }

    /// 2×2 average pooling of the last two axes.
    pub fn avgpool2x(&self, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (lead, h, w) = last2(xv.shape(), "avgpool2x")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(shape_err("avgpool2x", format!("odd extents {h}x{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut shape = xv.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = ho;
            shape[r - 1] = wo;
            let quarter = T::c(0.25);
            let mut out = vec![T::zero(); lead * ho * wo];
            for (src, dst) in xv.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
                for i in 0..ho {
                    for j in 0..wo {
                        let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                        let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                        dst[i * wo + j] = (a + b) * quarter;
                    }
                }
            }
            Tensor::new(&shape, out)?
        };
        self.push("avgpool2x", v, Op::AvgPool2x(x), self.rg(&[x]))
    }

    /// Stacks `[N, C_i, H, W]` inputs along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(arg_err("concat_channels", "no inputs"));
        }
        let v = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if first.len() != 4 {
                return Err(shape_err("concat_channels", format!("need rank 4, got {first:?}")));
            }
            let (n, h, w) = (first[0], first[2], first[3]);
            let mut total_c = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                    return Err(shape_err(
                        "concat_channels",
                        format!("spatial mismatch {first:?} vs {s:?}"),
                    ));
                }
                total_c += s[1];
            }
            let mut out = Vec::with_capacity(n * total_c * h * w);
            for b in 0..n {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let sz = t.shape()[1] * h * w;
                    out.extend_from_slice(&t.data()[b * sz..(b + 1) * sz]);
                }
            }
            Tensor::new(&[n, total_c, h, w], out)?
        };
        self.push("concat_channels", v, Op::Concat(parts.to_vec()), self.rg(parts))
    }

    fn fft_value(&self, x: Var, inverse: bool, name: &'static str) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let (_, h, w) = complex_dims(xv.shape(), name)?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(arg_err(name, format!("extents {h}x{w} are not powers of two")));
        }
        let mut out = xv.clone();
        fft::fft_2d_blocks(out.data_mut(), h, w, inverse);
        Ok(out)
    }

    /// Orthonormal 2D DFT of a `[.., 2, H, W]` complex tensor.
    pub fn fft2(&self, x: Var) -> Result<Var> {
        let v = self.fft_value(x, false, "fft2")?;
        self.push("fft2", v, Op::Fft2 { x, inverse: false }, self.rg(&[x]))
    }

    pub fn ifft2(&self, x: Var) -> Result<Var> {
        let v = self.fft_value(x, true, "ifft2")?;
        self.push("ifft2", v, Op::Fft2 { x, inverse: true }, self.rg(&[x]))
    }

    /// Moves the zero frequency to the grid centre (`inverse` undoes it).
    pub fn fftshift(&self, x: Var, inverse: bool) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (_, h, w) = last2(xv.shape(), "fftshift")?;
            let (dy, dx) = if inverse { (h - h / 2, w - w / 2) } else { (h / 2, w / 2) };
            Tensor::new(xv.shape(), fft::roll_planes(xv.data(), h, w, dy, dx))?
        };
        self.push("fftshift", v, Op::FftShift { x, inverse }, self.rg(&[x]))
    }

    /// Complex magnitude `[.., 2, H, W] -> [.., H, W]`, smoothed at the origin.
    pub fn cabs(&self, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (blocks, h, w) = complex_dims(xv.shape(), "cabs")?;
            let plane = h * w;
            let eps = T::c(CABS_EPS);
            let mut out = Vec::with_capacity(blocks * plane);
            for blk in xv.data().chunks(2 * plane) {
                let (re, im) = blk.split_at(plane);
                out.extend(re.iter().zip(im).map(|(&a, &b)| (a * a + b * b + eps).sqrt()));
            }
            let s = xv.shape();
            let mut shape = s[..s.len() - 3].to_vec();
            shape.extend_from_slice(&[h, w]);
            Tensor::new(&shape, out)?
        };
        self.push("cabs", v, Op::CAbs(x), self.rg(&[x]))
    }

    /// Mean over the second-to-last axis: `[.., R, C] -> [.., C]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (lead, r, c) = last2(xv.shape(), "mean_rows")?;
            let inv = T::c(1.0 / r as f64);
            let mut out = vec![T::zero(); lead * c];
            for (src, dst) in xv.data().chunks(r * c).zip(out.chunks_mut(c)) {
                for row in src.chunks(c) {
                    for (d, &s) in dst.iter_mut().zip(row) {
                        *d += s;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            let s = xv.shape();
            let mut shape = s[..s.len() - 2].to_vec();
            shape.push(c);
            Tensor::new(&shape, out)?
        };
        self.push("mean_rows", v, Op::MeanRows(x), self.rg(&[x]))
    }

    /// Repeats a `[C]` vector into `[rows, C]`.
    pub fn expand_rows(&self, x: Var, rows: usize) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 1 {
                return Err(shape_err("expand_rows", format!("need rank 1, got {:?}", xv.shape())));
            }
            let mut out = Vec::with_capacity(rows * xv.len());
            for _ in 0..rows {
                out.extend_from_slice(xv.data());
            }
            Tensor::new(&[rows, xv.len()], out)?
        };
        self.push("expand_rows", v, Op::ExpandRows(x), self.rg(&[x]))
    }

    /// `y ⊙ m` with a real `[H, W]` mask broadcast over both complex channels.
    pub fn mask_complex(&self, y: Var, m: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let (yv, mv) = (&nodes[y.0].value, &nodes[m.0].value);
            let (_, h, w) = complex_dims(yv.shape(), "mask_complex")?;
            if mv.shape() != [h, w] {
                return Err(shape_err(
                    "mask_complex",
                    format!("mask {:?} vs grid {h}x{w}", mv.shape()),
                ));
            }
            let mut out = yv.clone();
            for plane in out.data_mut().chunks_mut(h * w) {
                for (e, &mm) in plane.iter_mut().zip(mv.data()) {
                    *e *= mm;
                }
            }
            out
        };
        self.push("mask_complex", v, Op::MaskComplex { y, m }, self.rg(&[y, m]))
    }

    /// Straight-through Bernoulli draw `m_prev + 1[u <= p]` restricted to
    /// `eligible` indices. The backward pass treats the indicator as
    /// `sigmoid(slope·(p − u))`.
    pub fn straight_through(
        &self,
        p: Var,
        m_prev: Var,
        u: &[T],
        eligible: &[bool],
        slope: f64,
        forward: DrawForward<'_>,
    ) -> Result<Var> {
        let slope = T::c(slope);
        let v = {
            let nodes = self.nodes.borrow();
            let (pv, mv) = (&nodes[p.0].value, &nodes[m_prev.0].value);
            if pv.shape() != mv.shape() || u.len() != pv.len() || eligible.len() != pv.len() {
                return Err(shape_err(
                    "straight_through",
                    format!("p {:?}, m_prev {:?}, u {}, eligible {}", pv.shape(), mv.shape(), u.len(), eligible.len()),
                ));
            }
            let mut out = mv.clone();
            match forward {
                DrawForward::Hard(delta) => {
                    if delta.len() != pv.len() {
                        return Err(shape_err("straight_through", "increment length"));
                    }
                    for (o, &d) in out.data_mut().iter_mut().zip(delta) {
                        if d {
                            *o += T::one();
                        }
                    }
                }
                DrawForward::Relaxed => {
                    for i in 0..pv.len() {
                        if eligible[i] {
                            out.data_mut()[i] += sigmoid(slope * (pv.data()[i] - u[i]));
                        }
                    }
                }
            }
            out
        };
        self.note_branches(eligible.iter().map(|&e| e as u64));
        self.push(
            "straight_through",
            v,
            Op::StraightThrough {
                p,
                m_prev,
                u: u.to_vec(),
                eligible: eligible.to_vec(),
                slope,
            },
            self.rg(&[p, m_prev]),
        )
    }

    /// Mean windowed SSIM of `x` against the constant `target` (both
    /// `[.., H, W]`); the data range is the per-plane maximum of `target`.
    pub fn ssim(&self, x: Var, target: &Tensor<T>, params: &SsimParams) -> Result<Var> {
        let (v, aux) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape() != target.shape() {
                return Err(shape_err("ssim", format!("{:?} vs {:?}", xv.shape(), target.shape())));
            }
            let (planes, h, w) = last2(xv.shape(), "ssim")?;
            if h < params.window || w < params.window {
                return Err(arg_err(
                    "ssim",
                    format!("image {h}x{w} smaller than window {}", params.window),
                ));
            }
            let n = h * w;
            let mut total = T::zero();
            let mut aux = Vec::with_capacity(planes);
            for (xs, ys) in xv.data().chunks(n).zip(target.data().chunks(n)) {
                let range = ys.iter().copied().fold(T::neg_infinity(), T::max);
                if !(range > T::zero()) {
                    return Err(arg_err("ssim", "data range (target maximum) must be > 0"));
                }
                let (s, a) = ssim::plane_forward(xs, ys, h, w, range, params);
                total += s;
                aux.push(a);
            }
            (Tensor::scalar(total / T::c(planes as f64)), aux)
        };
        self.push(
            "ssim",
            v,
            Op::Ssim {
                x,
                target: target.clone(),
                aux,
                window: params.window,
            },
            self.rg(&[x]),
        )
    }

    /// Linearly interpolated `q`-th percentile (0..=100) of the complex
    /// magnitudes of a `[.., 2, H, W]` tensor.
    pub fn percentile_abs(&self, x: Var, q: f64) -> Result<Var> {
        if !(0.0..=100.0).contains(&q) {
            return Err(arg_err("percentile_abs", format!("q = {q} outside [0, 100]")));
        }
        let (v, picks) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (blocks, h, w) = complex_dims(xv.shape(), "percentile_abs")?;
            let plane = h * w;
            let mut mags: Vec<(T, usize)> = Vec::with_capacity(blocks * plane);
            for (bi, blk) in xv.data().chunks(2 * plane).enumerate() {
                let (re, im) = blk.split_at(plane);
                for i in 0..plane {
                    mags.push(((re[i] * re[i] + im[i] * im[i]).sqrt(), bi * plane + i));
                }
            }
            mags.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            let pos = q / 100.0 * (mags.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = T::c(pos - lo as f64);
            let val = mags[lo].0 + frac * (mags[hi].0 - mags[lo].0);
            let mut picks = vec![(mags[lo].1, T::one() - frac)];
            if hi != lo {
                picks.push((mags[hi].1, frac));
            }
            (Tensor::scalar(val), picks)
        };
        self.note_branches(picks.iter().map(|&(i, _)| i as u64));
        self.push("percentile_abs", v, Op::PercentileAbs { x, picks }, self.rg(&[x]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn want<T: Real>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let mapped = |x: Var, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        g.zip_map(val(x), f).expect("gradient shape")
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.map(|e| -e));
        }
        Op::Mul(a, b) => {
            if want(nodes, *a) {
                acc(nodes, grads, *a, mapped(*b, &|gg, bb| gg * bb));
            }
            if want(nodes, *b) {
                acc(nodes, grads, *b, mapped(*a, &|gg, aa| gg * aa));
            }
        }
        Op::MulConst(x, c) => {
            acc(nodes, grads, *x, g.zip_map(c, |gg, cc| gg * cc)?);
        }
        Op::Affine(x, a) => {
            let a = *a;
            acc(nodes, grads, *x, g.map(|e| e * a));
        }
        Op::DivScalar(x, s) => {
            let sv = val(*s).item();
            if want(nodes, *x) {
                acc(nodes, grads, *x, g.map(|e| e / sv));
            }
            if want(nodes, *s) {
                let dot: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                acc(nodes, grads, *s, Tensor::scalar(-dot / (sv * sv)).reshape(val(*s).shape())?);
            }
        }
        Op::MulScalar(x, s) => {
            let sv = val(*s).item();
            if want(nodes, *x) {
                acc(nodes, grads, *x, g.map(|e| e * sv));
            }
            if want(nodes, *s) {
                let dot: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                acc(nodes, grads, *s, Tensor::scalar(dot).reshape(val(*s).shape())?);
            }
        }
        Op::Sum(x) => {
            acc(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item()));
        }
        Op::Mean(x) => {
            let n = T::c(val(*x).len() as f64);
            acc(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item() / n));
        }
        Op::Max(x, idx) => {
            let mut t = Tensor::zeros(val(*x).shape());
            t.data_mut()[*idx] = g.item();
            acc(nodes, grads, *x, t);
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, g.reshape(val(*x).shape())?);
        }
        Op::Linear { x, w, b, batch } => {
            let (xv, wv) = (val(*x), val(*w));
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            if want(nodes, *x) {
                let mut gx = vec![T::zero(); batch * din];
                gemm(false, true, *batch, dout, din, g.data(), wv.data(), T::zero(), &mut gx);
                acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            if want(nodes, *w) {
                let mut gw = vec![T::zero(); din * dout];
                gemm(true, false, din, *batch, dout, xv.data(), g.data(), T::zero(), &mut gw);
                acc(nodes, grads, *w, Tensor::new(wv.shape(), gw)?);
            }
            if want(nodes, *b) {
                let mut gb = vec![T::zero(); dout];
                for row in g.data().chunks(dout) {
                    for (d, &e) in gb.iter_mut().zip(row) {
                        *d += e;
                    }
                }
                acc(nodes, grads, *b, Tensor::new(&[dout], gb)?);
            }
        }
        Op::Conv2d { x, k, geom } => {
            let (gx, gk) = conv::backward(val(*x), val(*k), g, geom, want(nodes, *x), want(nodes, *k));
            if let Some(gx) = gx {
                acc(nodes, grads, *x, gx);
            }
            if let Some(gk) = gk {
                acc(nodes, grads, *k, gk);
            }
        }
        Op::ChannelBias(x, b) => {
            acc(nodes, grads, *x, g.clone());
            if want(nodes, *b) {
                let s = g.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks(plane).enumerate() {
                    gb[i % c] += chunk.iter().copied().sum::<T>();
                }
                acc(nodes, grads, *b, Tensor::new(&[c], gb)?);
            }
        }
        Op::Relu(x) => {
            acc(nodes, grads, *x, mapped(*x, &|gg, xx| if xx > T::zero() { gg } else { T::zero() }));
        }
        Op::Softplus(x) => {
            acc(nodes, grads, *x, mapped(*x, &|gg, xx| gg * sigmoid(xx)));
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            acc(nodes, grads, *x, g.zip_map(y, |gg, yy| gg * yy * (T::one() - yy))?);
        }
        Op::Log1p(x) => {
            acc(nodes, grads, *x, mapped(*x, &|gg, xx| gg / (T::one() + xx)));
        }
        Op::SignedLog1p(x) => {
            acc(nodes, grads, *x, mapped(*x, &|gg, xx| gg / (T::one() + xx.abs())));
        }
        Op::InstanceNorm { x, inv_std } => {
            let y = &node.value;
            let s = y.shape();
            let n = s[s.len() - 2] * s[s.len() - 1];
            let tn = T::c(n as f64);
            let mut gx = vec![T::zero(); y.len()];
            for (pi, ((gp, yp), dst)) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.chunks_mut(n))
                .enumerate()
            {
                let mg = gp.iter().copied().sum::<T>() / tn;
                let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / tn;
                let is = inv_std[pi];
                for i in 0..n {
                    dst[i] = is * (gp[i] - mg - yp[i] * mgy);
                }
            }
            acc(nodes, grads, *x, Tensor::new(val(*x).shape(), gx)?);
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let (_, h, w) = last2(xv.shape(), "upsample2x")?;
            let mut gx = vec![T::zero(); xv.len()];
            for (src, dst) in g.data().chunks(4 * h * w).zip(gx.chunks_mut(h * w)) {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                    }
                }
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
        Op::AvgPool2x(x) => {
            let xv = val(*x);
            let (_, h, w) = last2(xv.shape(), "avgpool2x")?;
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::c(0.25);
            let mut gx = vec![T::zero(); xv.len()];
            for (src, dst) in g.data().chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = src[(i / 2) * wo + j / 2] * quarter;
                    }
                }
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
        Op::Concat(parts) => {
            let s = g.shape();
            let (n, total_c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut offset = 0;
            for p in parts {
                let ps = val(*p).shape();
                let c = ps[1];
                if want(nodes, *p) {
                    let mut gp = Vec::with_capacity(n * c * hw);
                    for b in 0..n {
                        let start = (b * total_c + offset) * hw;
                        gp.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    acc(nodes, grads, *p, Tensor::new(ps, gp)?);
                }
                offset += c;
            }
        }
        Op::Fft2 { x, inverse } => {
            let (_, h, w) = complex_dims(g.shape(), "fft2")?;
            let mut gx = g.clone();
            fft::fft_2d_blocks(gx.data_mut(), h, w, !inverse);
            acc(nodes, grads, *x, gx);
        }
        Op::FftShift { x, inverse } => {
            let (_, h, w) = last2(g.shape(), "fftshift")?;
            let (dy, dx) = if *inverse { (h / 2, w / 2) } else { (h - h / 2, w - w / 2) };
            acc(nodes, grads, *x, Tensor::new(g.shape(), fft::roll_planes(g.data(), h, w, dy, dx))?);
        }
        Op::CAbs(x) => {
            let xv = val(*x);
            let (_, h, w) = complex_dims(xv.shape(), "cabs")?;
            let plane = h * w;
            let mut gx = vec![T::zero(); xv.len()];
            for ((blk, dst), (gp, yp)) in xv
                .data()
                .chunks(2 * plane)
                .zip(gx.chunks_mut(2 * plane))
                .zip(g.data().chunks(plane).zip(node.value.data().chunks(plane)))
            {
                for i in 0..plane {
                    let s = gp[i] / yp[i];
                    dst[i] = s * blk[i];
                    dst[plane + i] = s * blk[plane + i];
                }
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
        Op::MeanRows(x) => {
            let xv = val(*x);
            let (_, r, c) = last2(xv.shape(), "mean_rows")?;
            let inv = T::c(1.0 / r as f64);
            let mut gx = Vec::with_capacity(xv.len());
            for gc in g.data().chunks(c) {
                for _ in 0..r {
                    gx.extend(gc.iter().map(|&e| e * inv));
                }
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
        Op::ExpandRows(x) => {
            let c = val(*x).len();
            let mut gx = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for (d, &e) in gx.iter_mut().zip(row) {
                    *d += e;
                }
            }
            acc(nodes, grads, *x, Tensor::new(&[c], gx)?);
        }
        Op::MaskComplex { y, m } => {
            let (yv, mv) = (val(*y), val(*m));
            let plane = mv.len();
            if want(nodes, *y) {
                let mut gy = g.clone();
                for chunk in gy.data_mut().chunks_mut(plane) {
                    for (e, &mm) in chunk.iter_mut().zip(mv.data()) {
                        *e *= mm;
                    }
                }
                acc(nodes, grads, *y, gy);
            }
            if want(nodes, *m) {
                let mut gm = vec![T::zero(); plane];
                for (gc, yc) in g.data().chunks(plane).zip(yv.data().chunks(plane)) {
                    for i in 0..plane {
                        gm[i] += gc[i] * yc[i];
                    }
                }
                acc(nodes, grads, *m, Tensor::new(mv.shape(), gm)?);
            }
        }
        Op::StraightThrough {
            p,
            m_prev,
            u,
            eligible,
            slope,
        } => {
            if want(nodes, *p) {
                let pv = val(*p);
                let mut gp = vec![T::zero(); pv.len()];
                for i in 0..pv.len() {
                    if eligible[i] {
                        let s = sigmoid(*slope * (pv.data()[i] - u[i]));
                        gp[i] = g.data()[i] * *slope * s * (T::one() - s);
                    }
                }
                acc(nodes, grads, *p, Tensor::new(pv.shape(), gp)?);
            }
            acc(nodes, grads, *m_prev, g.clone());
        }
        Op::Ssim {
            x,
            target,
            aux,
            window,
        } => {
            let xv = val(*x);
            let (planes, h, w) = last2(xv.shape(), "ssim")?;
            let n = h * w;
            let up = g.item() / T::c(planes as f64);
            let mut gx = Vec::with_capacity(xv.len());
            for ((xs, ys), a) in xv.data().chunks(n).zip(target.data().chunks(n)).zip(aux) {
                gx.extend(ssim::plane_backward(xs, ys, h, w, a, *window, up));
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
        Op::PercentileAbs { x, picks } => {
            let xv = val(*x);
            let (_, h, w) = complex_dims(xv.shape(), "percentile_abs")?;
            let plane = h * w;
            let mut gx = vec![T::zero(); xv.len()];
            for &(flat, weight) in picks {
                let (blk, i) = (flat / plane, flat % plane);
                let re_i = blk * 2 * plane + i;
                let im_i = re_i + plane;
                let (re, im) = (xv.data()[re_i], xv.data()[im_i]);
                let mag = (re * re + im * im).sqrt();
                if mag > T::zero() {
                    gx[re_i] += g.item() * weight * re / mag;
                    gx[im_i] += g.item() * weight * im / mag;
                }
            }
            acc(nodes, grads, *x, Tensor::new(xv.shape(), gx)?);
        }
    }
    Ok(())
}
