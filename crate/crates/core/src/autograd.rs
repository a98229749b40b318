//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] without copying; [`Graph::backward`]
//! returns the gradients, which the caller folds into the store with
//! [`ParamStore::accumulate`]. Forward passes over a shared store may run
//! concurrently, each with its own graph.

use crate::error::{Error, Result};
use crate::fft;
use crate::kernels::{self, ConvGeom, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise functions with a closed-form derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    /// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    SmoothL1,
    /// `max(x, lo)`.
    ClampMin(f64),
    /// Hard clamp; zero gradient outside `(lo, hi)`.
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Hard clamp forward, identity gradient inside `[lo - margin, hi + margin]`.
    StraightThroughClamp {
        lo: f64,
        hi: f64,
        margin: f64,
    },
    /// CIE lightness companding function.
    LabF,
    /// Inverse of [`Unary::LabF`].
    LabFInv,
}

/// Threshold of the piecewise CIE companding function.
pub const LAB_DELTA: f64 = 6.0 / 29.0;

pub fn lab_f(t: f64) -> f64 {
    if t > LAB_DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
    }
}

pub fn lab_f_inv(u: f64) -> f64 {
    if u > LAB_DELTA {
        u * u * u
    } else {
        3.0 * LAB_DELTA * LAB_DELTA * (u - 4.0 / 29.0)
    }
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::SmoothL1 => "smooth_l1",
            Unary::ClampMin(_) => "clamp_min",
            Unary::Clamp { .. } => "clamp",
            Unary::StraightThroughClamp { .. } => "st_clamp",
            Unary::LabF => "lab_f",
            Unary::LabFInv => "lab_f_inv",
        }
    }

    pub fn eval<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        match self {
            Unary::Relu => x.max(zero),
            Unary::LeakyRelu(s) => {
                if x > zero {
                    x
                } else {
                    x * T::of(s)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::SmoothL1 => {
                let a = x.abs();
                if a < T::one() {
                    T::of(0.5) * x * x
                } else {
                    a - T::of(0.5)
                }
            }
            Unary::ClampMin(lo) => x.max(T::of(lo)),
            Unary::Clamp { lo, hi } | Unary::StraightThroughClamp { lo, hi, .. } => {
                x.max(T::of(lo)).min(T::of(hi))
            }
            Unary::LabF => {
                let d3 = T::of(LAB_DELTA.powi(3));
                if x > d3 {
                    x.cbrt()
                } else {
                    x / T::of(3.0 * LAB_DELTA * LAB_DELTA) + T::of(4.0 / 29.0)
                }
            }
            Unary::LabFInv => {
                if x > T::of(LAB_DELTA) {
                    x * x * x
                } else {
                    T::of(3.0 * LAB_DELTA * LAB_DELTA) * (x - T::of(4.0 / 29.0))
                }
            }
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        let (zero, one) = (T::zero(), T::one());
        let sign = |v: T| {
            if v > zero {
                one
            } else if v < zero {
                -one
            } else {
                zero
            }
        };
        match self {
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::LeakyRelu(s) => {
                if x > zero {
                    one
                } else {
                    T::of(s)
                }
            }
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Exp => y,
            Unary::Ln => one / x,
            Unary::Sqrt => T::of(0.5) / y,
            Unary::Abs => sign(x),
            Unary::Square => x + x,
            Unary::SmoothL1 => {
                if x.abs() < one {
                    x
                } else {
                    sign(x)
                }
            }
            Unary::ClampMin(lo) => {
                if x > T::of(lo) {
                    one
                } else {
                    zero
                }
            }
            Unary::Clamp { lo, hi } => {
                if x > T::of(lo) && x < T::of(hi) {
                    one
                } else {
                    zero
                }
            }
            Unary::StraightThroughClamp { lo, hi, margin } => {
                if x >= T::of(lo - margin) && x <= T::of(hi + margin) {
                    one
                } else {
                    zero
                }
            }
            Unary::LabF => {
                if x > T::of(LAB_DELTA.powi(3)) {
                    one / (T::of(3.0) * y * y)
                } else {
                    one / T::of(3.0 * LAB_DELTA * LAB_DELTA)
                }
            }
            Unary::LabFInv => {
                if x > T::of(LAB_DELTA) {
                    T::of(3.0) * x * x
                } else {
                    T::of(3.0 * LAB_DELTA * LAB_DELTA)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Scale(Var, T),
    AddScalar(Var),
    AddLast(Var, Var),
    MulLast(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        probs: Option<Vec<T>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv(Var, Var, ConvGeom),
    Deconv(Var, Var, ConvGeom),
    Depthwise(Var, Var),
    Reshape(Var),
    NarrowLast(Var, usize),
    ConcatLast(Vec<Var>),
    Fft2 {
        x: Var,
        inverse: bool,
    },
    ReflectPad(Var),
    Crop(Var),
    SoftHistogram {
        x: Var,
        bins: usize,
        bandwidth: f64,
    },
    FilterValid {
        x: Var,
        taps: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Unary(_, u) => u.name(),
            Op::Binary(_, _, b) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::AddLast(..) => "add_bias",
            Op::MulLast(..) => "mul_channels",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "global_avg_pool",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax_rows",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv(..) => "conv2d",
            Op::Deconv(..) => "deconv2d",
            Op::Depthwise(..) => "depthwise_conv2d",
            Op::Reshape(_) => "reshape",
            Op::NarrowLast(..) => "narrow",
            Op::ConcatLast(_) => "concat",
            Op::Fft2 { inverse: false, .. } => "fft2",
            Op::Fft2 { inverse: true, .. } => "ifft2",
            Op::ReflectPad(_) => "reflect_pad",
            Op::Crop(_) => "crop",
            Op::SoftHistogram { .. } => "soft_histogram",
            Op::FilterValid { .. } => "filter_valid",
        }
    }
}

struct Node<T: Scalar> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A forward-only graph; attention keeps no score matrices.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// First recorded value containing NaN or infinity, described by op
    /// name, node index and shape.
    pub fn first_non_finite(&self) -> Option<String> {
        (0..self.nodes.len()).find_map(|i| {
            let v = self.value(Var(i));
            (!v.is_finite()).then(|| {
                let what = match &self.nodes[i].op {
                    Op::Param(id) => format!("parameter `{}`", self.params.get(*id).name),
                    op => format!("output of {}", op.name()),
                };
                format!("{what} (node {i}, shape {:?})", v.shape())
            })
        })
    }

    // ---- elementwise ----

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| f.eval(v));
        self.push(out, Op::Unary(x, f), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("elementwise", va, vb)?;
        let out = match op {
            Binary::Add => va.zip_map(vb, |x, y| x + y),
            Binary::Sub => va.zip_map(vb, |x, y| x - y),
            Binary::Mul => va.zip_map(vb, |x, y| x * y),
            Binary::Div => va.zip_map(vb, |x, y| x / y),
        };
        Ok(self.push(out, Op::Binary(a, b, op), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    fn last_dim_operand(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        if self.value(b).len() != c {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} does not broadcast over {:?}",
                    self.shape(b),
                    self.shape(x)
                ),
            ));
        }
        Ok(c)
    }

    /// `x + b` where `b` holds one value per channel (last dimension).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.last_dim_operand("add_bias", x, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv[i % c];
        }
        Ok(self.push(out, Op::AddLast(x, b), &[x, b]))
    }

    /// `x * s` where `s` holds one value per channel (last dimension).
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.last_dim_operand("mul_channels", x, s)?;
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * sv[i % c];
        }
        Ok(self.push(out, Op::MulLast(x, s), &[x, s]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Per-channel mean over every leading position: `H x W x C -> 1 x 1 x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = *v.shape().last().unwrap();
        let rows = v.len() / c;
        let mut acc = vec![T::zero(); c];
        for r in 0..rows {
            for (a, &x) in acc.iter_mut().zip(&v.data()[r * c..][..c]) {
                *a = *a + x;
            }
        }
        let inv = T::one() / T::of(rows as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let mut shape = vec![1; v.rank().max(1) - 1];
        shape.push(c);
        let out = Tensor::new(&shape, acc).expect("pool shape");
        self.push(out, Op::MeanRows(x), &[x])
    }

    // ---- linear algebra ----

    /// Matrix product of `N x D` and `D x D2`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Bias-free fully connected layer.
    pub fn linear(&mut self, x: Var, weight: Var) -> Result<Var> {
        self.matmul(x, weight).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("linear", detail),
            e => e,
        })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let out = Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r]);
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = *out.shape().last().unwrap();
        for row in out.data_mut().chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `softmax(q k^T * scale) v` for `N x d` matrices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        let (nk, dk) = self.value(k).dims2()?;
        let (nv, dv) = self.value(v).dims2()?;
        if nk != n || nv != n || dk != d {
            return Err(Error::shape(
                "attention",
                format!("q {n}x{d}, k {nk}x{dk}, v {nv}x{dv}"),
            ));
        }
        let scale = T::of(scale);
        let keep = self.grad_enabled && [q, k, v].iter().any(|x| self.nodes[x.0].requires_grad);
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            dv,
            scale,
            keep,
        );
        let out = Tensor::new(&[n, dv], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Normalization over the last dimension followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.last_dim_operand("layer_norm", x, gain)?;
        self.last_dim_operand("layer_norm", x, bias)?;
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            c,
            T::of(eps),
        );
        let out = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- convolutions ----

    /// 2D convolution of `H x W x Cin` with a `kh x kw x Cin x Cout` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (h, w, cin) = self.value(x).hwc()?;
        let (kh, kw, kcin, cout) = kernel_dims(self.shape(kernel))?;
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 || !(stride == 1 || stride == 2) {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} must be odd and stride 1 or 2, got {stride}"),
            ));
        }
        if padding == Padding::Valid && (h < kh || w < kw) {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {kh}x{kw}"),
            ));
        }
        let g = ConvGeom::conv((h, w, cin), (kh, kw, cout), stride, padding)
            .ok_or_else(|| Error::shape("conv2d", "empty output"))?;
        let out = kernels::conv2d(self.value(x).data(), self.value(kernel).data(), &g);
        let out = Tensor::new(&[g.oh, g.ow, cout], out)?;
        Ok(self.push(out, Op::Conv(x, kernel, g), &[x, kernel]))
    }

    /// Transposed convolution multiplying each spatial size by `stride`.
    pub fn deconv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (h, w, cin) = self.value(x).hwc()?;
        let (kh, kw, kcin, cout) = kernel_dims(self.shape(kernel))?;
        if kcin != cin {
            return Err(Error::shape(
                "deconv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::shape(
                "deconv2d",
                format!("kernel {kh}x{kw}, stride {stride}"),
            ));
        }
        let g = ConvGeom::deconv((h, w, cin), (kh, kw, cout), stride);
        let out = kernels::deconv2d(self.value(x).data(), self.value(kernel).data(), &g);
        let out = Tensor::new(&[g.oh, g.ow, cout], out)?;
        Ok(self.push(out, Op::Deconv(x, kernel, g), &[x, kernel]))
    }

    /// Same-padded depthwise convolution with a `kh x kw x C` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let (kh, kw, kc) = match self.shape(kernel) {
            &[a, b, c] => (a, b, c),
            s => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("kernel shape {s:?}"),
                ))
            }
        };
        if kc != c || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {h}x{w}x{c}, kernel {kh}x{kw}x{kc}"),
            ));
        }
        let out = kernels::depthwise(
            self.value(x).data(),
            self.value(kernel).data(),
            (h, w, c),
            (kh, kw),
        );
        let out = Tensor::new(&[h, w, c], out)?;
        Ok(self.push(out, Op::Depthwise(x, kernel), &[x, kernel]))
    }

    // ---- layout ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Channels `[start, start + len)` of the last dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of {c}", start + len),
            ));
        }
        let out = self.value(x).narrow_last(start, len);
        Ok(self.push(out, Op::NarrowLast(x, start), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_last(&values)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Reflection padding at the bottom and right edges. Pads longer than
    /// the image keep reflecting back and forth.
    pub fn reflect_pad(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let (oh, ow) = (h + bottom, w + right);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            let sy = reflect(y, h);
            for xx in 0..ow {
                let sx = reflect(xx, w);
                out.extend_from_slice(&src[(sy * w + sx) * c..][..c]);
            }
        }
        let out = Tensor::new(&[oh, ow, c], out)?;
        Ok(self.push(out, Op::ReflectPad(x), &[x]))
    }

    /// Top-left `h x w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (ih, iw, c) = self.value(x).hwc()?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(Error::shape("crop", format!("{h}x{w} from {ih}x{iw}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            out.extend_from_slice(&src[y * iw * c..][..w * c]);
        }
        let out = Tensor::new(&[h, w, c], out)?;
        Ok(self.push(out, Op::Crop(x), &[x]))
    }

    // ---- frequency domain ----

    /// 2D DFT of an `H x W x 2` (real, imaginary) field. The inverse includes
    /// the `1 / (H W)` normalization.
    pub fn fft2(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if c != 2 {
            return Err(Error::shape(
                "fft2",
                format!("expected H x W x 2 complex field, got {:?}", self.shape(x)),
            ));
        }
        let out = fft::transform_interleaved(self.value(x).data(), h, w, inverse);
        let out = Tensor::new(&[h, w, 2], out)?;
        Ok(self.push(out, Op::Fft2 { x, inverse }, &[x]))
    }

    // ---- loss helpers ----

    /// Per-channel Gaussian soft histogram of `H x W x C` values, as a
    /// `C x bins` tensor whose rows sum to one. Each value spreads unit mass
    /// over bins with weights `exp(-((v - centre) / bandwidth)^2)`.
    pub fn soft_histogram(&mut self, x: Var, bins: usize, bandwidth: f64) -> Result<Var> {
        let (_, _, c) = self.value(x).hwc()?;
        if bins < 2 || bandwidth <= 0.0 {
            return Err(Error::Config(format!(
                "soft histogram needs >= 2 bins and positive bandwidth, got {bins} / {bandwidth}"
            )));
        }
        let xv = self.value(x).data();
        let p = xv.len() / c;
        let mut hist = vec![T::zero(); c * bins];
        let inv_p = T::one() / T::of(p as f64);
        let mut w = Vec::new();
        for (i, &v) in xv.iter().enumerate() {
            let ch = i % c;
            let (lo, _) = hist_weights(v, bins, bandwidth, &mut w);
            let z: T = w.iter().copied().sum();
            for (j, &wn) in w.iter().enumerate() {
                let slot = &mut hist[ch * bins + lo + j];
                *slot = *slot + wn / z * inv_p;
            }
        }
        let out = Tensor::new(&[c, bins], hist)?;
        Ok(self.push(out, Op::SoftHistogram { x, bins, bandwidth }, &[x]))
    }

    /// Valid-mode separable filtering of each channel with `taps x taps`.
    pub fn filter_valid(&mut self, x: Var, taps: &[f64]) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let k = taps.len();
        if h < k || w < k {
            return Err(Error::shape(
                "filter_valid",
                format!("image {h}x{w} smaller than {k}x{k} window"),
            ));
        }
        let taps: Vec<T> = taps.iter().map(|&t| T::of(t)).collect();
        let out = separable_valid(self.value(x).data(), (h, w, c), &taps);
        let out = Tensor::new(&[h - k + 1, w - k + 1, c], out)?;
        Ok(self.push(out, Op::FilterValid { x, taps }, &[x]))
    }

    // ---- backward ----

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.nodes[i].value.as_ref();
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let yv = out.unwrap();
                let d = Tensor::from_fn(xv.shape(), |j| {
                    g.data()[j] * f.derivative(xv.data()[j], yv.data()[j])
                });
                acc(*x, d);
            }
            Op::Binary(a, b, op) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                match op {
                    Binary::Add => {
                        acc(*a, g.clone());
                        acc(*b, g.clone());
                    }
                    Binary::Sub => {
                        acc(*a, g.clone());
                        acc(*b, g.map(|v| -v));
                    }
                    Binary::Mul => {
                        if self.wants(*a) {
                            acc(*a, g.zip_map(vb, |x, y| x * y));
                        }
                        if self.wants(*b) {
                            acc(*b, g.zip_map(va, |x, y| x * y));
                        }
                    }
                    Binary::Div => {
                        if self.wants(*a) {
                            acc(*a, g.zip_map(vb, |x, y| x / y));
                        }
                        if self.wants(*b) {
                            let y = out.unwrap();
                            let d = Tensor::from_fn(vb.shape(), |j| {
                                -g.data()[j] * y.data()[j] / vb.data()[j]
                            });
                            acc(*b, d);
                        }
                    }
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::AddLast(x, b) => {
                acc(*x, g.clone());
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let mut d = vec![T::zero(); c];
                    for (j, &gv) in g.data().iter().enumerate() {
                        d[j % c] = d[j % c] + gv;
                    }
                    acc(*b, Tensor::new(self.shape(*b), d)?);
                }
            }
            Op::MulLast(x, s) => {
                let sv = self.value(*s).data();
                let c = sv.len();
                if self.wants(*x) {
                    acc(*x, Tensor::from_fn(g.shape(), |j| g.data()[j] * sv[j % c]));
                }
                if self.wants(*s) {
                    let xv = self.value(*x).data();
                    let mut d = vec![T::zero(); c];
                    for (j, (&gv, &xx)) in g.data().iter().zip(xv).enumerate() {
                        d[j % c] = d[j % c] + gv * xx;
                    }
                    acc(*s, Tensor::new(self.shape(*s), d)?);
                }
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0])),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::MeanRows(x) => {
                let shape = self.shape(*x);
                let c = *shape.last().unwrap();
                let rows = self.value(*x).len() / c;
                let inv = T::one() / T::of(rows as f64);
                acc(*x, Tensor::from_fn(shape, |j| g.data()[j % c] * inv));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.wants(*a) {
                    let mut d = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g.data(), self.value(*b).data(), m, n, k, &mut d);
                    acc(*a, Tensor::new(&[m, k], d)?);
                }
                if self.wants(*b) {
                    let mut d = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), g.data(), m, k, n, &mut d);
                    acc(*b, Tensor::new(&[k, n], d)?);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2()?;
                // g is c x r
                acc(
                    *x,
                    Tensor::from_fn(&[r, c], |j| g.data()[(j % c) * r + j / c]),
                );
            }
            Op::Softmax(x) => {
                let y = out.unwrap();
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(y.data().chunks_exact(c))
                    .zip(g.data().chunks_exact(c))
                {
                    let dotp: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                acc(*x, Tensor::new(y.shape(), d)?);
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let probs = probs.as_ref().ok_or_else(|| {
                    Error::Usage("attention recorded without probabilities".into())
                })?;
                let (n, d) = self.value(*q).dims2()?;
                let (_, dv) = self.value(*v).dims2()?;
                let mut gq = self.wants(*q).then(|| vec![T::zero(); n * d]);
                let mut gk = self.wants(*k).then(|| vec![T::zero(); n * d]);
                let mut gv = self.wants(*v).then(|| vec![T::zero(); n * dv]);
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    n,
                    d,
                    dv,
                    *scale,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                if let Some(t) = gq {
                    acc(*q, Tensor::new(&[n, d], t)?);
                }
                if let Some(t) = gk {
                    acc(*k, Tensor::new(&[n, d], t)?);
                }
                if let Some(t) = gv {
                    acc(*v, Tensor::new(&[n, dv], t)?);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.value(*gain).len();
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xhat.len()]);
                let mut gg = self.wants(*gain).then(|| vec![T::zero(); c]);
                let mut gb = self.wants(*bias).then(|| vec![T::zero(); c]);
                kernels::layer_norm_backward(
                    xhat,
                    rstd,
                    self.value(*gain).data(),
                    g.data(),
                    c,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(t) = gx {
                    acc(*x, Tensor::new(self.shape(*x), t)?);
                }
                if let Some(t) = gg {
                    acc(*gain, Tensor::new(self.shape(*gain), t)?);
                }
                if let Some(t) = gb {
                    acc(*bias, Tensor::new(self.shape(*bias), t)?);
                }
            }
            Op::Conv(x, k, geom) | Op::Deconv(x, k, geom) => {
                let is_conv = matches!(self.nodes[i].op, Op::Conv(..));
                let (xv, kv) = (self.value(*x), self.value(*k));
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut gk = self.wants(*k).then(|| vec![T::zero(); kv.len()]);
                if is_conv {
                    kernels::conv2d_backward(
                        xv.data(),
                        kv.data(),
                        g.data(),
                        geom,
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                    );
                } else {
                    kernels::deconv2d_backward(
                        xv.data(),
                        kv.data(),
                        g.data(),
                        geom,
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                    );
                }
                if let Some(t) = gx {
                    acc(*x, Tensor::new(xv.shape(), t)?);
                }
                if let Some(t) = gk {
                    acc(*k, Tensor::new(kv.shape(), t)?);
                }
            }
            Op::Depthwise(x, k) => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let dims = xv.hwc()?;
                let ks = (kv.shape()[0], kv.shape()[1]);
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut gk = self.wants(*k).then(|| vec![T::zero(); kv.len()]);
                kernels::depthwise_backward(
                    xv.data(),
                    kv.data(),
                    g.data(),
                    dims,
                    ks,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(t) = gx {
                    acc(*x, Tensor::new(xv.shape(), t)?);
                }
                if let Some(t) = gk {
                    acc(*k, Tensor::new(kv.shape(), t)?);
                }
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x))?),
            Op::NarrowLast(x, start) => {
                let shape = self.shape(*x);
                let c = *shape.last().unwrap();
                let len = *g.shape().last().unwrap();
                let mut d = Tensor::zeros(shape);
                for (r, gr) in g.data().chunks_exact(len).enumerate() {
                    d.data_mut()[r * c + start..][..len].copy_from_slice(gr);
                }
                acc(*x, d);
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(self.value(p).len());
                        for gr in g.data().chunks_exact(total) {
                            d.extend_from_slice(&gr[off..off + w]);
                        }
                        acc(p, Tensor::new(self.shape(p), d)?);
                    }
                    off += w;
                }
            }
            Op::ReflectPad(x) => {
                let (h, w, c) = self.value(*x).hwc()?;
                let (oh, ow, _) = g.hwc()?;
                let mut d = vec![T::zero(); h * w * c];
                for y in 0..oh {
                    let sy = reflect(y, h);
                    for xx in 0..ow {
                        let sx = reflect(xx, w);
                        let src = &g.data()[(y * ow + xx) * c..][..c];
                        for (dv, &gv) in d[(sy * w + sx) * c..][..c].iter_mut().zip(src) {
                            *dv = *dv + gv;
                        }
                    }
                }
                acc(*x, Tensor::new(&[h, w, c], d)?);
            }
            Op::Crop(x) => {
                let (ih, iw, c) = self.value(*x).hwc()?;
                let (h, w, _) = g.hwc()?;
                let mut d = vec![T::zero(); ih * iw * c];
                for y in 0..h {
                    d[y * iw * c..][..w * c].copy_from_slice(&g.data()[y * w * c..][..w * c]);
                }
                acc(*x, Tensor::new(&[ih, iw, c], d)?);
            }
            Op::Fft2 { x, inverse } => {
                let (h, w, _) = g.hwc()?;
                // Adjoint of the unnormalized DFT is N times the normalized
                // inverse, and vice versa.
                let n = T::of((h * w) as f64);
                let mut d = fft::transform_interleaved(g.data(), h, w, !inverse);
                let s = if *inverse { T::one() / n } else { n };
                d.iter_mut().for_each(|v| *v = *v * s);
                acc(*x, Tensor::new(&[h, w, 2], d)?);
            }
            Op::SoftHistogram { x, bins, bandwidth } => {
                let xv = self.value(*x);
                let c = *xv.shape().last().unwrap();
                let p = xv.len() / c;
                let inv_p = T::one() / T::of(p as f64);
                let mut w = Vec::new();
                let d = Tensor::from_fn(xv.shape(), |j| {
                    let v = xv.data()[j];
                    let ch = j % c;
                    let (lo, inside) = hist_weights(v, *bins, *bandwidth, &mut w);
                    if !inside {
                        return T::zero();
                    }
                    let z: T = w.iter().copied().sum();
                    let mut dz = T::zero();
                    let mut gw = T::zero();
                    let mut gdw = T::zero();
                    for (n, &wn) in w.iter().enumerate() {
                        let centre = bin_centre::<T>(lo + n, *bins);
                        let dwn = wn * T::of(-2.0 / (bandwidth * bandwidth)) * (v - centre);
                        let gn = g.data()[ch * bins + lo + n];
                        dz = dz + dwn;
                        gw = gw + gn * wn;
                        gdw = gdw + gn * dwn;
                    }
                    inv_p * (gdw - gw * dz / z) / z
                });
                acc(*x, d);
            }
            Op::FilterValid { x, taps } => {
                let (h, w, c) = self.value(*x).hwc()?;
                let d = separable_valid_adjoint(g.data(), (h, w, c), taps);
                acc(*x, Tensor::new(&[h, w, c], d)?);
            }
        }
        Ok(())
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(
            "conv2d",
            format!("kernel must be kh x kw x cin x cout, got {shape:?}"),
        )),
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn bin_centre<T: Scalar>(n: usize, bins: usize) -> T {
    T::of((n as f64 + 0.5) / bins as f64)
}

/// Kernel weights of bins within six bandwidths of `v` (clamped to
/// `[0, 1]`). Returns the first bin index and whether `v` was inside.
fn hist_weights<T: Scalar>(v: T, bins: usize, bandwidth: f64, w: &mut Vec<T>) -> (usize, bool) {
    let inside = v >= T::zero() && v <= T::one();
    let vf = v.to_f64_lossy().clamp(0.0, 1.0);
    let reach = 6.0 * bandwidth;
    let lo = (((vf - reach) * bins as f64 - 0.5).ceil().max(0.0)) as usize;
    let hi = ((((vf + reach) * bins as f64 - 0.5).floor()) as usize).min(bins - 1);
    let vc = if inside { v } else { T::of(vf) };
    let inv_h = T::of(1.0 / bandwidth);
    w.clear();
    for n in lo..=hi.max(lo) {
        let d = (vc - bin_centre::<T>(n, bins)) * inv_h;
        w.push((-(d * d)).exp());
    }
    (lo, inside)
}

fn separable_valid<T: Scalar>(x: &[T], (h, w, c): (usize, usize, usize), taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow * c];
    for y in 0..h {
        for xo in 0..ow {
            let o = &mut tmp[(y * ow + xo) * c..][..c];
            for (a, &t) in taps.iter().enumerate() {
                let src = &x[(y * w + xo + a) * c..][..c];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov = *ov + t * sv;
                }
            }
        }
    }
    let mut out = vec![T::zero(); oh * ow * c];
    for yo in 0..oh {
        for (a, &t) in taps.iter().enumerate() {
            let src = &tmp[(yo + a) * ow * c..][..ow * c];
            for (ov, &sv) in out[yo * ow * c..][..ow * c].iter_mut().zip(src) {
                *ov = *ov + t * sv;
            }
        }
    }
    out
}

fn separable_valid_adjoint<T: Scalar>(
    g: &[T],
    (h, w, c): (usize, usize, usize),
    taps: &[T],
) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![T::zero(); h * ow * c];
    for yo in 0..oh {
        for (a, &t) in taps.iter().enumerate() {
            let dst = &mut tmp[(yo + a) * ow * c..][..ow * c];
            for (dv, &gv) in dst.iter_mut().zip(&g[yo * ow * c..][..ow * c]) {
                *dv = *dv + t * gv;
            }
        }
    }
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xo in 0..ow {
            let src = &tmp[(y * ow + xo) * c..][..c];
            for (a, &t) in taps.iter().enumerate() {
                let dst = &mut out[(y * w + xo + a) * c..][..c];
                for (dv, &sv) in dst.iter_mut().zip(src) {
                    *dv = *dv + t * sv;
                }
            }
        }
    }
    out
}
