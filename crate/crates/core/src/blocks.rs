//! Network building blocks: convolution layers, multi-head self-attention,
//! the U-shaped channel denoiser, squeeze-and-excite fusion and Fourier
//! branch processing.
//!
//! Blocks hold only parameter ids; their weights live in a [`ParamStore`].
//! Every `forward` is generic over the element type so the same block can
//! be evaluated in `f32` or checked in `f64`.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fft::fft_flops;
use crate::kernels::Padding;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LN_EPS: f64 = 1e-5;

fn zeros_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: String,
    shape: &[usize],
) -> Result<ParamId> {
    store.add(name, Tensor::zeros(shape))
}

/// Square-kernel convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let kernel = store.add(format!("{name}.weight"), init.conv(k, cin, cout))?;
        let bias = if bias {
            Some(zeros_param(store, format!("{name}.bias"), &[cout])?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            k,
            cin,
            cout,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let y = g.conv2d(x, k, self.stride, Padding::Same)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// Floating-point operations for an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_size(h, w);
        2 * (oh * ow * self.k * self.k * self.cin * self.cout) as u64
    }
}

/// Transposed convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(Self {
            kernel: store.add(format!("{name}.weight"), init.conv(k, cin, cout))?,
            bias: zeros_param(store, format!("{name}.bias"), &[cout])?,
            k,
            cin,
            cout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let y = g.deconv2d(x, k, 2)?;
        let b = g.param(self.bias);
        g.add_bias(y, b)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (h * w * self.k * self.k * self.cin * self.cout) as u64
    }
}

/// Multi-head self-attention over the pixels of an `H x W x C` map.
///
/// Each head projects its `C / k` channel slice with bias-free `d_k x d_k`
/// matrices. The concatenated head outputs go through a `C x C` projection
/// and a depthwise 3x3 positional encoding of the value tokens is added.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub dim: usize,
    pub heads: usize,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub pos: ParamId,
    pub max_tokens: usize,
    pub use_pos: bool,
}

/// Intermediate values of one [`Mhsa`] evaluation.
pub struct MhsaTrace {
    /// Concatenated head outputs before the output projection, `HW x C`.
    pub attended: Var,
    /// Per-head row-stochastic attention matrices, when requested.
    pub attention: Vec<Var>,
    pub out: Var,
}

impl Mhsa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: channel count {dim} is not divisible by {heads} heads"
            )));
        }
        let dk = dim / heads;
        let mut proj = |kind: &str| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.add(format!("{name}.{kind}{h}"), init.linear(dk, dk)))
                .collect()
        };
        let wq = proj("wq")?;
        let wk = proj("wk")?;
        let wv = proj("wv")?;
        Ok(Self {
            dim,
            heads,
            wq,
            wk,
            wv,
            wo: store.add(format!("{name}.wo"), init.linear(dim, dim))?,
            pos: store.add(format!("{name}.pos"), init.depthwise(3, dim))?,
            max_tokens,
            use_pos: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn check_tokens(&self, h: usize, w: usize) -> Result<()> {
        let n = h * w;
        if n > self.max_tokens {
            let factor = ((n as f64 / self.max_tokens as f64).sqrt()).ceil() as usize;
            return Err(Error::Resource {
                detail: format!(
                    "attention over {h}x{w} = {n} tokens exceeds the limit of {}",
                    self.max_tokens
                ),
                suggestion: format!(
                    "downscale the input by at least {factor}x per side or use tiled inference"
                ),
            });
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x, false)?.out)
    }

    /// Forward pass keeping intermediates. With `keep_attention` the score
    /// matrices are materialized as separate graph values.
    pub fn trace<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        keep_attention: bool,
    ) -> Result<MhsaTrace> {
        let (h, w, c) = g.value(x).hwc()?;
        if c != self.dim {
            return Err(Error::shape(
                "mhsa",
                format!("block expects {} channels, got {c}", self.dim),
            ));
        }
        self.check_tokens(h, w)?;
        let n = h * w;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let tokens = g.reshape(x, &[n, c])?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        let mut attention = Vec::new();
        for head in 0..self.heads {
            let xi = if self.heads == 1 {
                tokens
            } else {
                g.narrow(tokens, head * dk, dk)?
            };
            let wq = g.param(self.wq[head]);
            let wk = g.param(self.wk[head]);
            let wv = g.param(self.wv[head]);
            let q = g.linear(xi, wq)?;
            let k = g.linear(xi, wk)?;
            let v = g.linear(xi, wv)?;
            if keep_attention {
                let kt = g.transpose(k)?;
                let s = g.matmul(q, kt)?;
                let s = g.scale(s, scale);
                let p = g.softmax_rows(s);
                outs.push(g.matmul(p, v)?);
                attention.push(p);
            } else {
                outs.push(g.attention(q, k, v, scale)?);
            }
            values.push(v);
        }
        let attended = if self.heads == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        let wo = g.param(self.wo);
        let projected = g.linear(attended, wo)?;
        let projected = g.reshape(projected, &[h, w, c])?;
        let out = if self.use_pos {
            let v = if self.heads == 1 {
                values[0]
            } else {
                g.concat(&values)?
            };
            let v = g.reshape(v, &[h, w, c])?;
            let pk = g.param(self.pos);
            let pe = g.depthwise_conv2d(v, pk)?;
            g.add(projected, pe)?
        } else {
            projected
        };
        Ok(MhsaTrace {
            attended,
            attention,
            out,
        })
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let n = (h * w) as u64;
        let (c, dk) = (self.dim as u64, self.head_dim() as u64);
        let proj = 3 * n * dk * dk * self.heads as u64;
        let attn = 2 * n * n * dk * self.heads as u64;
        let out = n * c * c;
        let pos = if self.use_pos { n * 9 * c } else { 0 };
        2 * (proj + attn + out + pos)
    }
}

/// Four-scale U-shaped denoiser for one chroma plane (`H x W x 1`).
#[derive(Clone, Debug)]
pub struct CdBlock {
    pub entry: Conv,
    pub encoder: [Conv; 3],
    pub bottleneck: Mhsa,
    pub decoder: [Deconv; 3],
    pub refine: Conv,
    pub out: Conv,
    pub widths: [usize; 4],
}

/// Intermediate values of one [`CdBlock`] evaluation.
pub struct CdTrace {
    /// `F^(0..3)`: entry features and the three encoder outputs.
    pub encoder: [Var; 4],
    /// Decoder outputs after each skip addition, coarse to fine.
    pub decoder: [Var; 3],
    pub out: Var,
}

impl CdBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        base_width: usize,
        heads: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        let b = base_width;
        let widths = [b, 2 * b, 4 * b, 4 * b];
        let conv = |store: &mut ParamStore<T>, init: &mut Init, part: &str, cin, cout, stride| {
            Conv::new(
                store,
                init,
                &format!("{name}.{part}"),
                3,
                cin,
                cout,
                stride,
                true,
            )
        };
        let entry = conv(store, init, "entry", 1, widths[0], 1)?;
        let encoder = [
            conv(store, init, "enc1", widths[0], widths[1], 2)?,
            conv(store, init, "enc2", widths[1], widths[2], 2)?,
            conv(store, init, "enc3", widths[2], widths[3], 2)?,
        ];
        let bottleneck = Mhsa::new(
            store,
            init,
            &format!("{name}.mhsa"),
            widths[3],
            heads,
            max_tokens,
        )?;
        let decoder = [
            Deconv::new(
                store,
                init,
                &format!("{name}.dec1"),
                3,
                widths[3],
                widths[2],
            )?,
            Deconv::new(
                store,
                init,
                &format!("{name}.dec2"),
                3,
                widths[2],
                widths[1],
            )?,
            Deconv::new(
                store,
                init,
                &format!("{name}.dec3"),
                3,
                widths[1],
                widths[0],
            )?,
        ];
        let refine = conv(store, init, "refine", widths[0], widths[0], 1)?;
        let out = conv(store, init, "out", widths[0], 1, 1)?;
        Ok(Self {
            entry,
            encoder,
            bottleneck,
            decoder,
            refine,
            out,
            widths,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<CdTrace> {
        let (h, w, c) = g.value(x).hwc()?;
        if c != 1 {
            return Err(Error::shape("cd", format!("expects one plane, got {c}")));
        }
        let (ph, pw) = (h.next_multiple_of(8), w.next_multiple_of(8));
        let x = if (ph, pw) != (h, w) {
            g.reflect_pad(x, ph - h, pw - w)?
        } else {
            x
        };
        let act = |g: &mut Graph<'_, T>, v| g.leaky_relu(v, LEAKY_SLOPE);
        let f0 = self.entry.forward(g, x)?;
        let f0 = act(g, f0);
        let mut feats = [f0; 4];
        for (i, conv) in self.encoder.iter().enumerate() {
            let f = conv.forward(g, feats[i])?;
            feats[i + 1] = act(g, f);
        }
        let attn = self.bottleneck.forward(g, feats[3])?;
        let mut y = g.add(feats[3], attn)?;
        let mut decoder = [y; 3];
        for (i, deconv) in self.decoder.iter().enumerate() {
            let up = deconv.forward(g, y)?;
            let up = act(g, up);
            y = g.add(up, feats[2 - i])?;
            decoder[i] = y;
        }
        let r = self.refine.forward(g, y)?;
        let r = act(g, r);
        let o = self.out.forward(g, r)?;
        let mut out = g.tanh(o);
        if (ph, pw) != (h, w) {
            out = g.crop(out, h, w)?;
        }
        Ok(CdTrace {
            encoder: feats,
            decoder,
            out,
        })
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (h, w) = (h.next_multiple_of(8), w.next_multiple_of(8));
        let mut total = self.entry.flops(h, w);
        let (mut ch, mut cw) = (h, w);
        for conv in &self.encoder {
            total += conv.flops(ch, cw);
            (ch, cw) = conv.out_size(ch, cw);
        }
        total += self.bottleneck.flops(ch, cw);
        for deconv in &self.decoder {
            total += deconv.flops(ch, cw);
            (ch, cw) = (2 * ch, 2 * cw);
        }
        total + self.refine.flops(h, w) + self.out.flops(h, w)
    }
}

/// Squeeze-and-excite fusion with layer normalization and a residual path.
#[derive(Clone, Debug)]
pub struct Msef {
    pub gain: ParamId,
    pub bias: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub dim: usize,
    pub reduced: usize,
}

pub const MSEF_REDUCTION: usize = 4;

impl Msef {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        let reduced = (dim / MSEF_REDUCTION).max(1);
        Ok(Self {
            gain: store.add(format!("{name}.ln.gain"), Tensor::ones(&[dim]))?,
            bias: zeros_param(store, format!("{name}.ln.bias"), &[dim])?,
            w1: store.add(format!("{name}.w1"), init.linear(dim, reduced))?,
            w2: store.add(format!("{name}.w2"), init.linear(reduced, dim))?,
            dim,
            reduced,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let normed = g.layer_norm(x, gain, bias, LN_EPS)?;
        let pooled = g.global_avg_pool(normed);
        let pooled = g.reshape(pooled, &[1, self.dim])?;
        let w1 = g.param(self.w1);
        let squeezed = g.linear(pooled, w1)?;
        let squeezed = g.relu(squeezed);
        let w2 = g.param(self.w2);
        let excited = g.linear(squeezed, w2)?;
        let excited = g.tanh(excited);
        let recalibrated = g.mul_channels(normed, excited)?;
        g.add(recalibrated, x)
    }

    pub fn flops(&self, _h: usize, _w: usize) -> u64 {
        2 * 2 * (self.dim * self.reduced) as u64
    }
}

/// Learned filtering of a luminance plane's spectrum.
///
/// The spectrum is scaled by `1 / sqrt(HW)` before the real and imaginary
/// conv stacks and by `sqrt(HW)` after, so filter weights see unit-scale
/// values regardless of image size.
#[derive(Clone, Debug)]
pub struct Fbp {
    pub real: [Conv; 3],
    pub imag: [Conv; 3],
    pub width: usize,
}

pub const FBP_WIDTH: usize = 16;

impl Fbp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str) -> Result<Self> {
        let w = FBP_WIDTH;
        let mut stack = |part: &str| -> Result<[Conv; 3]> {
            let p = format!("{name}.{part}");
            Ok([
                Conv::new(store, init, &format!("{p}.reduce"), 3, 1, w, 1, true)?,
                Conv::new(store, init, &format!("{p}.refine"), 3, w, w, 1, true)?,
                Conv::new(store, init, &format!("{p}.expand"), 3, w, 1, 1, true)?,
            ])
        };
        let real = stack("real")?;
        let imag = stack("imag")?;
        Ok(Self {
            real,
            imag,
            width: w,
        })
    }

    fn stack<T: Scalar>(g: &mut Graph<'_, T>, convs: &[Conv; 3], x: Var) -> Result<Var> {
        let y = convs[0].forward(g, x)?;
        let y = g.leaky_relu(y, LEAKY_SLOPE);
        let y = convs[1].forward(g, y)?;
        convs[2].forward(g, y)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w, c) = g.value(x).hwc()?;
        if c != 1 {
            return Err(Error::shape("fbp", format!("expects one plane, got {c}")));
        }
        let n = (h * w) as f64;
        let zeros = g.input(Tensor::zeros(&[h, w, 1]));
        let field = g.concat(&[x, zeros])?;
        let spectrum = g.fft2(field, false)?;
        let spectrum = g.scale(spectrum, 1.0 / n.sqrt());
        let re = g.narrow(spectrum, 0, 1)?;
        let im = g.narrow(spectrum, 1, 1)?;
        let re = Self::stack(g, &self.real, re)?;
        let im = Self::stack(g, &self.imag, im)?;
        let filtered = g.concat(&[re, im])?;
        let filtered = g.scale(filtered, n.sqrt());
        let back = g.fft2(filtered, true)?;
        let real = g.narrow(back, 0, 1)?;
        g.add(real, x)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let convs: u64 = self
            .real
            .iter()
            .chain(&self.imag)
            .map(|c| c.flops(h, w))
            .sum();
        convs + 2 * fft_flops(h, w)
    }
}
