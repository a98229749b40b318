//! Finite-difference gradient checks for every tape operation, block,
//! color conversion and loss term. Shared with the acceptance suite.

use ltcf_core::blocks::{CdBlock, Conv, Deconv, Fbp, Mhsa, Msef};
use ltcf_core::colorspace::{from_net, to_net};
use ltcf_core::gradcheck::{check, CheckOptions, CheckReport};
use ltcf_core::kernels::Padding;
use ltcf_core::losses::{
    color_loss, hist_loss, perceptual_loss, psnr_loss, smooth_l1, ssim_loss, total_loss,
};
use ltcf_core::model::OutputClamp;
use ltcf_core::{
    ColorSpace, FeatureExtractor, Graph, Init, LossWeights, LtcfNet, ModelConfig, ParamStore,
    Result, Tensor, Unary, Var, WhitePoint,
};

use super::{rand_f64, weighted_sum};

pub struct GradCase {
    pub name: &'static str,
    pub run: fn() -> Result<CheckReport>,
}

fn opts() -> CheckOptions {
    CheckOptions::default()
}

fn no_params() -> ParamStore<f64> {
    ParamStore::new()
}

/// Checks `sum(op(inputs) * r)`.
fn op_case(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    op: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    check(store, inputs, &opts(), |g, v| {
        let y = op(g, v)?;
        weighted_sum(g, y, 1)
    })
}

fn unary_case(f: Unary, lo: f64, hi: f64) -> Result<CheckReport> {
    op_case(&no_params(), &[rand_f64(&[4, 5], lo, hi, 2)], |g, v| {
        Ok(g.unary(v[0], f))
    })
}

fn loss_weights() -> LossWeights {
    LossWeights {
        ssim_window: 5,
        ssim_sigma: 1.0,
        hist_bins: 32,
        hist_bandwidth: 2.0 / 32.0,
        ..LossWeights::default()
    }
}

fn image_pair() -> [Tensor<f64>; 2] {
    [
        rand_f64(&[8, 8, 3], 0.05, 0.95, 3),
        rand_f64(&[8, 8, 3], 0.05, 0.95, 4),
    ]
}

fn pair_loss(f: impl Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>) -> Result<CheckReport> {
    check(&no_params(), &image_pair(), &opts(), |g, v| {
        f(g, v[0], v[1])
    })
}

macro_rules! case {
    ($name:literal, $body:expr) => {
        GradCase {
            name: $name,
            run: || $body,
        }
    };
}

pub fn cases() -> Vec<GradCase> {
    vec![
        case!("relu", unary_case(Unary::Relu, -1.0, 1.0)),
        case!("leaky_relu", unary_case(Unary::LeakyRelu(0.2), -1.0, 1.0)),
        case!("tanh", unary_case(Unary::Tanh, -2.0, 2.0)),
        case!("sigmoid", unary_case(Unary::Sigmoid, -3.0, 3.0)),
        case!("exp", unary_case(Unary::Exp, -1.0, 1.0)),
        case!("ln", unary_case(Unary::Ln, 0.2, 3.0)),
        case!("sqrt", unary_case(Unary::Sqrt, 0.2, 3.0)),
        case!("abs", unary_case(Unary::Abs, -1.0, 1.0)),
        case!("square", unary_case(Unary::Square, -1.0, 1.0)),
        case!("smooth_l1_fn", unary_case(Unary::SmoothL1, -2.5, 2.5)),
        case!("clamp_min", unary_case(Unary::ClampMin(0.0), -1.0, 1.0)),
        case!(
            "clamp",
            unary_case(Unary::Clamp { lo: 0.0, hi: 1.0 }, -0.5, 1.5)
        ),
        case!(
            "straight_through_clamp",
            unary_case(
                Unary::StraightThroughClamp {
                    lo: 0.0,
                    hi: 1.0,
                    margin: 0.25
                },
                0.05,
                0.95
            )
        ),
        case!("lab_f", unary_case(Unary::LabF, 0.0, 1.0)),
        case!("lab_f_inv", unary_case(Unary::LabFInv, 0.0, 1.0)),
        case!("add", binary(|g, a, b| g.add(a, b))),
        case!("sub", binary(|g, a, b| g.sub(a, b))),
        case!("mul", binary(|g, a, b| g.mul(a, b))),
        case!(
            "div",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4], -1.0, 1.0, 5),
                    rand_f64(&[3, 4], 0.5, 2.0, 6)
                ],
                |g, v| g.div(v[0], v[1]),
            )
        ),
        case!("scale", single(&[3, 4, 2], |g, x| Ok(g.scale(x, -1.7)))),
        case!(
            "add_scalar",
            single(&[3, 4], |g, x| Ok(g.add_scalar(x, 0.3)))
        ),
        case!(
            "add_bias",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4, 2], -1.0, 1.0, 7),
                    rand_f64(&[2], -1.0, 1.0, 8)
                ],
                |g, v| { g.add_bias(v[0], v[1]) }
            )
        ),
        case!(
            "mul_channels",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4, 2], -1.0, 1.0, 9),
                    rand_f64(&[2], -1.0, 1.0, 10)
                ],
                |g, v| { g.mul_channels(v[0], v[1]) }
            )
        ),
        case!(
            "sum",
            single(&[3, 4, 2], |g, x| {
                let s = g.sum(x);
                Ok(g.unary(s, Unary::Square))
            })
        ),
        case!(
            "mean",
            single(&[3, 4, 2], |g, x| {
                let s = g.mean(x);
                Ok(g.unary(s, Unary::Square))
            })
        ),
        case!(
            "global_avg_pool",
            single(&[3, 4, 2], |g, x| Ok(g.global_avg_pool(x)))
        ),
        case!(
            "matmul",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4], -1.0, 1.0, 11),
                    rand_f64(&[4, 5], -1.0, 1.0, 12)
                ],
                |g, v| { g.matmul(v[0], v[1]) }
            )
        ),
        case!(
            "linear",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[6, 4], -1.0, 1.0, 13),
                    rand_f64(&[4, 4], -1.0, 1.0, 14)
                ],
                |g, v| { g.linear(v[0], v[1]) }
            )
        ),
        case!("transpose", single(&[3, 5], |g, x| g.transpose(x))),
        case!(
            "softmax_rows",
            single(&[4, 6], |g, x| Ok(g.softmax_rows(x)))
        ),
        case!(
            "attention",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[6, 4], -1.0, 1.0, 15),
                    rand_f64(&[6, 4], -1.0, 1.0, 16),
                    rand_f64(&[6, 3], -1.0, 1.0, 17),
                ],
                |g, v| g.attention(v[0], v[1], v[2], 0.5),
            )
        ),
        case!(
            "layer_norm",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 3, 4], -2.0, 2.0, 18),
                    rand_f64(&[4], 0.5, 1.5, 19),
                    rand_f64(&[4], -0.5, 0.5, 20)
                ],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            )
        ),
        case!("conv2d_same", conv_case(1, Padding::Same, (6, 7))),
        case!("conv2d_stride2", conv_case(2, Padding::Same, (7, 6))),
        case!("conv2d_valid", conv_case(1, Padding::Valid, (6, 6))),
        case!("conv2d_tiny_input", conv_case(2, Padding::Same, (2, 1))),
        case!(
            "deconv2d",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4, 2], -1.0, 1.0, 21),
                    rand_f64(&[3, 3, 2, 3], -1.0, 1.0, 22)
                ],
                |g, v| { g.deconv2d(v[0], v[1], 2) }
            )
        ),
        case!(
            "depthwise_conv2d",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[5, 4, 3], -1.0, 1.0, 23),
                    rand_f64(&[3, 3, 3], -1.0, 1.0, 24)
                ],
                |g, v| { g.depthwise_conv2d(v[0], v[1]) }
            )
        ),
        case!("reshape", single(&[3, 4, 2], |g, x| g.reshape(x, &[12, 2]))),
        case!("narrow", single(&[3, 4, 5], |g, x| g.narrow(x, 1, 3))),
        case!(
            "concat",
            op_case(
                &no_params(),
                &[
                    rand_f64(&[3, 4, 2], -1.0, 1.0, 25),
                    rand_f64(&[3, 4, 1], -1.0, 1.0, 26)
                ],
                |g, v| { g.concat(&[v[0], v[1]]) }
            )
        ),
        case!(
            "reflect_pad",
            single(&[3, 2, 2], |g, x| g.reflect_pad(x, 5, 3))
        ),
        case!("crop", single(&[5, 6, 2], |g, x| g.crop(x, 3, 4))),
        case!("fft2_forward", single(&[4, 5, 2], |g, x| g.fft2(x, false))),
        case!("fft2_inverse", single(&[5, 3, 2], |g, x| g.fft2(x, true))),
        case!(
            "soft_histogram",
            op_case(
                &no_params(),
                &[rand_f64(&[4, 4, 2], 0.0, 1.0, 27)],
                |g, v| g.soft_histogram(v[0], 16, 1.0 / 16.0)
            )
        ),
        case!(
            "filter_valid",
            single(&[6, 7, 2], |g, x| g.filter_valid(x, &[0.25, 0.5, 0.25]))
        ),
        case!(
            "conv_block",
            block_case(
                &[6, 6, 2],
                |s, i| Conv::new(s, i, "c", 3, 2, 3, 2, true),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!(
            "deconv_block",
            block_case(
                &[3, 3, 3],
                |s, i| Deconv::new(s, i, "d", 3, 3, 2),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!("mhsa", mhsa_case(2, true)),
        case!("mhsa_no_pos", mhsa_case(1, false)),
        case!(
            "cd_block",
            block_case(
                &[8, 8, 1],
                |s, i| CdBlock::new(s, i, "cd", 2, 2, 64),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!(
            "cd_block_odd_size",
            block_case(
                &[5, 7, 1],
                |s, i| CdBlock::new(s, i, "cd", 2, 2, 64),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!(
            "msef",
            block_case(
                &[4, 4, 8],
                |s, i| Msef::new(s, i, "m", 8),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!(
            "fbp",
            block_case(
                &[6, 5, 1],
                |s, i| Fbp::new(s, i, "f"),
                |b, g, x| b.forward(g, x)
            )
        ),
        case!("to_net_lab", color_case(ColorSpace::Lab, true)),
        case!("to_net_yuv", color_case(ColorSpace::Yuv, true)),
        case!("from_net_lab", color_case(ColorSpace::Lab, false)),
        case!("from_net_yuv", color_case(ColorSpace::Yuv, false)),
        case!("loss_smooth_l1", pair_loss(|g, a, b| smooth_l1(g, a, b))),
        case!(
            "loss_psnr",
            pair_loss(|g, a, b| psnr_loss(g, &loss_weights(), a, b))
        ),
        case!("loss_color", pair_loss(|g, a, b| color_loss(g, a, b))),
        case!(
            "loss_hist",
            pair_loss(|g, a, b| hist_loss(g, &loss_weights(), a, b))
        ),
        case!(
            "loss_ssim",
            pair_loss(|g, a, b| ssim_loss(g, &loss_weights(), a, b))
        ),
        case!("loss_perceptual", {
            let fx = FeatureExtractor::seeded(5, &[4, 4]);
            pair_loss(|g, a, b| perceptual_loss(g, &loss_weights(), &fx, a, b))
        }),
        case!("loss_total", {
            let fx = FeatureExtractor::seeded(5, &[4, 4]);
            pair_loss(|g, a, b| Ok(total_loss(g, &loss_weights(), &fx, a, b)?.total))
        }),
        case!("model_forward", model_case()),
    ]
}

fn single(
    shape: &'static [usize],
    f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
) -> Result<CheckReport> {
    op_case(&no_params(), &[rand_f64(shape, -1.0, 1.0, 30)], |g, v| {
        f(g, v[0])
    })
}

fn binary(f: impl Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>) -> Result<CheckReport> {
    op_case(
        &no_params(),
        &[
            rand_f64(&[3, 4, 2], -1.0, 1.0, 31),
            rand_f64(&[3, 4, 2], -1.0, 1.0, 32),
        ],
        |g, v| f(g, v[0], v[1]),
    )
}

fn conv_case(stride: usize, padding: Padding, (h, w): (usize, usize)) -> Result<CheckReport> {
    op_case(
        &no_params(),
        &[
            rand_f64(&[h, w, 2], -1.0, 1.0, 33),
            rand_f64(&[3, 3, 2, 3], -1.0, 1.0, 34),
        ],
        |g, v| g.conv2d(v[0], v[1], stride, padding),
    )
}

fn block_case<B>(
    shape: &[usize],
    build: impl Fn(&mut ParamStore<f64>, &mut Init) -> Result<B>,
    fwd: impl Fn(&B, &mut Graph<'_, f64>, Var) -> Result<Var>,
) -> Result<CheckReport> {
    let mut store = ParamStore::new();
    let block = build(&mut store, &mut Init::new(35))?;
    // Nonzero biases so that bias-free shortcuts would be caught.
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            p.value = rand_f64(p.value.shape(), -0.1, 0.1, 36);
        }
    }
    op_case(&store, &[rand_f64(shape, -1.0, 1.0, 37)], |g, v| {
        fwd(&block, g, v[0])
    })
}

fn mhsa_case(heads: usize, use_pos: bool) -> Result<CheckReport> {
    block_case(
        &[3, 2, 4],
        |s, i| {
            let mut m = Mhsa::new(s, i, "a", 4, heads, 64)?;
            m.use_pos = use_pos;
            Ok(m)
        },
        |b, g, x| b.forward(g, x),
    )
}

fn color_case(space: ColorSpace, forward: bool) -> Result<CheckReport> {
    let wp = WhitePoint::D65;
    let (lo, hi) = if forward { (0.02, 0.98) } else { (-0.6, 0.6) };
    op_case(&no_params(), &[rand_f64(&[3, 3, 3], lo, hi, 38)], |g, v| {
        if forward {
            to_net(g, v[0], space, &wp)
        } else {
            from_net(g, v[0], space, &wp)
        }
    })
}

fn model_case() -> Result<CheckReport> {
    let cfg = ModelConfig {
        base_width: 4,
        cd_base_width: 2,
        heads: 2,
        seed: 3,
        ..ModelConfig::default()
    };
    let net = LtcfNet::build(&cfg)?;
    let store = net.store.cast::<f64>();
    let opts = CheckOptions {
        max_coords_per_tensor: 3,
        ..CheckOptions::default()
    };
    check(
        &store,
        &[rand_f64(&[16, 16, 3], 0.1, 0.9, 39)],
        &opts,
        |g, v| {
            let y = net.forward_with(g, v[0], OutputClamp::Hard)?;
            weighted_sum(g, y, 40)
        },
    )
}

/// Runs every case and returns `(name, passed, report)` rows.
pub fn run_all() -> Vec<(&'static str, bool, String)> {
    let o = opts();
    cases()
        .into_iter()
        .map(|c| match (c.run)() {
            Ok(r) => (c.name, r.ok(&o), format!("{r:?}")),
            Err(e) => (c.name, false, format!("error: {e}")),
        })
        .collect()
}
