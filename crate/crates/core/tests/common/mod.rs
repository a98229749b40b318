#![allow(dead_code)]

pub mod grad_cases;
pub mod invariants;

use ltcf_core::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_f64(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

pub fn rand_f32(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// `sum(x * r)` for fixed pseudo-random `r`, a scalar objective whose
/// gradient with respect to `x` is `r`.
pub fn weighted_sum(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var> {
    let r = rand_f64(g.shape(x), -1.0, 1.0, seed ^ 0x9e37);
    let r = g.input(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

/// Nested-loop zero-padded convolution, `kh x kw x cin x cout` kernel.
pub fn conv_ref(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x[(iy as usize * w + ix as usize) * cin + ci]
                                * k[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Direct `O(n^2)` 2D DFT of a complex plane given as separate parts.
pub fn dft_ref(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let norm = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut or = vec![0.0; h * w];
    let mut oi = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = sign
                        * 2.0
                        * std::f64::consts::PI
                        * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (s, c) = a.sin_cos();
                    let (pr, pi) = (re[y * w + x], im[y * w + x]);
                    sr += pr * c - pi * s;
                    si += pr * s + pi * c;
                }
            }
            or[u * w + v] = sr * norm;
            oi[u * w + v] = si * norm;
        }
    }
    (or, oi)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Worst roundtrip errors `(lab, yuv)` over `n` random RGB triples sent
/// through whole-image conversions.
pub fn color_roundtrip_errors(n: usize, seed: u64) -> (f64, f64) {
    use ltcf_core::colorspace::{lab_to_rgb, rgb_to_lab, rgb_to_yuv, yuv_to_rgb};
    use ltcf_core::{ImagePlanes, WhitePoint};
    let rgb = rand_f32(&[n, 1, 3], 0.0, 1.0, seed);
    let img = ImagePlanes::from_rgb(rgb.clone()).unwrap();
    let wp = WhitePoint::D65;
    let lab = lab_to_rgb(&rgb_to_lab(&img, &wp).unwrap(), &wp).unwrap();
    let yuv = yuv_to_rgb(&rgb_to_yuv(&img).unwrap()).unwrap();
    (
        lab.planes.max_abs_diff(&rgb) as f64,
        yuv.planes.max_abs_diff(&rgb) as f64,
    )
}

/// Trains `net` on `n` generated `size x size` pairs with the default
/// loss weights, decaying the learning rate tenfold.
pub fn quick_train(
    net: &mut ltcf_core::LtcfNet,
    n: usize,
    size: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ltcf_core::History> {
    use ltcf_core::data::synthetic_dataset;
    use ltcf_core::{
        DegradationConfig, FeatureExtractor, LossWeights, ScheduleConfig, TrainOptions,
    };
    let ds = synthetic_dataset(
        n,
        size,
        size,
        &DegradationConfig {
            seed,
            ..Default::default()
        },
    )?;
    let schedule = ScheduleConfig {
        lr_initial: lr,
        lr_final: lr / 10.0,
        total_epochs: epochs.max(1),
        warmup_epochs: 0,
    };
    let opts = TrainOptions {
        epochs,
        batch_size: 1,
        patch: 0,
        seed,
        ..Default::default()
    };
    let fx = FeatureExtractor::from_source(&Default::default())?;
    ltcf_core::optim::train(
        net,
        &ds,
        &LossWeights::default(),
        &fx,
        &schedule,
        &opts,
        &mut |_| Ok(()),
    )
}
