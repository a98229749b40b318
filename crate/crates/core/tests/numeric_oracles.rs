//! Tape operations against direct reference implementations.

mod common;

use common::{conv_ref, dft_ref, max_diff, rand_f64};
use ltcf_core::kernels::Padding;
use ltcf_core::{fft2, ifft2, ComplexTensor, Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn store() -> ParamStore<f64> {
    ParamStore::new()
}

#[test]
fn conv_matches_nested_loops() {
    let s = store();
    for (h, w, cin, cout, k, stride) in [
        (8, 8, 1, 2, 3, 2),
        (5, 7, 3, 4, 3, 1),
        (9, 6, 2, 3, 5, 2),
        (6, 6, 4, 1, 1, 1),
    ] {
        let x = rand_f64(&[h, w, cin], -1.0, 1.0, 1);
        let kern = rand_f64(&[k, k, cin, cout], -1.0, 1.0, 2);
        let mut g = Graph::new(&s);
        let xv = g.input(x.clone());
        let kv = g.input(kern.clone());
        let y = g.conv2d(xv, kv, stride, Padding::Same).unwrap();
        let (want, oh, ow) = conv_ref(
            x.data(),
            (h, w, cin),
            kern.data(),
            (k, k, cout),
            stride,
            k / 2,
        );
        assert_eq!(g.shape(y), &[oh, ow, cout]);
        assert!(max_diff(g.value(y).data(), &want) < 1e-12);
        assert_eq!(oh, h.div_ceil(stride));

        let y = g.conv2d(xv, kv, 1, Padding::Valid).unwrap();
        let (want, oh, ow) = conv_ref(x.data(), (h, w, cin), kern.data(), (k, k, cout), 1, 0);
        assert_eq!(g.shape(y), &[oh, ow, cout]);
        assert!(max_diff(g.value(y).data(), &want) < 1e-12);
    }
}

#[test]
fn conv_in_single_precision_within_tolerance() {
    let s = ParamStore::<f32>::new();
    let x = rand_f64(&[8, 8, 1], 0.0, 1.0, 3);
    let kern = rand_f64(&[3, 3, 1, 2], -1.0, 1.0, 4);
    let mut g = Graph::new(&s);
    let xv = g.input(x.cast());
    let kv = g.input(kern.cast());
    let y = g.conv2d(xv, kv, 2, Padding::Same).unwrap();
    let (want, _, _) = conv_ref(x.data(), (8, 8, 1), kern.data(), (3, 3, 2), 2, 1);
    let got: Vec<f64> = g.value(y).data().iter().map(|&v| v as f64).collect();
    assert!(max_diff(&got, &want) < 1e-5);
}

#[test]
fn conv_examples() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(rand_f64(&[4, 4, 2], -1.0, 1.0, 5));
    let zero = g.input(Tensor::zeros(&[3, 3, 2, 3]));
    let y = g.conv2d(x, zero, 1, Padding::Same).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut ident = Tensor::zeros(&[3, 3, 2, 2]);
    ident.set(&[1, 1, 0, 0], 1.0);
    ident.set(&[1, 1, 1, 1], 1.0);
    let ident = g.input(ident);
    let y = g.conv2d(x, ident, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let wrong = g.input(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(matches!(
        g.conv2d(x, wrong, 1, Padding::Same),
        Err(Error::Shape { .. })
    ));
}

/// Transposed convolution as zero insertion followed by an ordinary
/// convolution with the spatially flipped kernel.
fn deconv_ref(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: &[f64],
    (kk, cout): (usize, usize),
    s: usize,
) -> Vec<f64> {
    let (zh, zw) = (s * h, s * w);
    let mut z = vec![0.0; zh * zw * cin];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..cin {
                z[((s * y) * zw + s * xx) * cin + c] = x[(y * w + xx) * cin + c];
            }
        }
    }
    let mut flipped = vec![0.0; k.len()];
    for ky in 0..kk {
        for kx in 0..kk {
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[((ky * kk + kx) * cin + ci) * cout + co] =
                        k[(((kk - 1 - ky) * kk + kk - 1 - kx) * cin + ci) * cout + co];
                }
            }
        }
    }
    conv_ref(&z, (zh, zw, cin), &flipped, (kk, kk, cout), 1, kk / 2).0
}

#[test]
fn deconv_matches_zero_insertion() {
    let s = store();
    for (h, w, cin, cout, k, stride) in [
        (2, 2, 1, 3, 3, 2),
        (3, 5, 2, 2, 3, 2),
        (4, 3, 3, 1, 5, 2),
        (3, 3, 2, 2, 3, 1),
    ] {
        let x = rand_f64(&[h, w, cin], -1.0, 1.0, 6);
        let kern = rand_f64(&[k, k, cin, cout], -1.0, 1.0, 7);
        let mut g = Graph::new(&s);
        let xv = g.input(x.clone());
        let kv = g.input(kern.clone());
        let y = g.deconv2d(xv, kv, stride).unwrap();
        assert_eq!(g.shape(y), &[stride * h, stride * w, cout]);
        let want = deconv_ref(x.data(), (h, w, cin), kern.data(), (k, cout), stride);
        assert!(max_diff(g.value(y).data(), &want) < 1e-12, "{h}x{w} k{k}");
    }
}

#[test]
fn conv_then_deconv_restores_size() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(rand_f64(&[16, 16, 2], -1.0, 1.0, 8));
    let down = g.input(rand_f64(&[3, 3, 2, 4], -1.0, 1.0, 9));
    let up = g.input(rand_f64(&[3, 3, 4, 2], -1.0, 1.0, 10));
    let y = g.conv2d(x, down, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[8, 8, 4]);
    let z = g.deconv2d(y, up, 2).unwrap();
    assert_eq!(g.shape(z), &[16, 16, 2]);
}

#[test]
fn depthwise_matches_per_channel_conv() {
    let s = store();
    let x = rand_f64(&[5, 6, 3], -1.0, 1.0, 11);
    let k = rand_f64(&[3, 3, 3], -1.0, 1.0, 12);
    let mut g = Graph::new(&s);
    let xv = g.input(x.clone());
    let kv = g.input(k.clone());
    let y = g.depthwise_conv2d(xv, kv).unwrap();
    for c in 0..3 {
        let plane: Vec<f64> = x.data().iter().skip(c).step_by(3).copied().collect();
        let kp: Vec<f64> = k.data().iter().skip(c).step_by(3).copied().collect();
        let (want, _, _) = conv_ref(&plane, (5, 6, 1), &kp, (3, 3, 1), 1, 1);
        let got: Vec<f64> = g
            .value(y)
            .data()
            .iter()
            .skip(c)
            .step_by(3)
            .copied()
            .collect();
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn linear_examples_and_naive_matmul() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let two = g.input(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let y = g.linear(x, two).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 4.0]);

    let a = rand_f64(&[3, 4], -1.0, 1.0, 13);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let av = g.input(a.clone());
    let ev = g.input(eye);
    let y = g.linear(av, ev).unwrap();
    assert_eq!(g.value(y), &a);

    let b = rand_f64(&[4, 5], -1.0, 1.0, 14);
    let bv = g.input(b.clone());
    let y = g.matmul(av, bv).unwrap();
    let mut want = vec![0.0; 15];
    for i in 0..3 {
        for j in 0..5 {
            for k in 0..4 {
                want[i * 5 + j] += a.data()[i * 4 + k] * b.data()[k * 5 + j];
            }
        }
    }
    assert!(max_diff(g.value(y).data(), &want) < 1e-12);
    assert!(matches!(g.matmul(bv, bv), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(
        Tensor::new(
            &[3, 3],
            vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0, 0.0, 1000.0, 0.0],
        )
        .unwrap(),
    );
    let p = g.softmax_rows(x);
    let p = g.value(p).data();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((p[i] - v.exp() / z).abs() < 1e-6);
    }
    for v in &p[3..6] {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(&p[6..9], &[0.0, 1.0, 0.0]);
    for row in p.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn activation_examples() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::new(&[4], vec![-2.0, -1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 0.0, 2.0]);
    let l = g.leaky_relu(x, 0.2);
    let l = g.value(l).data();
    assert!((l[0] + 0.4).abs() < 1e-12 && l[3] == 2.0);
    let t = g.tanh(x);
    assert_eq!(g.value(t).data()[2], 0.0);
    assert!((g.value(t).data()[3] - 2.0f64.tanh()).abs() < 1e-15);
}

#[test]
fn layer_norm_matches_two_pass_reference() {
    let s = store();
    let x = rand_f64(&[2, 2, 4], -3.0, 3.0, 15);
    let gain = rand_f64(&[4], 0.5, 1.5, 16);
    let bias = rand_f64(&[4], -0.5, 0.5, 17);
    let mut g = Graph::new(&s);
    let (xv, gv, bv) = (
        g.input(x.clone()),
        g.input(gain.clone()),
        g.input(bias.clone()),
    );
    let y = g.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let mut want = Vec::new();
    for px in x.data().chunks(4) {
        let mean = px.iter().sum::<f64>() / 4.0;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for (c, v) in px.iter().enumerate() {
            want.push((v - mean) / (var + 1e-5).sqrt() * gain.data()[c] + bias.data()[c]);
        }
    }
    assert!(max_diff(g.value(y).data(), &want) < 1e-10);

    let one = g.input(Tensor::ones(&[4]));
    let zero = g.input(Tensor::zeros(&[4]));
    let y = g.layer_norm(xv, one, zero, 1e-5).unwrap();
    for px in g.value(y).data().chunks(4) {
        assert!(px.iter().sum::<f64>().abs() / 4.0 < 1e-5);
    }
    let c = g.input(Tensor::full(&[2, 2, 4], 7.0));
    let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn global_average_pool_examples() {
    let s = store();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let p = g.global_avg_pool(x);
    assert_eq!(g.value(p).data(), &[1.5]);

    let t = rand_f64(&[3, 4, 2], -1.0, 1.0, 18);
    let mut swapped = t.clone();
    let d = swapped.data_mut();
    for c in 0..2 {
        d.swap(c, 22 + c);
        d.swap(6 + c, 14 + c);
    }
    let a = g.input(t);
    let b = g.input(swapped);
    let pa = g.global_avg_pool(a);
    let pb = g.global_avg_pool(b);
    assert!(max_diff(g.value(pa).data(), g.value(pb).data()) < 1e-15);

    let c = g.input(Tensor::full(&[5, 5, 3], 0.25));
    let pc = g.global_avg_pool(c);
    assert!(g.value(pc).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn fft_matches_direct_dft() {
    for (h, w) in [(4, 4), (3, 5), (6, 7), (8, 2)] {
        let x = rand_f64(&[h, w], -1.0, 1.0, 19);
        let spec = fft2(&x).unwrap();
        let (wr, wi) = dft_ref(x.data(), &vec![0.0; h * w], h, w, false);
        assert!(max_diff(spec.real.data(), &wr) < 1e-9, "{h}x{w}");
        assert!(max_diff(spec.imag.data(), &wi) < 1e-9, "{h}x{w}");
    }
    let x = rand_f64(&[4, 4], -1.0, 1.0, 20).cast::<f32>();
    let spec = fft2(&x).unwrap();
    let (wr, _) = dft_ref(&x.cast::<f64>().into_data(), &[0.0; 16], 4, 4, false);
    let got: Vec<f64> = spec.real.data().iter().map(|&v| v as f64).collect();
    assert!(max_diff(&got, &wr) < 1e-4);
}

#[test]
fn fft_constant_and_zero_planes() {
    let c = Tensor::<f64>::full(&[6, 5], 0.7);
    let spec = fft2(&c).unwrap();
    assert!((spec.real.data()[0] - 0.7 * 30.0).abs() < 1e-12);
    assert!(spec.real.data()[1..]
        .iter()
        .chain(spec.imag.data())
        .all(|v| v.abs() < 1e-12));
    let z = fft2(&Tensor::<f64>::zeros(&[4, 4])).unwrap();
    assert!(z.real.data().iter().chain(z.imag.data()).all(|&v| v == 0.0));
}

#[test]
fn fft_roundtrip_and_parseval() {
    for n in 4..=32 {
        let (h, w) = (n, 36 - n);
        let x = rand_f64(&[h, w], -1.0, 1.0, n as u64);
        let spec = fft2(&x).unwrap();
        let back = ifft2(&spec).unwrap();
        assert!(max_diff(back.data(), x.data()) < 1e-10, "{h}x{w}");
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spectral = spec.energy() / (h * w) as f64;
        assert!((energy - spectral).abs() / energy < 1e-6);
    }
}

#[test]
fn graph_fft_matches_direct_dft_both_ways() {
    let s = store();
    let field = rand_f64(&[5, 6, 2], -1.0, 1.0, 21);
    let re: Vec<f64> = field.data().iter().step_by(2).copied().collect();
    let im: Vec<f64> = field.data().iter().skip(1).step_by(2).copied().collect();
    let mut g = Graph::new(&s);
    let x = g.input(field);
    for inverse in [false, true] {
        let y = g.fft2(x, inverse).unwrap();
        let (wr, wi) = dft_ref(&re, &im, 5, 6, inverse);
        let got = g.value(y).data();
        let gr: Vec<f64> = got.iter().step_by(2).copied().collect();
        let gi: Vec<f64> = got.iter().skip(1).step_by(2).copied().collect();
        assert!(max_diff(&gr, &wr) < 1e-9 && max_diff(&gi, &wi) < 1e-9);
    }
}

#[test]
fn complex_parts_must_agree() {
    let r = Tensor::<f64>::zeros(&[2, 2]);
    let i = Tensor::<f64>::zeros(&[2, 3]);
    assert!(ComplexTensor::new(r, i).is_err());
}

#[test]
fn backward_examples() {
    let mut s = store();
    let w = s
        .add("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap())
        .unwrap();
    let unused = s.add("unused", Tensor::ones(&[2])).unwrap();
    let mut g = Graph::new(&s);
    let x = g.input_with_grad(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let wv = g.param(w);
    let _ = g.param(unused);
    let p = g.mul(wv, x).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[0.5, -1.0, 2.0]);
    let by_id: Vec<_> = grads.param_grads().collect();
    let gw = by_id.iter().find(|(id, _)| *id == w).unwrap().1;
    assert_eq!(gw.data(), &[1.0, 2.0, 3.0]);
    if let Some((_, gu)) = by_id.iter().find(|(id, _)| *id == unused) {
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }
    assert!(matches!(g.backward(p), Err(Error::Usage(_))));
}

#[test]
fn forward_is_deterministic() {
    let s = store();
    let run = || {
        let mut g = Graph::new(&s);
        let x = g.input(rand_f64(&[9, 9, 3], -1.0, 1.0, 22));
        let k = g.input(rand_f64(&[3, 3, 3, 4], -1.0, 1.0, 23));
        let y = g.conv2d(x, k, 2, Padding::Same).unwrap();
        let y = g.tanh(y);
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_shape_algebra(h in 1usize..20, w in 1usize..20, cin in 1usize..4, cout in 1usize..4, stride in 1usize..3) {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[h, w, cin]));
        let k = g.input(Tensor::zeros(&[3, 3, cin, cout]));
        let y = g.conv2d(x, k, stride, Padding::Same).unwrap();
        prop_assert_eq!(g.shape(y), &[h.div_ceil(stride), w.div_ceil(stride), cout][..]);
        let kd = g.input(Tensor::zeros(&[3, 3, cout, cin]));
        let z = g.deconv2d(y, kd, stride).unwrap();
        prop_assert_eq!(g.shape(z), &[stride * h.div_ceil(stride), stride * w.div_ceil(stride), cin][..]);
    }

    #[test]
    fn reshape_preserves_data(h in 1usize..6, w in 1usize..6, c in 1usize..4) {
        let t = rand_f64(&[h, w, c], -1.0, 1.0, 24);
        let r = t.clone().reshape(&[h * w, c]).unwrap();
        prop_assert_eq!(r.data(), t.data());
        prop_assert!(t.clone().reshape(&[h * w * c + 1]).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts(c1 in 1usize..4, c2 in 1usize..4) {
        let a = rand_f64(&[3, 2, c1], -1.0, 1.0, 25);
        let b = rand_f64(&[3, 2, c2], -1.0, 1.0, 26);
        let cat = Tensor::concat_last(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.shape(), &[3, 2, c1 + c2][..]);
        prop_assert_eq!(cat.narrow_last(0, c1), a);
        prop_assert_eq!(cat.narrow_last(c1, c2), b);
    }
}
