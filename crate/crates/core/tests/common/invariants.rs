//! Attention invariants and block identity collapses, as checks that
//! return a description of the first violation. Shared with the
//! acceptance suite.

use ltcf_core::blocks::{Fbp, Mhsa, Msef};
use ltcf_core::{Graph, Init, LtcfNet, ModelConfig, ParamStore, Tensor};

use super::{conv_ref, rand_f32, rand_f64};

pub type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mhsa_f64(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, Mhsa) {
    let mut store = ParamStore::new();
    let m = Mhsa::new(&mut store, &mut Init::new(seed), "attn", dim, heads, 256).unwrap();
    (store, m)
}

/// Every attention row of a random multi-head block sums to one.
pub fn attention_rows_sum_to_one() -> Check {
    let (store, m) = mhsa_f64(8, 2, 1);
    let s32 = store.cast::<f32>();
    let mut g = Graph::new(&s32);
    let x = g.input(rand_f32(&[4, 3, 8], -2.0, 2.0, 2));
    let t = m.trace(&mut g, x, true).map_err(|e| e.to_string())?;
    for p in &t.attention {
        for row in g.value(*p).data().chunks(12) {
            let s: f32 = row.iter().sum();
            ensure((s - 1.0).abs() < 1e-5, || format!("row sums to {s}"))?;
        }
    }
    Ok(())
}

/// Zero query and key projections give uniform attention, so every
/// attended row is the mean of the value rows.
pub fn zero_projection_is_uniform() -> Check {
    let (mut store, m) = mhsa_f64(4, 2, 3);
    for id in m.wq.iter().chain(&m.wk) {
        store.get_mut(*id).value.fill(0.0);
    }
    let mut g = Graph::new(&store);
    let x = g.input(rand_f64(&[3, 3, 4], -1.0, 1.0, 4));
    let t = m.trace(&mut g, x, true).map_err(|e| e.to_string())?;
    for p in &t.attention {
        let bad = g
            .value(*p)
            .data()
            .iter()
            .find(|&&v| (v - 1.0 / 9.0).abs() > 1e-12);
        ensure(bad.is_none(), || {
            format!("attention weight {bad:?} is not 1/9")
        })?;
    }
    let att = g.value(t.attended).clone();
    let xv = g.value(x).clone();
    for head in 0..2 {
        let wv = &store.get(m.wv[head]).value;
        let mut mean = [0.0; 2];
        for px in xv.data().chunks(4) {
            for (j, mj) in mean.iter_mut().enumerate() {
                *mj += (px[2 * head] * wv.at(&[0, j]) + px[2 * head + 1] * wv.at(&[1, j])) / 9.0;
            }
        }
        for row in att.data().chunks(4) {
            for j in 0..2 {
                let v = row[2 * head + j];
                ensure((v - mean[j]).abs() < 1e-12, || {
                    format!("head {head}: {v} vs mean {}", mean[j])
                })?;
            }
        }
    }
    Ok(())
}

/// A 1x1 input attends only to itself.
pub fn single_pixel_attends_to_itself() -> Check {
    let (store, m) = mhsa_f64(4, 2, 5);
    let mut g = Graph::new(&store);
    let x = g.input(rand_f64(&[1, 1, 4], -1.0, 1.0, 6));
    let t = m.trace(&mut g, x, true).map_err(|e| e.to_string())?;
    for p in &t.attention {
        ensure(g.value(*p).data() == [1.0], || {
            format!("{:?}", g.value(*p).data())
        })?;
    }
    Ok(())
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Direct per-head loops on a `2 x 2 x 4` input with two heads.
pub fn mhsa_matches_naive_loops() -> Check {
    let (store, m) = mhsa_f64(4, 2, 7);
    let xt = rand_f64(&[2, 2, 4], -1.0, 1.0, 8);
    let x = xt.data();
    let (n, c, dk) = (4, 4, 2);
    let mut attended = vec![0.0; n * c];
    let mut values = vec![0.0; n * c];
    for head in 0..2 {
        let xi: Vec<f64> = (0..n)
            .flat_map(|t| [x[t * c + 2 * head], x[t * c + 2 * head + 1]])
            .collect();
        let w = |ids: &Vec<ltcf_core::ParamId>| store.get(ids[head]).value.data().to_vec();
        let q = matmul(&xi, &w(&m.wq), n, dk, dk);
        let k = matmul(&xi, &w(&m.wk), n, dk, dk);
        let v = matmul(&xi, &w(&m.wv), n, dk, dk);
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (q[i * dk] * k[j * dk] + q[i * dk + 1] * k[j * dk + 1]) / (dk as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dk {
                attended[i * c + head * dk + d] = (0..n).map(|j| e[j] / z * v[j * dk + d]).sum();
                values[i * c + head * dk + d] = v[i * dk + d];
            }
        }
    }
    let projected = matmul(&attended, store.get(m.wo).value.data(), n, c, c);
    let pos = store.get(m.pos).value.data();
    let mut want = projected.clone();
    for ch in 0..c {
        let plane: Vec<f64> = (0..n).map(|t| values[t * c + ch]).collect();
        let kern: Vec<f64> = (0..9).map(|t| pos[t * c + ch]).collect();
        let (pe, _, _) = conv_ref(&plane, (2, 2, 1), &kern, (3, 3, 1), 1, 1);
        for t in 0..n {
            want[t * c + ch] += pe[t];
        }
    }

    let mut g = Graph::new(&store);
    let xv = g.input(xt.clone());
    let t = m.trace(&mut g, xv, false).map_err(|e| e.to_string())?;
    let err = super::max_diff(g.value(t.attended).data(), &attended);
    ensure(err < 1e-5, || format!("attended differs by {err}"))?;
    let err = super::max_diff(g.value(t.out).data(), &want);
    ensure(err < 1e-5, || format!("output differs by {err}"))?;

    let s32 = store.cast::<f32>();
    let mut g32 = Graph::new(&s32);
    let xv = g32.input(xt.cast());
    let out = m.forward(&mut g32, xv).map_err(|e| e.to_string())?;
    let got: Vec<f64> = g32.value(out).data().iter().map(|&v| v as f64).collect();
    let err = super::max_diff(&got, &want);
    ensure(err < 1e-5, || {
        format!("single-precision output differs by {err}")
    })
}

/// Spatially permuting the input permutes the attended values the same
/// way when positional encoding is off.
pub fn attention_is_permutation_equivariant() -> Check {
    let (store, mut m) = mhsa_f64(4, 2, 9);
    m.use_pos = false;
    let xt = rand_f64(&[3, 3, 4], -1.0, 1.0, 10);
    let perm = [4, 7, 0, 8, 2, 5, 1, 3, 6];
    let permuted = Tensor::from_fn(&[3, 3, 4], |i| xt.data()[perm[i / 4] * 4 + i % 4]);
    let mut g = Graph::new(&store);
    let a = g.input(xt);
    let b = g.input(permuted);
    let ta = m.trace(&mut g, a, false).map_err(|e| e.to_string())?;
    let tb = m.trace(&mut g, b, false).map_err(|e| e.to_string())?;
    for (attn_a, attn_b) in [(ta.attended, tb.attended), (ta.out, tb.out)] {
        let (va, vb) = (g.value(attn_a).data(), g.value(attn_b).data());
        for (i, &p) in perm.iter().enumerate() {
            for ch in 0..4 {
                let d = (vb[i * 4 + ch] - va[p * 4 + ch]).abs();
                ensure(d < 1e-12, || format!("token {i} channel {ch} off by {d}"))?;
            }
        }
    }
    Ok(())
}

/// MSEF with `W_2 = 0`, or with `W_1 = 0`, returns its input bit for bit.
pub fn msef_collapses_to_identity() -> Check {
    for zeroed in ["w1", "w2"] {
        let mut store = ParamStore::<f32>::new();
        let b = Msef::new(&mut store, &mut Init::new(11), "m", 8).unwrap();
        store
            .by_name_mut(&format!("m.{zeroed}"))
            .unwrap()
            .value
            .fill(0.0);
        let mut g = Graph::new(&store);
        let x = g.input(rand_f32(&[5, 4, 8], -3.0, 3.0, 12));
        let y = b.forward(&mut g, x).map_err(|e| e.to_string())?;
        ensure(g.value(y) == g.value(x), || {
            format!("{zeroed} = 0 is not an identity")
        })?;
    }
    Ok(())
}

/// FBP with all-zero conv stacks returns its input bit for bit.
pub fn fbp_collapses_to_identity() -> Check {
    let mut store = ParamStore::<f32>::new();
    let b = Fbp::new(&mut store, &mut Init::new(13), "f").unwrap();
    store.iter_mut().for_each(|p| p.value.fill(0.0));
    for (h, w) in [(8, 8), (5, 7), (1, 1)] {
        let mut g = Graph::new(&store);
        let x = g.input(rand_f32(&[h, w, 1], -1.0, 1.0, 14));
        let y = b.forward(&mut g, x).map_err(|e| e.to_string())?;
        ensure(g.value(y) == g.value(x), || {
            format!("{h}x{w} zero-stack FBP is not an identity")
        })?;
    }
    Ok(())
}

/// A network built with MSEF and FBP disabled reproduces, bit for bit, the
/// full network whose MSEF excite weights and FBP stacks are zeroed.
pub fn disabled_flags_match_zeroed_blocks() -> Check {
    let full_cfg = ModelConfig {
        seed: 21,
        ..ModelConfig::default()
    };
    let mut full = LtcfNet::build(&full_cfg).map_err(|e| e.to_string())?;
    for p in full.store.iter_mut() {
        if p.name.contains(".fbp.") || p.name.ends_with(".msef.w2") {
            p.value.fill(0.0);
        }
    }
    let mut lean = LtcfNet::build(&ModelConfig {
        use_fbp: false,
        use_msef: false,
        ..full_cfg
    })
    .map_err(|e| e.to_string())?;
    for p in lean.store.iter_mut() {
        let src = full
            .store
            .by_name(&p.name)
            .ok_or_else(|| format!("{} missing from full net", p.name))?;
        p.value = src.value.clone();
    }
    let x = rand_f32(&[24, 20, 3], 0.0, 1.0, 22);
    let a = full.enhance(&x).map_err(|e| e.to_string())?;
    let b = lean.enhance(&x).map_err(|e| e.to_string())?;
    ensure(a == b, || {
        format!("outputs differ by {}", a.max_abs_diff(&b))
    })
}
