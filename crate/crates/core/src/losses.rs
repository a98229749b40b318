//! Training objective: smooth-L1, PSNR, colour, histogram, perceptual and
//! SSIM terms with their weighted sum, plus the matching evaluation metrics.
//!
//! Each loss takes one `(truth, prediction)` pair of `H x W x 3` graph
//! values in `[0, 1]`; batches average the per-pair values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// PSNR term.
    pub alpha1: f64,
    /// Colour term.
    pub alpha2: f64,
    /// Histogram term.
    pub alpha3: f64,
    /// Perceptual term.
    pub alpha4: f64,
    /// SSIM term.
    pub alpha5: f64,
    pub psnr_cap: f64,
    pub mse_floor: f64,
    pub hist_bins: usize,
    pub hist_bandwidth: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub perceptual_layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.12,
            alpha2: 0.05,
            alpha3: 0.55,
            alpha4: 0.015,
            alpha5: 0.25,
            psnr_cap: 40.0,
            mse_floor: 1e-8,
            hist_bins: 256,
            hist_bandwidth: 2.0 / 256.0,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            ssim_window: 11,
            ssim_sigma: 1.5,
            perceptual_layer_weights: vec![1.0; 4],
        }
    }
}

impl LossWeights {
    pub fn alphas(&self) -> [f64; 5] {
        [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.alpha4,
            self.alpha5,
        ]
    }

    pub fn set_alphas(&mut self, a: [f64; 5]) {
        [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.alpha4,
            self.alpha5,
        ] = a;
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas().iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got {:?}",
                self.alphas()
            )));
        }
        if self.hist_bins < 2 || !(self.hist_bandwidth > 0.0) {
            return Err(Error::Config(
                "histogram needs >= 2 bins and a positive bandwidth".into(),
            ));
        }
        if self.ssim_window % 2 == 0 || !(self.ssim_sigma > 0.0) {
            return Err(Error::Config(
                "SSIM window must be odd with positive sigma".into(),
            ));
        }
        if !(self.mse_floor > 0.0) {
            return Err(Error::Config("mse_floor must be positive".into()));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(g: &Graph<'_, T>, a: Var, b: Var, what: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            what,
            format!("truth {:?} vs prediction {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// Mean smooth-L1 penalty of the difference.
pub fn smooth_l1<T: Scalar>(g: &mut Graph<'_, T>, truth: Var, pred: Var) -> Result<Var> {
    same_shape(g, truth, pred, "smooth_l1")?;
    let d = g.sub(pred, truth)?;
    let p = g.unary(d, Unary::SmoothL1);
    Ok(g.mean(p))
}

fn mse<T: Scalar>(g: &mut Graph<'_, T>, truth: Var, pred: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.unary(d, Unary::Square);
    Ok(g.mean(sq))
}

/// `cap - PSNR`, with the MSE floored at `mse_floor`.
pub fn psnr_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LossWeights,
    truth: Var,
    pred: Var,
) -> Result<Var> {
    same_shape(g, truth, pred, "psnr_loss")?;
    let m = mse(g, truth, pred)?;
    let m = g.unary(m, Unary::ClampMin(w.mse_floor));
    let ln = g.unary(m, Unary::Ln);
    // PSNR = -10 log10(mse)
    let neg_psnr = g.scale(ln, 10.0 / std::f64::consts::LN_10);
    Ok(g.add_scalar(neg_psnr, w.psnr_cap))
}

/// Sum over channels of the absolute difference of spatial means.
pub fn color_loss<T: Scalar>(g: &mut Graph<'_, T>, truth: Var, pred: Var) -> Result<Var> {
    same_shape(g, truth, pred, "color_loss")?;
    let mt = g.global_avg_pool(truth);
    let mp = g.global_avg_pool(pred);
    let d = g.sub(mt, mp)?;
    let a = g.unary(d, Unary::Abs);
    Ok(g.sum(a))
}

/// Sum over channels of the bin-averaged absolute difference between soft
/// histograms.
pub fn hist_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LossWeights,
    truth: Var,
    pred: Var,
) -> Result<Var> {
    same_shape(g, truth, pred, "hist_loss")?;
    let ht = g.soft_histogram(truth, w.hist_bins, w.hist_bandwidth)?;
    let hp = g.soft_histogram(pred, w.hist_bins, w.hist_bandwidth)?;
    let d = g.sub(ht, hp)?;
    let a = g.unary(d, Unary::Abs);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / w.hist_bins as f64))
}

/// Normalized Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut t: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Mean SSIM over valid windows and channels.
pub fn ssim<T: Scalar>(g: &mut Graph<'_, T>, w: &LossWeights, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "ssim")?;
    let (h, wd, _) = g.value(a).hwc()?;
    let k = w.ssim_window;
    if h < k || wd < k {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{wd} is smaller than the {k}x{k} window"),
        ));
    }
    let taps = gaussian_taps(k, w.ssim_sigma);
    let mu_a = g.filter_valid(a, &taps)?;
    let mu_b = g.filter_valid(b, &taps)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.filter_valid(aa, &taps)?;
    let e_bb = g.filter_valid(bb, &taps)?;
    let e_ab = g.filter_valid(ab, &taps)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, w.ssim_c1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, w.ssim_c2);
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.add_scalar(d1, w.ssim_c1);
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.add_scalar(d2, w.ssim_c2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

pub fn ssim_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LossWeights,
    truth: Var,
    pred: Var,
) -> Result<Var> {
    let s = ssim(g, w, truth, pred)?;
    let neg = g.scale(s, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Where the frozen perceptual weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum ExtractorSource {
    SeededRandom { seed: u64 },
    File { path: std::path::PathBuf },
}

impl Default for ExtractorSource {
    fn default() -> Self {
        ExtractorSource::SeededRandom { seed: 0x5eed }
    }
}

pub const EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];

/// Frozen stack of stride-2 `3x3` convolution + ReLU stages.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    /// Kernel (`3 x 3 x cin x cout`) and bias of each stage.
    stages: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    pub fn seeded(seed: u64, widths: &[usize]) -> Self {
        let mut init = Init::new(seed);
        let mut cin = 3;
        let stages = widths
            .iter()
            .map(|&cout| {
                let k: Tensor = init.conv(3, cin, cout);
                cin = cout;
                (k, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { stages }
    }

    pub fn from_source(source: &ExtractorSource) -> Result<Self> {
        match source {
            ExtractorSource::SeededRandom { seed } => Ok(Self::seeded(*seed, &EXTRACTOR_WIDTHS)),
            ExtractorSource::File { path } => Self::load(path),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Reads `stageN.weight` / `stageN.bias` tensors from a file in the
    /// checkpoint format with kind `extractor`.
    pub fn load(path: &Path) -> Result<Self> {
        let f = checkpoint::read(path)?;
        if f.kind != "extractor" {
            return Err(Error::ConfigMismatch(format!(
                "{} holds `{}` weights, not an extractor",
                path.display(),
                f.kind
            )));
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0.. {
            let find = |suffix: &str| {
                f.tensors
                    .iter()
                    .find(|(n, _)| *n == format!("stage{i}.{suffix}"))
                    .map(|(_, t)| t.clone())
            };
            let Some(k) = find("weight") else { break };
            let cout = match *k.shape() {
                [3, 3, c, o] if c == cin => o,
                _ => {
                    return Err(Error::TensorShapeMismatch {
                        name: format!("stage{i}.weight"),
                        expected: vec![3, 3, cin, 0],
                        found: k.shape().to_vec(),
                    })
                }
            };
            let b = find("bias").unwrap_or_else(|| Tensor::zeros(&[cout]));
            if b.shape() != [cout] {
                return Err(Error::TensorShapeMismatch {
                    name: format!("stage{i}.bias"),
                    expected: vec![cout],
                    found: b.shape().to_vec(),
                });
            }
            stages.push((k, b));
            cin = cout;
        }
        if stages.is_empty() {
            return Err(Error::Corrupt(format!(
                "{} has no extractor stages",
                path.display()
            )));
        }
        Ok(Self { stages })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, String)> = (0..self.stages.len())
            .map(|i| (format!("stage{i}.weight"), format!("stage{i}.bias")))
            .collect();
        let mut tensors = Vec::new();
        for ((kn, bn), (k, b)) in names.iter().zip(&self.stages) {
            tensors.push((kn.as_str(), k));
            tensors.push((bn.as_str(), b));
        }
        checkpoint::write(path, "extractor", "{}", &tensors)
    }

    /// Feature maps of every stage.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x;
        for (i, (k, b)) in self.stages.iter().enumerate() {
            let (h, w, _) = g.value(y).hwc()?;
            if h < 3 || w < 3 {
                return Err(Error::shape(
                    "perceptual",
                    format!("stage {i} input is {h}x{w}; the extractor needs larger images"),
                ));
            }
            let kv = g.input(k.cast());
            let bv = g.input(b.cast());
            let c = g.conv2d(y, kv, 2, Padding::Same)?;
            let c = g.add_bias(c, bv)?;
            y = g.relu(c);
            out.push(y);
        }
        Ok(out)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w) = (h, w);
        let mut f = 0;
        for (k, _) in &self.stages {
            let s = k.shape();
            (h, w) = (h.div_ceil(2), w.div_ceil(2));
            f += 2 * (h * w * 9 * s[2] * s[3]) as u64;
        }
        f
    }
}

/// Weighted sum over stages of the size-normalized squared feature distance.
pub fn perceptual_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LossWeights,
    extractor: &FeatureExtractor,
    truth: Var,
    pred: Var,
) -> Result<Var> {
    same_shape(g, truth, pred, "perceptual_loss")?;
    let ft = extractor.features(g, truth)?;
    let fp = extractor.features(g, pred)?;
    let mut total: Option<Var> = None;
    for (j, (a, b)) in ft.into_iter().zip(fp).enumerate() {
        let weight = w.perceptual_layer_weights.get(j).copied().unwrap_or(0.0);
        if weight == 0.0 {
            continue;
        }
        let d = g.sub(a, b)?;
        let sq = g.unary(d, Unary::Square);
        let m = g.mean(sq);
        let m = g.scale(m, weight);
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.input(Tensor::scalar(T::zero())),
    })
}

pub const TERM_NAMES: [&str; 6] = ["smooth_l1", "psnr", "color", "hist", "perceptual", "ssim"];

/// Total loss and its unweighted terms, in [`TERM_NAMES`] order.
pub struct LossTerms {
    pub total: Var,
    pub terms: [Var; 6],
}

pub fn total_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LossWeights,
    extractor: &FeatureExtractor,
    truth: Var,
    pred: Var,
) -> Result<LossTerms> {
    let s1 = smooth_l1(g, truth, pred)?;
    let psnr = psnr_loss(g, w, truth, pred)?;
    let color = color_loss(g, truth, pred)?;
    let hist = hist_loss(g, w, truth, pred)?;
    let perc = perceptual_loss(g, w, extractor, truth, pred)?;
    let ssim = ssim_loss(g, w, truth, pred)?;
    let terms = [s1, psnr, color, hist, perc, ssim];
    let mut total = s1;
    for (&t, &a) in terms[1..].iter().zip(&w.alphas()) {
        if a != 0.0 {
            let weighted = g.scale(t, a);
            total = g.add(total, weighted)?;
        }
    }
    Ok(LossTerms { total, terms })
}

// ---- evaluation metrics ----

/// PSNR in dB on the unit range, with the MSE floored at `1e-8` (80 dB).
pub fn psnr(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", truth.shape(), pred.shape()),
        ));
    }
    let mse = truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / truth.len() as f64;
    Ok(-10.0 * mse.max(1e-8).log10())
}

/// SSIM similarity (not the loss), evaluated in 64-bit precision.
pub fn ssim_index(truth: &Tensor, pred: &Tensor, w: &LossWeights) -> Result<f64> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let a = g.input(truth.cast());
    let b = g.input(pred.cast());
    let s = ssim(&mut g, w, a, b)?;
    Ok(g.value(s).data()[0])
}

/// Hard per-channel histogram with `bins` equal bins over `[0, 1]`,
/// normalized to sum to one. For reporting only.
pub fn hard_histogram(img: &Tensor, bins: usize) -> Result<Tensor> {
    let (_, _, c) = img.hwc()?;
    let mut h = vec![0.0f32; c * bins];
    let per = (img.len() / c) as f32;
    for (i, &v) in img.data().iter().enumerate() {
        let b = ((v.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
        h[(i % c) * bins + b] += 1.0 / per;
    }
    Tensor::new(&[c, bins], h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(
        f: impl Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>,
        a: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> f64 {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let out = f(&mut g, va, vb).unwrap();
        g.value(out).data()[0]
    }

    #[test]
    fn smooth_l1_values() {
        let a = Tensor::<f64>::zeros(&[2, 2, 3]);
        assert_eq!(eval(smooth_l1, &a, &a), 0.0);
        assert!((eval(smooth_l1, &a, &Tensor::full(&[2, 2, 3], 0.5)) - 0.125).abs() < 1e-12);
        assert!((eval(smooth_l1, &a, &Tensor::full(&[2, 2, 3], 2.0)) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn psnr_loss_values() {
        let w = LossWeights::default();
        let a = Tensor::<f64>::zeros(&[2, 2, 3]);
        let f = |g: &mut Graph<'_, f64>, x, y| psnr_loss(g, &w, x, y);
        assert!(eval(f, &a, &Tensor::full(&[2, 2, 3], 0.01)).abs() < 1e-9);
        assert!((eval(f, &a, &Tensor::full(&[2, 2, 3], 0.1)) - 20.0).abs() < 1e-9);
        assert!((eval(f, &a, &a) + 40.0).abs() < 1e-9);
    }

    #[test]
    fn color_loss_one_channel_shift() {
        let a = Tensor::<f64>::from_fn(&[3, 3, 3], |i| (i % 7) as f64 / 7.0);
        let mut b = a.clone();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            if i % 3 == 1 {
                *v += 0.1;
            }
        }
        assert!((eval(color_loss, &a, &b) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t[0], t[10]);
        assert!(t[5] > t[4]);
    }

    #[test]
    fn metric_psnr_of_uniform_difference() {
        let a = Tensor::zeros(&[4, 4, 3]);
        let b = Tensor::full(&[4, 4, 3], 0.05);
        assert!((psnr(&a, &b).unwrap() - 20.0 * (1.0f64 / 0.05).log10()).abs() < 1e-3);
        assert!((psnr(&a, &a).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn hard_histogram_sums_to_one() {
        let img = Tensor::from_fn(&[4, 4, 3], |i| (i % 11) as f32 / 10.0);
        let h = hard_histogram(&img, 8).unwrap();
        for row in h.data().chunks(8) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_negative_alpha() {
        let mut w = LossWeights::default();
        w.alpha3 = -1.0;
        assert!(w.validate().is_err());
    }
}
