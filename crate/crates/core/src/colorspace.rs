//! RGB, CIELAB and YUV conversions.
//!
//! RGB is treated as linear light in `[0, 1]`; [`srgb_decode`] and
//! [`srgb_encode`] are available for gamma-encoded files. LAB goes through
//! XYZ with the sRGB/D65 primaries. Each conversion exists twice: on plain
//! tensors ([`rgb_to_lab`] and friends) and as recorded graph operations
//! ([`to_net`], [`from_net`]) so the network can differentiate through it.

use serde::{Deserialize, Serialize};

use crate::autograd::{lab_f, lab_f_inv, Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Lab,
    Yuv,
}

impl ColorSpace {
    /// Nominal `(lo, hi)` of each plane. LAB chroma is open-ended; the
    /// interval given is the one used for normalization.
    pub fn ranges(self) -> [(f64, f64); 3] {
        match self {
            ColorSpace::Rgb => [(0.0, 1.0); 3],
            ColorSpace::Lab => [(0.0, 100.0), (-128.0, 128.0), (-128.0, 128.0)],
            ColorSpace::Yuv => [(0.0, 1.0), (-U_MAX, U_MAX), (-V_MAX, V_MAX)],
        }
    }

    pub fn plane_names(self) -> [&'static str; 3] {
        match self {
            ColorSpace::Rgb => ["R", "G", "B"],
            ColorSpace::Lab => ["L*", "a*", "b*"],
            ColorSpace::Yuv => ["Y", "U", "V"],
        }
    }
}

pub const U_MAX: f64 = 0.436;
pub const V_MAX: f64 = 0.615;

/// Reference white, with `Y` scaled to 100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitePoint {
    pub xn: f64,
    pub yn: f64,
    pub zn: f64,
}

impl WhitePoint {
    pub const D65: WhitePoint = WhitePoint {
        xn: 95.047,
        yn: 100.0,
        zn: 108.883,
    };

    pub fn new(xn: f64, yn: f64, zn: f64) -> Result<Self> {
        if !(xn > 0.0 && yn > 0.0 && zn > 0.0) {
            return Err(Error::Config(format!(
                "white point components must be positive, got ({xn}, {yn}, {zn})"
            )));
        }
        Ok(Self { xn, yn, zn })
    }

    fn as_array(&self) -> [f64; 3] {
        [self.xn, self.yn, self.zn]
    }
}

impl Default for WhitePoint {
    fn default() -> Self {
        Self::D65
    }
}

type Mat3 = [[f64; 3]; 3];

pub const RGB_TO_YUV: Mat3 = [
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
];

pub const YUV_TO_RGB: Mat3 = [
    [1.0, -0.000012, 1.139835],
    [1.000004, -0.394646, -0.580594],
    [0.99998, 2.032112, -0.000015],
];

/// Linear sRGB to XYZ (D65), for `Y` in `[0, 1]`.
pub const RGB_TO_XYZ: Mat3 = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn mul3(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn inverse3(m: &Mat3) -> Mat3 {
    let [[a, b, c], [d, e, f], [g, h, i]] = *m;
    let det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    let inv = 1.0 / det;
    [
        [
            (e * i - f * h) * inv,
            (c * h - b * i) * inv,
            (b * f - c * e) * inv,
        ],
        [
            (f * g - d * i) * inv,
            (a * i - c * g) * inv,
            (c * d - a * f) * inv,
        ],
        [
            (d * h - e * g) * inv,
            (b * g - a * h) * inv,
            (a * e - b * d) * inv,
        ],
    ]
}

/// An image as three named planes in one color space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlanes {
    pub space: ColorSpace,
    /// `H x W x 3`.
    pub planes: Tensor,
    /// Number of values clamped into `[0, 1]` when producing RGB.
    pub clamped: usize,
}

impl ImagePlanes {
    /// Wraps RGB data, clamping into `[0, 1]`.
    pub fn from_rgb(rgb: Tensor) -> Result<Self> {
        let (_, _, c) = rgb.hwc()?;
        if c != 3 {
            return Err(Error::shape("image", format!("expected 3 planes, got {c}")));
        }
        let mut clamped = 0;
        let planes = rgb.map(|v| v.clamp(0.0, 1.0));
        for (a, b) in rgb.data().iter().zip(planes.data()) {
            if a != b {
                clamped += 1;
            }
        }
        Ok(Self {
            space: ColorSpace::Rgb,
            planes,
            clamped,
        })
    }

    pub fn new(space: ColorSpace, planes: Tensor) -> Result<Self> {
        let (_, _, c) = planes.hwc()?;
        if c != 3 {
            return Err(Error::shape("image", format!("expected 3 planes, got {c}")));
        }
        Ok(Self {
            space,
            planes,
            clamped: 0,
        })
    }

    /// One plane as an `H x W x 1` tensor.
    pub fn plane(&self, i: usize) -> Tensor {
        self.planes.narrow_last(i, 1)
    }

    fn expect(&self, space: ColorSpace, op: &str) -> Result<()> {
        if self.space != space {
            return Err(Error::Usage(format!(
                "{op} expects {space:?} planes, got {:?}",
                self.space
            )));
        }
        Ok(())
    }

    fn map_pixels(&self, space: ColorSpace, f: impl Fn([f64; 3]) -> [f64; 3]) -> ImagePlanes {
        let mut out = self.planes.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            let r = f([px[0] as f64, px[1] as f64, px[2] as f64]);
            for (d, v) in px.iter_mut().zip(r) {
                *d = v as f32;
            }
        }
        ImagePlanes {
            space,
            planes: out,
            clamped: 0,
        }
    }

    fn clamp_rgb(mut self) -> ImagePlanes {
        let mut clamped = 0;
        for v in self.planes.data_mut() {
            let c = v.clamp(0.0, 1.0);
            if c != *v {
                clamped += 1;
                *v = c;
            }
        }
        self.clamped = clamped;
        self
    }
}

pub fn rgb_to_yuv_pixel(rgb: [f64; 3]) -> [f64; 3] {
    mul3(&RGB_TO_YUV, rgb)
}

pub fn yuv_to_rgb_pixel(yuv: [f64; 3]) -> [f64; 3] {
    mul3(&YUV_TO_RGB, yuv)
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let xyz = mul3(&RGB_TO_XYZ, rgb);
    let n = wp.as_array();
    let [fx, fy, fz] = [0, 1, 2].map(|i| lab_f(100.0 * xyz[i] / n[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb_pixel(lab: [f64; 3], wp: &WhitePoint) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let f = [fy + lab[1] / 500.0, fy, fy - lab[2] / 200.0];
    let n = wp.as_array();
    let xyz = [0, 1, 2].map(|i| lab_f_inv(f[i]) * n[i] / 100.0);
    mul3(&inverse3(&RGB_TO_XYZ), xyz)
}

pub fn rgb_to_yuv(img: &ImagePlanes) -> Result<ImagePlanes> {
    img.expect(ColorSpace::Rgb, "rgb_to_yuv")?;
    Ok(img.map_pixels(ColorSpace::Yuv, rgb_to_yuv_pixel))
}

/// Inverse of [`rgb_to_yuv`]; out-of-range results are clamped and counted.
pub fn yuv_to_rgb(img: &ImagePlanes) -> Result<ImagePlanes> {
    img.expect(ColorSpace::Yuv, "yuv_to_rgb")?;
    Ok(img
        .map_pixels(ColorSpace::Rgb, yuv_to_rgb_pixel)
        .clamp_rgb())
}

pub fn rgb_to_lab(img: &ImagePlanes, wp: &WhitePoint) -> Result<ImagePlanes> {
    img.expect(ColorSpace::Rgb, "rgb_to_lab")?;
    Ok(img.map_pixels(ColorSpace::Lab, |p| rgb_to_lab_pixel(p, wp)))
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut results are clamped and counted.
pub fn lab_to_rgb(img: &ImagePlanes, wp: &WhitePoint) -> Result<ImagePlanes> {
    img.expect(ColorSpace::Lab, "lab_to_rgb")?;
    Ok(img
        .map_pixels(ColorSpace::Rgb, |p| lab_to_rgb_pixel(p, wp))
        .clamp_rgb())
}

/// Per-plane affine map of the nominal range onto `[-1, 1]`.
pub fn normalize_for_net(img: &ImagePlanes) -> Tensor {
    let ranges = img.space.ranges();
    let mut out = img.planes.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (lo, hi) = ranges[i % 3];
        *v = ((2.0 * (*v as f64 - lo) / (hi - lo)) - 1.0) as f32;
    }
    out
}

pub fn denormalize_from_net(t: &Tensor, space: ColorSpace) -> Result<ImagePlanes> {
    let ranges = space.ranges();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (lo, hi) = ranges[i % 3];
        *v = (lo + (*v as f64 + 1.0) * 0.5 * (hi - lo)) as f32;
    }
    ImagePlanes::new(space, out)
}

/// Gamma-encoded sRGB to linear light.
pub fn srgb_decode(v: f32) -> f32 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(v: f32) -> f32 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

// ---- differentiable versions ----

/// `rows x 3` times `m^T`, plus `offset`: applies `m` to every pixel.
fn affine_pixels<T: Scalar>(
    g: &mut Graph<'_, T>,
    rows: Var,
    m: &Mat3,
    offset: [f64; 3],
) -> Result<Var> {
    let mt = Tensor::from_fn(&[3, 3], |i| T::of(m[i % 3][i / 3]));
    let mt = g.input(mt);
    let y = g.matmul(rows, mt)?;
    if offset == [0.0; 3] {
        return Ok(y);
    }
    let b = g.input(Tensor::new(&[3], offset.map(T::of).to_vec())?);
    g.add_bias(y, b)
}

fn scale_rows(m: &Mat3, s: [f64; 3]) -> Mat3 {
    [0, 1, 2].map(|r| m[r].map(|v| v * s[r]))
}

fn scale_cols(m: &Mat3, s: [f64; 3]) -> Mat3 {
    m.map(|row| [row[0] * s[0], row[1] * s[1], row[2] * s[2]])
}

/// Normalization as `n = x * scale + offset` per plane.
fn norm_coeffs(space: ColorSpace) -> ([f64; 3], [f64; 3]) {
    let r = space.ranges();
    let scale = r.map(|(lo, hi)| 2.0 / (hi - lo));
    let offset = r.map(|(lo, hi)| -2.0 * lo / (hi - lo) - 1.0);
    (scale, offset)
}

/// RGB (`H x W x 3`) to normalized planes of `space`, recorded on `g`.
pub fn to_net<T: Scalar>(
    g: &mut Graph<'_, T>,
    rgb: Var,
    space: ColorSpace,
    wp: &WhitePoint,
) -> Result<Var> {
    let (h, w, _) = g.value(rgb).hwc()?;
    let rows = g.reshape(rgb, &[h * w, 3])?;
    let (s, o) = norm_coeffs(space);
    let out = match space {
        ColorSpace::Rgb => affine_pixels(g, rows, &scale_rows(&IDENTITY, s), o)?,
        ColorSpace::Yuv => affine_pixels(g, rows, &scale_rows(&RGB_TO_YUV, s), o)?,
        ColorSpace::Lab => {
            let n = wp.as_array().map(|v| 100.0 / v);
            let t = affine_pixels(g, rows, &scale_rows(&RGB_TO_XYZ, n), [0.0; 3])?;
            let f = g.unary(t, Unary::LabF);
            let lab = [
                [0.0, 116.0, 0.0],
                [500.0, -500.0, 0.0],
                [0.0, 200.0, -200.0],
            ];
            let off = [-16.0 * s[0] + o[0], o[1], o[2]];
            affine_pixels(g, f, &scale_rows(&lab, s), off)?
        }
    };
    g.reshape(out, &[h, w, 3])
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Inverse of [`to_net`]; the result is not clamped.
pub fn from_net<T: Scalar>(
    g: &mut Graph<'_, T>,
    planes: Var,
    space: ColorSpace,
    wp: &WhitePoint,
) -> Result<Var> {
    let (h, w, _) = g.value(planes).hwc()?;
    let rows = g.reshape(planes, &[h * w, 3])?;
    let (s, o) = norm_coeffs(space);
    // x = (n - o) / s
    let inv_s = s.map(|v| 1.0 / v);
    let back = [0, 1, 2].map(|i| -o[i] / s[i]);
    let out = match space {
        ColorSpace::Rgb => affine_pixels(g, rows, &scale_cols(&IDENTITY, inv_s), back)?,
        ColorSpace::Yuv => {
            let m = scale_cols(&YUV_TO_RGB, inv_s);
            let off = mul3(&YUV_TO_RGB, back);
            affine_pixels(g, rows, &m, off)?
        }
        ColorSpace::Lab => {
            // f = lab * A + c, with lab = n / s + back
            let a = [
                [1.0 / 116.0, 1.0 / 500.0, 0.0],
                [1.0 / 116.0, 0.0, 0.0],
                [1.0 / 116.0, 0.0, -1.0 / 200.0],
            ];
            let c = [16.0 / 116.0; 3];
            let off = {
                let m = mul3(&a, back);
                [m[0] + c[0], m[1] + c[1], m[2] + c[2]]
            };
            let f = affine_pixels(g, rows, &scale_cols(&a, inv_s), off)?;
            let t = g.unary(f, Unary::LabFInv);
            let n = wp.as_array().map(|v| v / 100.0);
            affine_pixels(g, t, &scale_cols(&inverse3(&RGB_TO_XYZ), n), [0.0; 3])?
        }
    };
    g.reshape(out, &[h, w, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn yuv_rows_sum_as_printed() {
        let sums = RGB_TO_YUV.map(|r| r.iter().sum::<f64>());
        assert!((sums[0] - 1.0).abs() < 1e-12);
        assert!((sums[1] - 0.00001).abs() < 1e-12);
        assert!(sums[2].abs() < 1e-12);
    }

    #[test]
    fn embedded_yuv_inverse_matches_analytic() {
        let inv = inverse3(&RGB_TO_YUV);
        for r in 0..3 {
            for c in 0..3 {
                assert!((inv[r][c] - YUV_TO_RGB[r][c]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn yuv_of_sample_colour() {
        let [y, u, v] = rgb_to_yuv_pixel([0.5, 0.25, 0.75]);
        assert!((y - 0.38175).abs() < 1e-12);
        assert!((u - (-0.14713 * 0.5 - 0.28886 * 0.25 + 0.436 * 0.75)).abs() < 1e-12);
        assert!((v - (0.615 * 0.5 - 0.51499 * 0.25 - 0.10001 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn lab_anchors() {
        let wp = WhitePoint::D65;
        let white = rgb_to_lab_pixel([1.0; 3], &wp);
        assert!((white[0] - 100.0).abs() < 1e-3);
        assert!(white[1].abs() < 1e-3 && white[2].abs() < 1e-3);
        assert_eq!(rgb_to_lab_pixel([0.0; 3], &wp), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalization_midpoints() {
        let lab = ImagePlanes::new(
            ColorSpace::Lab,
            Tensor::new(&[1, 1, 3], vec![50.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(normalize_for_net(&lab).data(), &[0.0, 0.0, 0.0]);
        let yuv = ImagePlanes::new(
            ColorSpace::Yuv,
            Tensor::new(&[1, 1, 3], vec![0.38175, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert!((normalize_for_net(&yuv).data()[0] + 0.2365).abs() < 1e-6);
    }

    #[test]
    fn wrong_source_space_is_usage_error() {
        let img = ImagePlanes::new(ColorSpace::Yuv, Tensor::zeros(&[1, 1, 3])).unwrap();
        assert!(matches!(
            rgb_to_lab(&img, &WhitePoint::D65),
            Err(Error::Usage(_))
        ));
        assert!(matches!(rgb_to_yuv(&img), Err(Error::Usage(_))));
    }

    #[test]
    fn white_point_must_be_positive() {
        assert!(WhitePoint::new(95.0, 0.0, 108.0).is_err());
    }

    #[test]
    fn graph_conversion_matches_pixel_functions() {
        let store = ParamStore::<f64>::new();
        let rgb = Tensor::<f64>::from_fn(&[2, 3, 3], |i| ((i * 37) % 17) as f64 / 16.0);
        for space in [ColorSpace::Rgb, ColorSpace::Lab, ColorSpace::Yuv] {
            let mut g = Graph::new(&store);
            let x = g.input(rgb.clone());
            let n = to_net(&mut g, x, space, &WhitePoint::D65).unwrap();
            let back = from_net(&mut g, n, space, &WhitePoint::D65).unwrap();
            assert!(g.value(back).max_abs_diff(&rgb) < 1e-5, "{space:?}");
            let ranges = space.ranges();
            for (p, px) in rgb.data().chunks_exact(3).enumerate() {
                let px = [px[0], px[1], px[2]];
                let want = match space {
                    ColorSpace::Rgb => px,
                    ColorSpace::Lab => rgb_to_lab_pixel(px, &WhitePoint::D65),
                    ColorSpace::Yuv => rgb_to_yuv_pixel(px),
                };
                for c in 0..3 {
                    let (lo, hi) = ranges[c];
                    let norm = 2.0 * (want[c] - lo) / (hi - lo) - 1.0;
                    assert!((g.value(n).data()[p * 3 + c] - norm).abs() < 1e-9);
                }
            }
        }
    }
}
