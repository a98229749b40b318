//! Two-dimensional discrete Fourier transforms of image planes.
//!
//! The forward transform is unnormalized (the DC bin of a constant `c` image
//! is `c * H * W`); the inverse carries the `1 / (H * W)` factor. Arbitrary
//! sizes are supported, prime factors included.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frequency-domain representation with separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(real: Tensor<T>, imag: Tensor<T>) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::shape(
                "complex",
                format!("real {:?} vs imag {:?}", real.shape(), imag.shape()),
            ));
        }
        Ok(Self { real, imag })
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> T {
        self.real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(&r, &i)| r * r + i * i)
            .sum()
    }
}

fn plane_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [h, w, 1] => Ok((*h, *w)),
        s => Err(Error::shape(
            "fft2",
            format!("expected H x W plane, got {s:?}"),
        )),
    }
}

/// In-place 2D transform of an `h x w` row-major complex buffer.
pub(crate) fn transform_in_place<T: Scalar>(
    buf: &mut [Complex<T>],
    h: usize,
    w: usize,
    inverse: bool,
) {
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(buf);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    if inverse {
        let s = T::one() / T::of((h * w) as f64);
        buf.iter_mut().for_each(|c| *c = *c * s);
    }
}

/// Transform of an interleaved `h x w x 2` (real, imaginary) buffer.
pub(crate) fn transform_interleaved<T: Scalar>(
    data: &[T],
    h: usize,
    w: usize,
    inverse: bool,
) -> Vec<T> {
    let mut buf: Vec<Complex<T>> = data
        .chunks_exact(2)
        .map(|p| Complex::new(p[0], p[1]))
        .collect();
    transform_in_place(&mut buf, h, w, inverse);
    buf.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Forward 2D DFT of a real plane (`H x W` or `H x W x 1`).
pub fn fft2<T: Scalar>(input: &Tensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w) = plane_dims(input)?;
    let mut buf: Vec<Complex<T>> = input
        .data()
        .iter()
        .map(|&v| Complex::new(v, T::zero()))
        .collect();
    transform_in_place(&mut buf, h, w, false);
    split(buf, input.shape())
}

/// Full complex inverse transform.
pub fn ifft2_complex<T: Scalar>(input: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w) = plane_dims(&input.real)?;
    let mut buf: Vec<Complex<T>> = input
        .real
        .data()
        .iter()
        .zip(input.imag.data())
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    transform_in_place(&mut buf, h, w, true);
    split(buf, input.shape())
}

/// Inverse 2D DFT, returning the real part.
pub fn ifft2<T: Scalar>(input: &ComplexTensor<T>) -> Result<Tensor<T>> {
    Ok(ifft2_complex(input)?.real)
}

fn split<T: Scalar>(buf: Vec<Complex<T>>, shape: &[usize]) -> Result<ComplexTensor<T>> {
    let real = Tensor::new(shape, buf.iter().map(|c| c.re).collect())?;
    let imag = Tensor::new(shape, buf.iter().map(|c| c.im).collect())?;
    Ok(ComplexTensor { real, imag })
}

/// `5 N log2 N` floating-point operations for an `N`-point transform.
pub fn fft_flops(h: usize, w: usize) -> u64 {
    let n = (h * w) as f64;
    (5.0 * n * n.log2()).round() as u64
}
