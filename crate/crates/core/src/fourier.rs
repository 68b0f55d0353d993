//! Orthonormal 2D DFT on two-channel (real, imaginary) images.
//!
//! A complex image is a tensor whose last three axes are `[2, H, W]`:
//! channel 0 holds the real plane and channel 1 the imaginary plane. Any
//! leading axes are treated as a batch. Both directions carry a `1/sqrt(n)`
//! factor per axis so the transform is unitary and `idft2` is its adjoint.
//!
//! k-space arrays produced here are uncentered (DC at index `(0, 0)`);
//! [`fftshift`] moves DC to `(H/2, W/2)` for display and mask authoring.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lengths at or below this use a precomputed twiddle matrix.
pub const DIRECT_MAX_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Direct,
    Fft,
}

impl Backend {
    pub fn for_len(n: usize) -> Self {
        if n <= DIRECT_MAX_LEN {
            Backend::Direct
        } else {
            Backend::Fft
        }
    }
}

enum Kernel<T: Real> {
    Direct { cos: Vec<T>, sin: Vec<T> },
    Fft(Arc<dyn Fft<T>>),
}

/// Unitary 1D DFT of a fixed length.
pub struct Dft1d<T: Real> {
    n: usize,
    direction: Direction,
    scale: T,
    kernel: Kernel<T>,
}

impl<T: Real> Dft1d<T> {
    pub fn new(n: usize, direction: Direction) -> Self {
        Self::with_backend(n, direction, Backend::for_len(n))
    }

    pub fn with_backend(n: usize, direction: Direction, backend: Backend) -> Self {
        let kernel = match backend {
            Backend::Direct => {
                let (cos, sin) = (0..n)
                    .map(|m| {
                        let theta = 2.0 * PI * m as f64 / n as f64;
                        (T::of(theta.cos()), T::of(theta.sin()))
                    })
                    .unzip();
                Kernel::Direct { cos, sin }
            }
            Backend::Fft => {
                let mut planner = FftPlanner::new();
                let fft = match direction {
                    Direction::Forward => planner.plan_fft_forward(n),
                    Direction::Inverse => planner.plan_fft_inverse(n),
                };
                Kernel::Fft(fft)
            }
        };
        Dft1d {
            n,
            direction,
            scale: T::of(1.0 / (n as f64).sqrt()),
            kernel,
        }
    }

    /// Transforms `buf` in place. `scratch` must hold `n` entries.
    fn apply(&self, buf: &mut [Complex<T>], scratch: &mut [Complex<T>]) {
        let n = self.n;
        match &self.kernel {
            Kernel::Direct { cos, sin } => {
                let sign = match self.direction {
                    Direction::Forward => -T::one(),
                    Direction::Inverse => T::one(),
                };
                for (k, out) in scratch.iter_mut().enumerate().take(n) {
                    let mut acc_re = T::zero();
                    let mut acc_im = T::zero();
                    let mut idx = 0usize;
                    for x in buf.iter() {
                        let c = cos[idx];
                        let s = sign * sin[idx];
                        acc_re += x.re * c - x.im * s;
                        acc_im += x.re * s + x.im * c;
                        idx += k;
                        if idx >= n {
                            idx -= n;
                        }
                    }
                    *out = Complex::new(acc_re * self.scale, acc_im * self.scale);
                }
                buf.copy_from_slice(&scratch[..n]);
            }
            Kernel::Fft(fft) => {
                fft.process(buf);
                for v in buf.iter_mut() {
                    *v = Complex::new(v.re * self.scale, v.im * self.scale);
                }
            }
        }
    }
}

/// Separable 2D transform for one grid size and direction.
pub struct Dft2Plan<T: Real> {
    height: usize,
    width: usize,
    rows: Dft1d<T>,
    cols: Dft1d<T>,
}

impl<T: Real> Dft2Plan<T> {
    pub fn new(height: usize, width: usize, direction: Direction) -> Self {
        Dft2Plan {
            height,
            width,
            rows: Dft1d::new(width, direction),
            cols: Dft1d::new(height, direction),
        }
    }

    pub fn with_backend(height: usize, width: usize, direction: Direction, backend: Backend) -> Self {
        Dft2Plan {
            height,
            width,
            rows: Dft1d::with_backend(width, direction, backend),
            cols: Dft1d::with_backend(height, direction, backend),
        }
    }

    /// Transforms one image given as separate real and imaginary planes.
    pub fn apply_planes(&self, re: &mut [T], im: &mut [T]) {
        let (h, w) = (self.height, self.width);
        debug_assert!(re.len() == h * w && im.len() == h * w);
        let mut line = vec![Complex::new(T::zero(), T::zero()); h.max(w)];
        let mut scratch = line.clone();
        for r in 0..h {
            let row = &mut line[..w];
            for (c, v) in row.iter_mut().enumerate() {
                *v = Complex::new(re[r * w + c], im[r * w + c]);
            }
            self.rows.apply(row, &mut scratch);
            for (c, v) in row.iter().enumerate() {
                re[r * w + c] = v.re;
                im[r * w + c] = v.im;
            }
        }
        for c in 0..w {
            let col = &mut line[..h];
            for (r, v) in col.iter_mut().enumerate() {
                *v = Complex::new(re[r * w + c], im[r * w + c]);
            }
            self.cols.apply(col, &mut scratch);
            for (r, v) in col.iter().enumerate() {
                re[r * w + c] = v.re;
                im[r * w + c] = v.im;
            }
        }
    }

    /// Transforms every `[2, H, W]` image packed contiguously in `data`.
    pub fn apply_batch(&self, data: &mut [T]) {
        let plane = self.height * self.width;
        for image in data.chunks_mut(2 * plane) {
            let (re, im) = image.split_at_mut(plane);
            self.apply_planes(re, im);
        }
    }
}

/// Checks that `shape` ends in `[2, H, W]` and returns `(H, W)`.
pub fn complex_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., 2, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        _ => Err(Error::shape(
            "complex image",
            format!("expected trailing [2, H, W], got {:?}", shape),
        )),
    }
}

fn transform<T: Real>(img: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let (h, w) = complex_dims(img.shape())?;
    let mut out = img.clone();
    Dft2Plan::new(h, w, direction).apply_batch(out.data_mut());
    Ok(out)
}

/// Forward orthonormal DFT over the last two axes.
pub fn dft2<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    transform(img, Direction::Forward)
}

/// Inverse orthonormal DFT over the last two axes.
pub fn idft2<T: Real>(kspace: &Tensor<T>) -> Result<Tensor<T>> {
    transform(kspace, Direction::Inverse)
}

/// Source index for output index `i` after a circular shift by `offset`.
fn rolled(i: usize, n: usize, offset: usize) -> usize {
    (i + n - offset % n) % n
}

fn roll_last2<T: Real>(grid: &Tensor<T>, dy: usize, dx: usize) -> Result<Tensor<T>> {
    let shape = grid.shape();
    if shape.len() < 2 {
        return Err(Error::shape("fftshift", format!("need >= 2 axes, got {:?}", shape)));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = grid.clone();
    roll_planes(grid.data(), out.data_mut(), h, w, dy, dx);
    Ok(out)
}

/// Circularly shifts each `h×w` plane so that `dst[(y+dy)%h][(x+dx)%w] = src[y][x]`.
pub(crate) fn roll_planes<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize, dy: usize, dx: usize) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    for (s, d) in src.chunks(plane).zip(dst.chunks_mut(plane)) {
        for y in 0..h {
            let sy = rolled(y, h, dy);
            for x in 0..w {
                d[y * w + x] = s[sy * w + rolled(x, w, dx)];
            }
        }
    }
}

/// Moves DC from `(0, 0)` to `(H/2, W/2)` on the last two axes.
pub fn fftshift<T: Real>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grid.shape();
    let (h, w) = (s[s.len().saturating_sub(2)], s[s.len().saturating_sub(1)]);
    roll_last2(grid, h / 2, w / 2)
}

/// Inverse of [`fftshift`], also for odd sizes.
pub fn ifftshift<T: Real>(grid: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grid.shape();
    let (h, w) = (s[s.len().saturating_sub(2)], s[s.len().saturating_sub(1)]);
    roll_last2(grid, h - h / 2, w - w / 2)
}

/// Per-pixel magnitude of every `[2, H, W]` image; drops the channel axis.
pub fn magnitude<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = complex_dims(img.shape())?;
    let plane = h * w;
    let mut shape = img.shape().to_vec();
    shape.remove(shape.len() - 3);
    let mut data = Vec::with_capacity(img.len() / 2);
    for image in img.data().chunks(2 * plane) {
        let (re, im) = image.split_at(plane);
        data.extend(re.iter().zip(im).map(|(&a, &b)| (a * a + b * b).sqrt()));
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_complex(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn delta_at_origin_spreads_evenly() {
        let mut x = Tensor::<f64>::zeros(&[2, 2, 2]);
        x.data_mut()[0] = 1.0;
        let k = dft2(&x).unwrap();
        for v in &k.data()[..4] {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert!(k.data()[4..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_image_has_only_dc() {
        let mut x = Tensor::<f64>::zeros(&[2, 2, 2]);
        x.data_mut()[..4].fill(1.0);
        let k = dft2(&x).unwrap();
        assert!((k.data()[0] - 2.0).abs() < 1e-15);
        assert!(k.data()[1..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn idft_of_dc_delta_is_flat() {
        let mut k = Tensor::<f64>::zeros(&[2, 4, 5]);
        k.data_mut()[0] = 1.0;
        let x = idft2(&k).unwrap();
        let expected = 1.0 / 20f64.sqrt();
        assert!(x.data()[..20].iter().all(|v| (v - expected).abs() < 1e-14));
        assert!(x.data()[20..].iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn linearity() {
        let x = random_complex(6, 4, 1);
        let y = random_complex(6, 4, 2);
        let combo = x.zip_map(&y, |a, b| 2.0 * a - 0.5 * b).unwrap();
        let lhs = dft2(&combo).unwrap();
        let rhs = dft2(&x)
            .unwrap()
            .zip_map(&dft2(&y).unwrap(), |a, b| 2.0 * a - 0.5 * b)
            .unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backends_agree() {
        for &(h, w) in &[(8, 8), (5, 7), (64, 32)] {
            let x = random_complex(h, w, 3);
            for dir in [Direction::Forward, Direction::Inverse] {
                let mut a = x.clone();
                let mut b = x.clone();
                Dft2Plan::<f64>::with_backend(h, w, dir, Backend::Direct).apply_batch(a.data_mut());
                Dft2Plan::<f64>::with_backend(h, w, dir, Backend::Fft).apply_batch(b.data_mut());
                for (p, q) in a.data().iter().zip(b.data()) {
                    assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn shift_moves_center_to_origin() {
        let mut x = Tensor::<f64>::zeros(&[4, 4]);
        x.data_mut()[2 * 4 + 2] = 1.0;
        // DC-centered input: ifftshift brings the center to the origin, fftshift is its inverse.
        let y = ifftshift(&x).unwrap();
        assert_eq!(y.data()[0], 1.0);
        let z = fftshift(&x).unwrap();
        assert_eq!(z.data()[0], 1.0);
    }

    #[test]
    fn fftshift_moves_origin_to_center_odd() {
        let mut x = Tensor::<f64>::zeros(&[5, 3]);
        x.data_mut()[0] = 1.0;
        let y = fftshift(&x).unwrap();
        assert_eq!(y.data()[2 * 3 + 1], 1.0);
        assert_eq!(ifftshift(&y).unwrap(), x);
    }

    #[test]
    fn shift_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[3, 5], 2.5);
        assert_eq!(fftshift(&x).unwrap(), x);
    }

    #[test]
    fn rejects_non_complex_layout() {
        assert!(dft2(&Tensor::<f64>::zeros(&[3, 4, 4])).is_err());
    }
}
