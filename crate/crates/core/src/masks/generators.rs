//! Benchmark mask generators. Every generator samples an exact budget of
//! `ceil(alpha * n)` points (or lines) so compared masks share one
//! measurement budget.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{budget, top_k_indices, BinaryMask, ReadoutAxis};
use crate::error::{Error, Result};
use crate::fourier;
use crate::tensor::{Real, Tensor};

fn check_fraction(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Distance of `(y, x)` from the DC point `(h/2, w/2)`.
pub fn radial_distance(y: usize, x: usize, height: usize, width: usize) -> f64 {
    let dy = y as f64 - (height / 2) as f64;
    let dx = x as f64 - (width / 2) as f64;
    (dy * dy + dx * dx).sqrt()
}

/// Exactly `ceil(alpha * d)` points chosen uniformly without replacement.
pub fn gen_uniform_random(height: usize, width: usize, alpha: f64, seed: u64) -> Result<BinaryMask> {
    check_fraction(alpha)?;
    let d = height * width;
    let k = budget(alpha, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bits = vec![0u8; d];
    for &i in &order[..k] {
        bits[i] = 1;
    }
    BinaryMask::new(height, width, bits)
}

/// Variable-density random mask with inclusion probabilities proportional
/// to `(1 - r / r_max)^power`, capped at one and scaled so they sum to the
/// budget. Sampling is systematic over a seeded random order, which keeps
/// each point's inclusion probability and draws exactly the budget.
pub fn gen_variable_density(height: usize, width: usize, alpha: f64, power: f64, seed: u64) -> Result<BinaryMask> {
    check_fraction(alpha)?;
    if !(power >= 0.0) {
        return Err(Error::invalid(format!("density power must be >= 0, got {power}")));
    }
    let d = height * width;
    let k = budget(alpha, d);
    let radii: Vec<f64> = (0..d).map(|i| radial_distance(i / width, i % width, height, width)).collect();
    let r_max = radii.iter().cloned().fold(0.0, f64::max);
    let weights: Vec<f64> = radii
        .iter()
        .map(|&r| {
            if r_max == 0.0 {
                1.0
            } else {
                (1.0 - r / r_max).max(0.0).powf(power)
            }
        })
        .collect();
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if positive < k {
        return Err(Error::invalid(format!(
            "variable density with power {power} can reach only {positive} points, budget is {k}"
        )));
    }
    let density = calibrate_density(&weights, k as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    let offset: f64 = rng.gen();
    let mut bits = vec![0u8; d];
    let mut taken = 0;
    let mut cumulative = 0.0;
    let mut next = offset;
    for &i in &order {
        cumulative += density[i];
        if taken < k && next < cumulative {
            bits[i] = 1;
            taken += 1;
            next += 1.0;
        }
    }
    if taken < k {
        // Rounding left the budget short; top up with the densest unpicked points.
        let remaining: Vec<f64> = (0..d)
            .map(|i| if bits[i] == 1 { f64::NEG_INFINITY } else { density[i] })
            .collect();
        for i in top_k_indices(&remaining, k - taken) {
            bits[i] = 1;
        }
    }
    BinaryMask::new(height, width, bits)
}

/// Finds `c` with `sum(min(1, c * w)) == target` by bisection.
fn calibrate_density(weights: &[f64], target: f64) -> Vec<f64> {
    let total = |c: f64| weights.iter().map(|&w| (c * w).min(1.0)).sum::<f64>();
    let min_positive = weights.iter().cloned().filter(|&w| w > 0.0).fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, 1.0 / min_positive);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    weights.iter().map(|&w| (hi * w).min(1.0)).collect()
}

/// Equispaced Cartesian lines with an optional fully sampled center band.
///
/// `axis` gives the readout direction; with `ReadoutAxis::Rows` the selected
/// lines are whole columns. Of `L` lines, `n = ceil(alpha * L)` are kept:
/// `center_lines` around the DC line, then every
/// `floor((L - center_lines) / (n - center_lines))`-th remaining line.
pub fn gen_cartesian_equispaced(
    height: usize,
    width: usize,
    alpha: f64,
    axis: ReadoutAxis,
    center_lines: usize,
) -> Result<BinaryMask> {
    check_fraction(alpha)?;
    let l = axis.line_count(height, width);
    let n = budget(alpha, l);
    if n <= center_lines {
        return Err(Error::invalid(format!(
            "budget of {n} lines leaves nothing beyond {center_lines} center lines"
        )));
    }
    let mut lines = vec![0u8; l];
    let start = l / 2 - center_lines / 2;
    for line in &mut lines[start..start + center_lines] {
        *line = 1;
    }
    let remaining: Vec<usize> = (0..l).filter(|&i| lines[i] == 0).collect();
    let spacing = (l - center_lines) / (n - center_lines);
    for &i in remaining.iter().step_by(spacing.max(1)).take(n - center_lines) {
        lines[i] = 1;
    }
    Ok(BinaryMask::from_lines(&lines, axis, height, width))
}

/// Keeps the `ceil(alpha * d)` k-space points with the largest mean
/// magnitude spectrum over all slices of `volumes` (`[S, 2, H, W]` or
/// `[2, H, W]`). The mask is DC-centered.
pub fn gen_spectrum<'a, T: Real>(volumes: impl IntoIterator<Item = &'a Tensor<T>>, alpha: f64) -> Result<BinaryMask> {
    check_fraction(alpha)?;
    let mut acc: Option<Vec<f64>> = None;
    let mut dims = (0, 0);
    let mut slices = 0usize;
    for vol in volumes {
        let (h, w) = fourier::complex_dims(vol.shape())?;
        let spectrum = fourier::magnitude(&fourier::dft2(vol)?)?;
        let acc = acc.get_or_insert_with(|| {
            dims = (h, w);
            vec![0.0; h * w]
        });
        if dims != (h, w) {
            return Err(Error::shape(
                "spectrum mask",
                format!("slices of {}×{} and {h}×{w} cannot be averaged", dims.0, dims.1),
            ));
        }
        for plane in spectrum.data().chunks(h * w) {
            for (a, v) in acc.iter_mut().zip(plane) {
                *a += v.as_f64();
            }
            slices += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::invalid("spectrum mask needs at least one training image"))?;
    let (h, w) = dims;
    let mean = Tensor::new(vec![h, w], acc.into_iter().map(|v| v / slices as f64).collect())?;
    let centered = fourier::fftshift(&mean)?;
    let mut bits = vec![0u8; h * w];
    for i in top_k_indices(centered.data(), budget(alpha, h * w)) {
        bits[i] = 1;
    }
    BinaryMask::new(h, w, bits)
}

/// Probability mass near the two k-space axes of a DC-centered grid.
#[derive(Clone, Copy, Debug)]
pub struct WedgeMass {
    /// Mass within `half_angle` of the horizontal frequency axis.
    pub kx: f64,
    /// Mass within `half_angle` of the vertical frequency axis.
    pub ky: f64,
}

impl WedgeMass {
    pub fn ratio(&self) -> f64 {
        self.kx / self.ky
    }
}

/// Splits the mass of a DC-centered grid into the `±half_angle_deg` wedges
/// around the kx (column) and ky (row) axes. DC itself belongs to neither.
pub fn wedge_mass_ratio<T: Real>(grid: &Tensor<T>, half_angle_deg: f64) -> Result<WedgeMass> {
    let [h, w] = grid.shape() else {
        return Err(Error::shape("wedge mass", format!("expected [H, W], got {:?}", grid.shape())));
    };
    let (h, w) = (*h, *w);
    let (mut kx, mut ky) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 - (h / 2) as f64).abs();
            let dx = (x as f64 - (w / 2) as f64).abs();
            if dy == 0.0 && dx == 0.0 {
                continue;
            }
            let angle = dy.atan2(dx).to_degrees();
            let v = grid.data()[y * w + x].as_f64();
            if angle <= half_angle_deg {
                kx += v;
            }
            if angle >= 90.0 - half_angle_deg {
                ky += v;
            }
        }
    }
    Ok(WedgeMass { kx, ky })
}
