//! Reconstruction quality metrics on magnitude images.
//!
//! Volumes are `[S, H, W]` tensors of magnitudes. PSNR uses the peak of the
//! whole ground-truth volume and SSIM its dynamic range.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR value reported for a perfect reconstruction.
pub const PSNR_INFINITE: f64 = f64::INFINITY;

pub const LOG_KERNEL_SIZE: usize = 15;
pub const LOG_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Side of the square window; must be odd.
    pub window: usize,
    /// Dynamic range `L` of the ground truth.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            k1: 0.01,
            k2: 0.03,
            window: 7,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        SsimConfig {
            dynamic_range,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::invalid(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("SSIM constants k1, k2 must be positive"));
        }
        Ok(())
    }
}

fn same_len(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(op, format!("{} vs {} values", x.len(), y.len())));
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("mse", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("mae", x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// `10 log10(peak² d / ||x - x̂||²)`; [`PSNR_INFINITE`] on zero error.
pub fn psnr(x: &[f64], xhat: &[f64], peak: f64) -> Result<f64> {
    same_len("psnr", x, xhat)?;
    let err: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum();
    if err == 0.0 {
        return Ok(PSNR_INFINITE);
    }
    Ok(10.0 * (peak * peak * x.len() as f64 / err).log10())
}

/// Summed-area table with a zero row and column in front.
fn integral(values: impl Iterator<Item = f64>, h: usize, w: usize) -> Vec<f64> {
    let mut table = vec![0.0; (h + 1) * (w + 1)];
    let mut it = values;
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += it.next().unwrap_or(0.0);
            table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
        }
    }
    table
}

fn box_sum(table: &[f64], w: usize, y: usize, x: usize, n: usize) -> f64 {
    let s = w + 1;
    table[(y + n) * s + x + n] - table[y * s + x + n] - table[(y + n) * s + x] + table[y * s + x]
}

/// Mean SSIM over all fully interior windows, uniform weights, population
/// statistics.
pub fn ssim(x: &[f64], xhat: &[f64], height: usize, width: usize, cfg: &SsimConfig) -> Result<f64> {
    same_len("ssim", x, xhat)?;
    cfg.validate()?;
    if x.len() != height * width {
        return Err(Error::shape("ssim", format!("{} values for a {height}×{width} image", x.len())));
    }
    let n = cfg.window;
    if height < n || width < n {
        return Err(Error::invalid(format!(
            "image {height}×{width} is smaller than the {n}×{n} SSIM window"
        )));
    }
    let sx = integral(x.iter().copied(), height, width);
    let sy = integral(xhat.iter().copied(), height, width);
    let sxx = integral(x.iter().map(|v| v * v), height, width);
    let syy = integral(xhat.iter().map(|v| v * v), height, width);
    let sxy = integral(x.iter().zip(xhat).map(|(a, b)| a * b), height, width);
    let area = (n * n) as f64;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=height - n {
        for xi in 0..=width - n {
            let mx = box_sum(&sx, width, y, xi, n) / area;
            let my = box_sum(&sy, width, y, xi, n) / area;
            let vx = box_sum(&sxx, width, y, xi, n) / area - mx * mx;
            let vy = box_sum(&syy, width, y, xi, n) / area - my * my;
            let cxy = box_sum(&sxy, width, y, xi, n) / area - mx * my;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Laplacian-of-Gaussian kernel on an integer grid centered at zero,
/// shifted to sum to exactly zero. Row-major, `size × size`.
pub fn log_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let s2 = sigma * sigma;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let u = (i / size) as f64 - half;
            let v = (i % size) as f64 - half;
            let r2 = (u * u + v * v) / (2.0 * s2);
            -1.0 / (std::f64::consts::PI * s2 * s2) * (1.0 - r2) * (-r2).exp()
        })
        .collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

/// Folds an out-of-range index back into `[0, n)` by mirror reflection
/// about the edges (`d c b a | a b c d`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Filters an image with the LoG kernel using mirrored borders.
pub fn log_filter(img: &[f64], height: usize, width: usize) -> Vec<f64> {
    let size = LOG_KERNEL_SIZE;
    let half = (size / 2) as isize;
    let kernel = log_kernel(size, LOG_SIGMA);
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let interior = y as isize >= half
                && x as isize >= half
                && (y as isize) + half < height as isize
                && (x as isize) + half < width as isize;
            let mut acc = 0.0;
            for ky in 0..size {
                let sy = y as isize + ky as isize - half;
                let krow = &kernel[ky * size..(ky + 1) * size];
                if interior {
                    let row = &img[sy as usize * width + x - half as usize..][..size];
                    acc += krow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                } else {
                    let ry = reflect_index(sy, height);
                    for (kx, kv) in krow.iter().enumerate() {
                        let rx = reflect_index(x as isize + kx as isize - half, width);
                        acc += kv * img[ry * width + rx];
                    }
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// `||LoG(x) - LoG(x̂)||₂`, unnormalized.
pub fn hfen(x: &[f64], xhat: &[f64], height: usize, width: usize) -> Result<f64> {
    same_len("hfen", x, xhat)?;
    if x.len() != height * width {
        return Err(Error::shape("hfen", format!("{} values for a {height}×{width} image", x.len())));
    }
    let diff: Vec<f64> = x.iter().zip(xhat).map(|(a, b)| a - b).collect();
    Ok(log_filter(&diff, height, width).iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceMetrics {
    pub mse: f64,
    pub mae: f64,
    pub hfen: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub slices: Vec<SliceMetrics>,
    pub mean: SliceMetrics,
}

impl MetricsReport {
    fn from_slices(slices: Vec<SliceMetrics>) -> Self {
        let n = slices.len() as f64;
        let avg = |f: fn(&SliceMetrics) -> f64| slices.iter().map(f).sum::<f64>() / n;
        let mean = SliceMetrics {
            mse: avg(|s| s.mse),
            mae: avg(|s| s.mae),
            hfen: avg(|s| s.hfen),
            psnr_db: avg(|s| s.psnr_db),
            ssim: avg(|s| s.ssim),
        };
        MetricsReport { slices, mean }
    }

    /// Pools the slices of several volume reports.
    pub fn combine(reports: &[MetricsReport]) -> Result<Self> {
        let slices: Vec<SliceMetrics> = reports.iter().flat_map(|r| r.slices.iter().copied()).collect();
        if slices.is_empty() {
            return Err(Error::invalid("no slices to combine"));
        }
        Ok(Self::from_slices(slices))
    }

    /// `slice_index,mse,mae,hfen,psnr_db,ssim`, one row per slice then a
    /// `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice_index,mse,mae,hfen,psnr_db,ssim\n");
        let row = |out: &mut String, label: &str, m: &SliceMetrics| {
            let _ = writeln!(
                out,
                "{label},{:.9e},{:.9e},{:.9e},{:.6},{:.9}",
                m.mse, m.mae, m.hfen, m.psnr_db, m.ssim
            );
        };
        for (i, m) in self.slices.iter().enumerate() {
            row(&mut out, &i.to_string(), m);
        }
        row(&mut out, "mean", &self.mean);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-slice metrics of a reconstructed magnitude volume `[S, H, W]`
/// against its ground truth, plus volume means. `k1`, `k2` and the window
/// come from `cfg`; the dynamic range is taken from the ground truth.
pub fn evaluate_pair(truth: &Tensor<f64>, recon: &Tensor<f64>, cfg: &SsimConfig) -> Result<MetricsReport> {
    if truth.shape() != recon.shape() {
        return Err(Error::shape(
            "evaluate_pair",
            format!("{:?} vs {:?}", truth.shape(), recon.shape()),
        ));
    }
    let [s, h, w] = truth.shape() else {
        return Err(Error::shape("evaluate_pair", format!("expected [S, H, W], got {:?}", truth.shape())));
    };
    let (s, h, w) = (*s, *h, *w);
    let peak = truth.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = truth.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let range = if peak > floor { peak - floor } else { peak.abs().max(1.0) };
    let ssim_cfg = SsimConfig {
        dynamic_range: range,
        ..*cfg
    };
    let plane = h * w;
    let mut slices = Vec::with_capacity(s);
    for i in 0..s {
        let x = &truth.data()[i * plane..(i + 1) * plane];
        let y = &recon.data()[i * plane..(i + 1) * plane];
        slices.push(SliceMetrics {
            mse: mse(x, y)?,
            mae: mae(x, y)?,
            hfen: hfen(x, y, h, w)?,
            psnr_db: psnr(x, y, peak)?,
            ssim: ssim(x, y, h, w, &ssim_cfg)?,
        });
    }
    if slices.is_empty() {
        return Err(Error::invalid("volume has no slices"));
    }
    Ok(MetricsReport::from_slices(slices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn psnr_twenty_db() {
        let x = [1.0, 0.5, 0.2, 0.0];
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_INFINITE);
    }

    #[test]
    fn psnr_scale_invariant() {
        let x = random(64, 1);
        let y = random(64, 2);
        let peak = x.iter().cloned().fold(0.0, f64::max);
        let a = psnr(&x, &y, peak).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * 3.5).collect();
        let b = psnr(&xs, &ys, peak * 3.5).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = random(100, 3);
        let cfg = SsimConfig::default();
        assert_eq!(ssim(&x, &x, 10, 10, &cfg).unwrap(), 1.0);
        let (a, b) = (0.3, 0.7);
        let got = ssim(&[a; 64], &[b; 64], 8, 8, &cfg).unwrap();
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let expected = (2.0 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2);
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim(&[0.0; 36], &[0.0; 36], 6, 6, &SsimConfig::default()).is_err());
    }

    #[test]
    fn log_kernel_sums_to_zero() {
        let k = log_kernel(15, 1.5);
        assert!(k.iter().sum::<f64>().abs() < 1e-15);
        // Center is the most negative tap.
        let min = k.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, k[7 * 15 + 7]);
    }

    #[test]
    fn hfen_ignores_offsets() {
        let x = random(400, 4);
        let y: Vec<f64> = x.iter().map(|v| v + 0.37).collect();
        assert!(hfen(&x, &y, 20, 20).unwrap() < 1e-12);
        assert_eq!(hfen(&x, &x, 20, 20).unwrap(), 0.0);
    }

    #[test]
    fn reflection_folds() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(9, 4), 1);
        assert_eq!(reflect_index(-9, 4), 0);
    }

    #[test]
    fn volume_means_average_slices() {
        let truth = Tensor::new(vec![2, 8, 8], random(128, 5)).unwrap();
        let recon = Tensor::new(vec![2, 8, 8], random(128, 6)).unwrap();
        let r = evaluate_pair(&truth, &recon, &SsimConfig::default()).unwrap();
        assert!((r.mean.mse - 0.5 * (r.slices[0].mse + r.slices[1].mse)).abs() < 1e-15);
        assert!((r.mean.ssim - 0.5 * (r.slices[0].ssim + r.slices[1].ssim)).abs() < 1e-15);
    }

    #[test]
    fn identical_volumes_are_perfect() {
        let truth = Tensor::new(vec![2, 8, 8], random(128, 7)).unwrap();
        let r = evaluate_pair(&truth, &truth, &SsimConfig::default()).unwrap();
        assert_eq!(r.mean.mse, 0.0);
        assert_eq!(r.mean.mae, 0.0);
        assert_eq!(r.mean.hfen, 0.0);
        assert_eq!(r.mean.ssim, 1.0);
        assert_eq!(r.mean.psnr_db, PSNR_INFINITE);
        assert!(r.to_csv().lines().nth(1).unwrap().ends_with(",inf,1.000000000"));
    }
}
