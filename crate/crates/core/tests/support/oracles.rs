//! Independent brute-force references shared by the oracle suites.
#![allow(dead_code)]

use std::f64::consts::PI;

pub fn brute_psnr(x: &[f64], y: &[f64], peak: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..x.len() {
        sq += (x[i] - y[i]).powi(2);
    }
    let mse = sq / x.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

pub fn brute_ssim(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, range: f64) -> f64 {
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for top in 0..=h - win {
        for left in 0..=w - win {
            let px = |i: usize, j: usize| x[(top + i) * w + left + j];
            let py = |i: usize, j: usize| y[(top + i) * w + left + j];
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    mx += px(i, j);
                    my += py(i, j);
                }
            }
            mx /= n;
            my /= n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let (a, b) = (px(i, j) - mx, py(i, j) - my);
                    vx += a * a;
                    vy += b * b;
                    cxy += a * b;
                }
            }
            vx /= n;
            vy /= n;
            cxy /= n;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mirror padding that repeats the edge sample.
pub fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

pub fn brute_hfen(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let size = 15usize;
    let sigma: f64 = 1.5;
    let half = 7i64;
    let mut kernel = vec![vec![0.0; size]; size];
    let mut sum = 0.0;
    for (a, row) in kernel.iter_mut().enumerate() {
        for (b, k) in row.iter_mut().enumerate() {
            let (u, v) = (a as f64 - 7.0, b as f64 - 7.0);
            let q = (u * u + v * v) / (2.0 * sigma * sigma);
            *k = -(1.0 - q) * (-q).exp() / (PI * sigma.powi(4));
            sum += *k;
        }
    }
    let mean = sum / (size * size) as f64;
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let mut v = 0.0;
            for a in 0..size {
                for b in 0..size {
                    let rr = mirror(r as i64 + a as i64 - half, h);
                    let cc = mirror(c as i64 + b as i64 - half, w);
                    v += (kernel[a][b] - mean) * (x[rr * w + cc] - y[rr * w + cc]);
                }
            }
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Dense unitary 2D DFT matrix on row-major `h×w` grids, as (re, im).
pub fn dense_dft(h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let d = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut re = vec![0.0; d * d];
    let mut im = vec![0.0; d * d];
    for ky in 0..h {
        for kx in 0..w {
            for y in 0..h {
                for x in 0..w {
                    let phase =
                        sign * 2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                    let r = (ky * w + kx) * d + y * w + x;
                    re[r] = phase.cos() * scale;
                    im[r] = phase.sin() * scale;
                }
            }
        }
    }
    (re, im)
}

pub fn apply_dense(m: &(Vec<f64>, Vec<f64>), xr: &[f64], xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = xr.len();
    let mut yr = vec![0.0; d];
    let mut yi = vec![0.0; d];
    for r in 0..d {
        for c in 0..d {
            let (a, b) = (m.0[r * d + c], m.1[r * d + c]);
            yr[r] += a * xr[c] - b * xi[c];
            yi[r] += a * xi[c] + b * xr[c];
        }
    }
    (yr, yi)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
