//! Complex image volumes: synthetic phantoms, on-disk manifests, splits.
//!
//! A volume is a `[S, 2, H, W]` stack of complex slices. On disk it is a JSON
//! manifest next to a raw little-endian `f32` payload in `[S][channel][row][col]`
//! order. A dataset directory holds one manifest per volume plus
//! `dataset.json`, which records the split of every volume.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::Pgm;
use crate::tensor::Tensor;

pub const DTYPE_F32LE: &str = "f32le";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Major axes cluster around the x axis.
    Horizontal,
    /// Major axes cluster around the y axis.
    Vertical,
    /// Rotations uniform on `[0, pi)`.
    Isotropic,
}

/// Recipe for a seeded set of random-ellipse phantom volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub volumes: usize,
    pub slices_per_volume: usize,
    pub height: usize,
    pub width: usize,
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub orientation: Orientation,
    /// Mean major/minor axis ratio (at least 1).
    pub aspect_ratio: f64,
    /// Standard deviation of the rotation about the preferred axis, degrees.
    pub angle_spread_deg: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
    /// Per-channel standard deviation of additive complex Gaussian noise.
    pub noise_std: f64,
    /// Peak amplitude of the smooth phase field, radians.
    pub phase_strength: f64,
    pub val_volumes: usize,
    pub test_volumes: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            volumes: 12,
            slices_per_volume: 25,
            height: 64,
            width: 64,
            min_ellipses: 3,
            max_ellipses: 8,
            orientation: Orientation::Horizontal,
            aspect_ratio: 4.0,
            angle_spread_deg: 8.0,
            min_intensity: 0.2,
            max_intensity: 1.0,
            noise_std: 0.005,
            phase_strength: 1.0,
            val_volumes: 1,
            test_volumes: 1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_ellipses == 0 && self.noise_std == 0.0 {
            return Err(Error::invalid("phantom spec draws no ellipses and no noise"));
        }
        if self.min_ellipses > self.max_ellipses {
            return Err(Error::invalid(format!(
                "min_ellipses {} exceeds max_ellipses {}",
                self.min_ellipses, self.max_ellipses
            )));
        }
        if self.height == 0 || self.width == 0 || self.slices_per_volume == 0 {
            return Err(Error::invalid("phantom dimensions must be positive"));
        }
        if self.volumes < self.val_volumes + self.test_volumes + 1 {
            return Err(Error::invalid(format!(
                "{} volumes cannot cover {} validation, {} test and at least one training volume",
                self.volumes, self.val_volumes, self.test_volumes
            )));
        }
        if !(self.aspect_ratio >= 1.0) {
            return Err(Error::invalid(format!("aspect_ratio must be >= 1, got {}", self.aspect_ratio)));
        }
        if !(self.min_intensity <= self.max_intensity) || !(self.noise_std >= 0.0) || !(self.angle_spread_deg >= 0.0)
        {
            return Err(Error::invalid("intensity range, noise and angle spread must be ordered and non-negative"));
        }
        Ok(())
    }

    /// Fails unless both spatial dims are divisible by `2^depth`.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        check_divisible(self.height, self.width, depth)
    }
}

pub fn check_divisible(height: usize, width: usize, depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if height % f != 0 || width % f != 0 {
        return Err(Error::invalid(format!(
            "{height}×{width} is not divisible by 2^{depth} = {f}; pad or crop the images"
        )));
    }
    Ok(())
}

/// One ellipse in normalized coordinates, `[-1, 1]` on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the ellipse's own x direction before rotation.
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    /// Half-widths of the axis-aligned bounding box.
    pub fn extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let xr = du * c + dv * s;
        let yr = -du * s + dv * c;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Draws one ellipse with axes and rotation following `spec`.
pub fn sample_ellipse<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Ellipse {
    let minor = rng.gen_range(0.03..0.12);
    let ratio = 1.0 + (spec.aspect_ratio - 1.0) * 2.0 * rng.gen::<f64>();
    let major = (minor * ratio).min(0.95);
    let spread = spec.angle_spread_deg.to_radians();
    let jitter = if spread > 0.0 {
        Normal::new(0.0, spread).expect("positive spread").sample(rng)
    } else {
        0.0
    };
    let angle = match spec.orientation {
        Orientation::Horizontal => jitter,
        Orientation::Vertical => PI / 2.0 + jitter,
        Orientation::Isotropic => rng.gen_range(0.0..PI),
    };
    let intensity = if spec.max_intensity > spec.min_intensity {
        rng.gen_range(spec.min_intensity..spec.max_intensity)
    } else {
        spec.min_intensity
    };
    Ellipse {
        cx: rng.gen_range(-0.6..0.6),
        cy: rng.gen_range(-0.6..0.6),
        a: major,
        b: minor,
        angle,
        intensity,
    }
}

/// Smooth phase: a few low-frequency plane waves, peak `strength`.
fn phase_field<R: Rng>(height: usize, width: usize, strength: f64, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let v = (2 * y + 1) as f64 / height as f64 - 1.0;
        for x in 0..width {
            let u = (2 * x + 1) as f64 / width as f64 - 1.0;
            let s: f64 = waves
                .iter()
                .map(|&(fx, fy, psi, amp)| amp * (PI * (fx * u + fy * v) + psi).cos())
                .sum();
            out.push(strength * s / total);
        }
    }
    out
}

fn render_slice<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let count = rng.gen_range(spec.min_ellipses..=spec.max_ellipses);
    let ellipses: Vec<Ellipse> = (0..count).map(|_| sample_ellipse(spec, rng)).collect();
    let phase = phase_field(h, w, spec.phase_strength, rng);
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite noise"));
    let mut out = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        let v = (2 * y + 1) as f64 / h as f64 - 1.0;
        for x in 0..w {
            let u = (2 * x + 1) as f64 / w as f64 - 1.0;
            let mag: f64 = ellipses.iter().filter(|e| e.contains(u, v)).map(|e| e.intensity).sum();
            let (s, c) = phase[y * w + x].sin_cos();
            let (mut re, mut im) = (mag * c, mag * s);
            if let Some(n) = &noise {
                re += n.sample(rng);
                im += n.sample(rng);
            }
            out[y * w + x] = re as f32;
            out[h * w + y * w + x] = im as f32;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub source: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeDataset {
    pub volumes: Vec<Tensor<f32>>,
    pub splits: Vec<Split>,
    pub manifest: DatasetManifest,
}

impl VolumeDataset {
    /// Validates shapes and split bookkeeping.
    pub fn new(volumes: Vec<Tensor<f32>>, splits: Vec<Split>, manifest: DatasetManifest) -> Result<Self> {
        if volumes.len() != splits.len() {
            return Err(Error::invalid(format!(
                "{} volumes but {} split labels",
                volumes.len(),
                splits.len()
            )));
        }
        let mut dims = None;
        for (i, v) in volumes.iter().enumerate() {
            let (_, h, w) = volume_dims(v.shape())?;
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::shape(
                        "dataset",
                        format!("volume {i} is {h}×{w}, earlier volumes are {}×{}", d.0, d.1),
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(VolumeDataset {
            volumes,
            splits,
            manifest,
        })
    }

    /// `(H, W)` shared by every volume.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.volumes.first().map(|v| (v.shape()[2], v.shape()[3]))
    }

    pub fn volume_indices(&self, split: Split) -> Vec<usize> {
        (0..self.volumes.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn num_images(&self, split: Split) -> usize {
        self.volume_indices(split).iter().map(|&i| self.volumes[i].shape()[0]).sum()
    }

    /// All slices of a split as `[N, 2, H, W]`, in volume then slice order.
    pub fn images(&self, split: Split) -> Result<Tensor<f32>> {
        let idx = self.volume_indices(split);
        let (h, w) = self.dims().ok_or_else(|| Error::invalid("dataset has no volumes"))?;
        let mut data = Vec::new();
        for &i in &idx {
            data.extend_from_slice(self.volumes[i].data());
        }
        let n = data.len() / (2 * h * w);
        if n == 0 {
            return Err(Error::invalid(format!("{split:?} split is empty")));
        }
        Tensor::new(vec![n, 2, h, w], data)
    }

    /// Volumes of a split, each `[S, 2, H, W]`.
    pub fn split_volumes(&self, split: Split) -> Vec<&Tensor<f32>> {
        self.volume_indices(split).into_iter().map(|i| &self.volumes[i]).collect()
    }
}

/// Generates, normalizes and splits a phantom dataset.
pub fn gen_phantoms(spec: &PhantomSpec) -> Result<VolumeDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let mut volumes = Vec::with_capacity(spec.volumes);
    for _ in 0..spec.volumes {
        let mut data = Vec::with_capacity(spec.slices_per_volume * 2 * h * w);
        for _ in 0..spec.slices_per_volume {
            data.extend(render_slice(spec, &mut rng));
        }
        let vol = Tensor::new(vec![spec.slices_per_volume, 2, h, w], data)?;
        volumes.push(normalize_volume(&vol)?);
    }
    let n_train = spec.volumes - spec.val_volumes - spec.test_volumes;
    let splits = (0..spec.volumes)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + spec.val_volumes {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    VolumeDataset::new(
        volumes,
        splits,
        DatasetManifest {
            source: "phantom".into(),
            seed: Some(spec.seed),
            phantom: Some(spec.clone()),
        },
    )
}

/// `(S, H, W)` of a `[S, 2, H, W]` shape.
pub fn volume_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [s, 2, h, w] => Ok((*s, *h, *w)),
        _ => Err(Error::shape("volume", format!("expected [S, 2, H, W], got {shape:?}"))),
    }
}

/// Largest `sqrt(re^2 + im^2)` over every slice of a volume.
pub fn max_magnitude(v: &Tensor<f32>) -> Result<f64> {
    let (s, h, w) = volume_dims(v.shape())?;
    let hw = h * w;
    let d = v.data();
    let mut best = 0.0f64;
    for k in 0..s {
        let (re, im) = (&d[2 * k * hw..(2 * k + 1) * hw], &d[(2 * k + 1) * hw..(2 * k + 2) * hw]);
        for (&a, &b) in re.iter().zip(im) {
            best = best.max((a as f64).hypot(b as f64));
        }
    }
    Ok(best)
}

/// Divides both channels by the largest magnitude in the volume.
pub fn normalize_volume(v: &Tensor<f32>) -> Result<Tensor<f32>> {
    let peak = max_magnitude(v)?;
    if peak == 0.0 || !peak.is_finite() {
        return Err(Error::invalid(format!("cannot normalize a volume with peak magnitude {peak}")));
    }
    Ok(v.map(|x| (x as f64 / peak) as f32))
}

/// Central `th×tw` window over the last two axes; offsets round down.
pub fn center_crop(img: &Tensor<f32>, target_h: usize, target_w: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() < 2 {
        return Err(Error::shape("center crop", format!("need at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if target_h > h || target_w > w {
        return Err(Error::invalid(format!("cannot crop {h}×{w} to larger {target_h}×{target_w}")));
    }
    let (oy, ox) = ((h - target_h) / 2, (w - target_w) / 2);
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut data = Vec::with_capacity(lead * target_h * target_w);
    for plane in img.data().chunks(h * w).take(lead) {
        for y in oy..oy + target_h {
            data.extend_from_slice(&plane[y * w + ox..y * w + ox + target_w]);
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = target_h;
    out_shape[n - 1] = target_w;
    Tensor::new(out_shape, data)
}

/// JSON manifest of one stored volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeManifest {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Payload path, relative to the manifest's directory.
    pub data_file: String,
    pub source: String,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn f32_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `<manifest>` and its payload `<manifest stem>.f32` beside it.
pub fn save_volume(manifest_path: &Path, volume: &Tensor<f32>, source: &str) -> Result<()> {
    volume_dims(volume.shape())?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(manifest_path, "manifest path has no file name"))?;
    let data_file = format!("{stem}.f32");
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let payload = dir.join(&data_file);
    fs::write(&payload, f32_to_le_bytes(volume.data())).map_err(|e| Error::io(&payload, e))?;
    write_json(
        manifest_path,
        &VolumeManifest {
            shape: volume.shape().to_vec(),
            dtype: DTYPE_F32LE.into(),
            data_file,
            source: source.into(),
        },
    )
}

/// Reads a volume manifest and its payload.
pub fn load_volume(manifest_path: &Path) -> Result<(Tensor<f32>, VolumeManifest)> {
    let manifest: VolumeManifest = read_json(manifest_path)?;
    if manifest.dtype != DTYPE_F32LE {
        return Err(Error::format(
            manifest_path,
            format!("unsupported dtype {:?}; only {DTYPE_F32LE:?} is understood", manifest.dtype),
        ));
    }
    volume_dims(&manifest.shape).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let payload = manifest_path.parent().unwrap_or(Path::new("")).join(&manifest.data_file);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = manifest.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            path: payload,
            expected,
            actual: bytes.len(),
        });
    }
    let tensor = Tensor::new(manifest.shape.clone(), f32_from_le_bytes(&bytes))?;
    Ok((tensor, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub manifest: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    #[serde(flatten)]
    pub manifest: DatasetManifest,
    pub volumes: Vec<DatasetEntry>,
}

/// Writes `dataset.json` and one manifest/payload pair per volume.
pub fn save_dataset(dir: &Path, ds: &VolumeDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.volumes.len());
    for (i, (v, split)) in ds.volumes.iter().zip(&ds.splits).enumerate() {
        let name = format!("volume_{i:03}.json");
        save_volume(&dir.join(&name), v, &ds.manifest.source)?;
        entries.push(DatasetEntry {
            manifest: name,
            split: *split,
        });
    }
    write_json(
        &dir.join(DATASET_FILE),
        &DatasetIndex {
            manifest: ds.manifest.clone(),
            volumes: entries,
        },
    )
}

/// Loads a dataset directory, or a single volume manifest (used as a test split).
pub fn load_dataset(path: &Path) -> Result<VolumeDataset> {
    let index_path: PathBuf = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let raw: serde_json::Value = read_json(&index_path)?;
    if raw.get("dtype").is_some() {
        let (v, m) = load_volume(&index_path)?;
        let manifest = DatasetManifest {
            source: m.source,
            seed: None,
            phantom: None,
        };
        return VolumeDataset::new(vec![v], vec![Split::Test], manifest);
    }
    let index: DatasetIndex = serde_json::from_value(raw).map_err(|e| Error::json(&index_path, e))?;
    let dir = index_path.parent().unwrap_or(Path::new(""));
    let mut volumes = Vec::with_capacity(index.volumes.len());
    let mut splits = Vec::with_capacity(index.volumes.len());
    for entry in &index.volumes {
        let (v, _) = load_volume(&dir.join(&entry.manifest))?;
        volumes.push(v);
        splits.push(entry.split);
    }
    VolumeDataset::new(volumes, splits, index.manifest)
}

/// Magnitude images of `[S, 2, H, W]` as `[S, H, W]`.
pub fn magnitudes(volume: &Tensor<f32>) -> Result<Tensor<f64>> {
    let (s, h, w) = volume_dims(volume.shape())?;
    let hw = h * w;
    let d = volume.data();
    let mut out = Vec::with_capacity(s * hw);
    for k in 0..s {
        for i in 0..hw {
            out.push((d[2 * k * hw + i] as f64).hypot(d[(2 * k + 1) * hw + i] as f64));
        }
    }
    Tensor::new(vec![s, h, w], out)
}

/// Writes `prefix_NNN.pgm` per slice, 16-bit, scaled by the volume's peak magnitude.
pub fn export_magnitude_pgm(dir: &Path, prefix: &str, volume: &Tensor<f32>) -> Result<Vec<PathBuf>> {
    let (s, h, w) = volume_dims(volume.shape())?;
    let mags = magnitudes(volume)?;
    let peak = mags.data().iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 65535.0 / peak } else { 0.0 };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(s);
    for k in 0..s {
        let samples = mags.data()[k * h * w..(k + 1) * h * w]
            .iter()
            .map(|&m| (m * scale).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let path = dir.join(format!("{prefix}_{k:03}.pgm"));
        Pgm {
            width: w,
            height: h,
            maxval: 65535,
            samples,
        }
        .write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            volumes: 3,
            slices_per_volume: 2,
            height: 16,
            width: 16,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_phantoms(&small_spec()).unwrap();
        let b = gen_phantoms(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_phantoms(&PhantomSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.volumes, c.volumes);
    }

    #[test]
    fn volumes_are_normalized() {
        let ds = gen_phantoms(&small_spec()).unwrap();
        for v in &ds.volumes {
            assert!((max_magnitude(v).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = PhantomSpec {
            min_ellipses: 0,
            max_ellipses: 0,
            noise_std: 0.0,
            ..small_spec()
        };
        assert!(gen_phantoms(&spec).is_err());
    }

    #[test]
    fn splits_are_volume_level() {
        let ds = gen_phantoms(&small_spec()).unwrap();
        assert_eq!(ds.splits, vec![Split::Train, Split::Val, Split::Test]);
        assert_eq!(ds.num_images(Split::Train), 2);
        assert_eq!(ds.images(Split::Val).unwrap().shape(), &[2, 2, 16, 16]);
    }

    #[test]
    fn horizontal_ellipses_are_wide() {
        let spec = PhantomSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ratio: f64 = (0..1000)
            .map(|_| {
                let (ex, ey) = sample_ellipse(&spec, &mut rng).extents();
                ex / ey
            })
            .sum::<f64>()
            / 1000.0;
        assert!(ratio > 2.0, "mean width/height {ratio}");
    }

    #[test]
    fn normalize_scales_by_peak() {
        let v = Tensor::new(vec![1, 2, 1, 2], vec![1.5, 0.0, 2.0, 1.0]).unwrap();
        // magnitudes: hypot(1.5, 2) = 2.5, hypot(0, 1) = 1
        let n = normalize_volume(&v).unwrap();
        for (a, b) in n.data().iter().zip(v.data()) {
            assert!((a - b * 0.4).abs() < 1e-7);
        }
        assert_eq!(normalize_volume(&n).unwrap(), n);
        assert!(normalize_volume(&Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }

    #[test]
    fn crop_offsets_round_down() {
        let img = Tensor::<f32>::from_fn(&[5, 5], |i| i as f32);
        let c = center_crop(&img, 4, 4).unwrap();
        assert_eq!(&c.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(center_crop(&img, 5, 5).unwrap(), img);
        assert!(center_crop(&img, 6, 5).is_err());
        let big = Tensor::<f32>::from_fn(&[2, 368, 368], |i| i as f32);
        let c = center_crop(&big, 320, 320).unwrap();
        assert_eq!(c.data()[0], (24 * 368 + 24) as f32);
    }
}
