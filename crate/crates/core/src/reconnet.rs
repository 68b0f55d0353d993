//! U-Net anti-aliasing network over two-channel complex images.
//!
//! Each encoder stage is `(conv3x3 -> leaky ReLU -> batch norm) x 2` followed by
//! 2×2 average pooling; channels double per stage. The decoder mirrors it with
//! nearest-neighbour upsampling and a channel concatenation of the matching
//! encoder output. A final 3×3 conv maps back to two channels, and with
//! `residual` on the input is added to the result.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::data::{check_divisible, f32_from_le_bytes, f32_to_le_bytes};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub negative_slope: f64,
    pub residual: bool,
    pub seed: u64,
    pub bn_eps: f64,
    /// Weight of the old running statistic in each update.
    pub bn_momentum: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 16,
            negative_slope: 0.01,
            residual: true,
            seed: 0,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::invalid("U-Net depth and base_channels must be at least 1"));
        }
        if self.depth > 16 {
            return Err(Error::invalid(format!("U-Net depth {} is too large", self.depth)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_eps must be positive and bn_momentum in [0, 1]"));
        }
        Ok(())
    }

    /// Channels after encoder stage `i`; `i == depth` is the bottleneck.
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

/// Network weights, running batch-norm statistics and topology.
#[derive(Clone, Debug)]
pub struct UNet<T: Real> {
    config: UNetConfig,
    params: ParamStore<T>,
    encoders: Vec<Block>,
    bottleneck: Block,
    /// Deepest stage first.
    decoders: Vec<Block>,
    head: Conv,
    running: Vec<BatchStats>,
    norm_names: Vec<String>,
    frozen: bool,
}

struct Builder<'a, T: Real> {
    params: ParamStore<T>,
    norm_names: Vec<String>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        let fan_in = (cin * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| T::of(rng.gen_range(-bound..bound)));
        Conv {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        self.norm_names.push(name.to_string());
        Norm {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            slot: self.norm_names.len() - 1,
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout),
            norm1: self.norm(&format!("{name}.bn1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout),
            norm2: self.norm(&format!("{name}.bn2"), cout),
        }
    }
}

/// Closed-form parameter count of the topology.
pub fn parameter_count(depth: usize, base: usize) -> usize {
    let block = |cin: usize, cout: usize| 9 * cin * cout + 9 * cout * cout + 6 * cout;
    let c = |i: usize| base << i;
    let mut total = 0;
    let mut cin = 2;
    for i in 0..depth {
        total += block(cin, c(i));
        cin = c(i);
    }
    total += block(c(depth - 1), c(depth));
    for i in 0..depth {
        total += block(c(i) + c(i + 1), c(i));
    }
    total + 9 * c(0) * 2 + 2
}

impl<T: Real> UNet<T> {
    /// He-uniform convolution weights, zero biases, unit scales. The output
    /// conv starts at zero so the untrained network passes its input through.
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: ParamStore::new(),
            norm_names: Vec::new(),
            rng: &mut rng,
        };
        let mut encoders = Vec::with_capacity(config.depth);
        let mut cin = 2;
        for i in 0..config.depth {
            encoders.push(b.block(&format!("enc{i}"), cin, config.channels(i)));
            cin = config.channels(i);
        }
        let bottleneck = b.block("bottleneck", cin, config.channels(config.depth));
        let mut decoders = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let cin = config.channels(i) + config.channels(i + 1);
            decoders.push(b.block(&format!("dec{i}"), cin, config.channels(i)));
        }
        let head = b.conv("head", config.channels(0), 2);
        // A residual net starts as the identity on its input.
        if config.residual {
            b.params.get_mut(head.weight).value.fill(T::zero());
        }
        let Builder { params, norm_names, .. } = b;
        let running = norm_names
            .iter()
            .zip(norm_channels(&config))
            .map(|(_, c)| BatchStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(UNet {
            config,
            params,
            encoders,
            bottleneck,
            decoders,
            head,
            running,
            norm_names,
            frozen: false,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[BatchStats] {
        &self.running
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Sets every weight, bias and scale to zero.
    pub fn zero_weights(&mut self) {
        for p in self.params.iter_mut() {
            p.value.fill(T::zero());
        }
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        check_divisible(height, width, self.config.depth)
    }

    /// Replaces all weights; names and shapes must match.
    pub fn set_params(&mut self, store: ParamStore<T>) -> Result<()> {
        let same = store.len() == self.params.len()
            && store
                .iter()
                .zip(self.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::invalid("parameter store does not match the network topology"));
        }
        self.params = store;
        Ok(())
    }

    fn leaf(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.frozen {
            g.constant(self.params.value(id).clone())
        } else {
            g.param(&self.params, id)
        }
    }

    /// With `frozen` on, weights enter graphs as constants and receive no
    /// gradient, leaving bindings to other parameter stores.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: Conv) -> Result<Var> {
        let w = self.leaf(g, c.weight);
        let b = self.leaf(g, c.bias);
        g.conv2d(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm, mode: Mode, seen: &mut Vec<(usize, BatchStats)>) -> Result<Var> {
        let gamma = self.leaf(g, n.gamma);
        let beta = self.leaf(g, n.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, self.config.bn_eps)?;
                seen.push((n.slot, stats));
                Ok(y)
            }
            Mode::Eval => g.batch_norm_fixed(x, gamma, beta, &self.running[n.slot], self.config.bn_eps),
        }
    }

    fn block(&self, g: &mut Graph<T>, x: Var, b: &Block, mode: Mode, seen: &mut Vec<(usize, BatchStats)>) -> Result<Var> {
        let slope = T::of(self.config.negative_slope);
        let h = self.conv(g, x, b.conv1)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.norm(g, h, b.norm1, mode, seen)?;
        let h = self.conv(g, h, b.conv2)?;
        let h = g.leaky_relu(h, slope)?;
        self.norm(g, h, b.norm2, mode, seen)
    }

    /// Records the network on `g` for input `x` of shape `[N, 2, H, W]`.
    /// In training mode the observed batch statistics are returned by slot.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::shape("unet", format!("input must be [N, 2, H, W], got {shape:?}")));
        }
        self.check_input(shape[2], shape[3])?;
        let mut seen = Vec::new();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for enc in &self.encoders {
            h = self.block(g, h, enc, mode, &mut seen)?;
            skips.push(h);
            h = g.avg_pool2(h)?;
        }
        h = self.block(g, h, &self.bottleneck, mode, &mut seen)?;
        for dec in &self.decoders {
            let skip = skips.pop().expect("one skip per decoder");
            let up = g.upsample2(h)?;
            let cat = g.concat_channels(skip, up)?;
            h = self.block(g, cat, dec, mode, &mut seen)?;
        }
        let mut out = self.conv(g, h, self.head)?;
        if self.config.residual {
            out = g.add(out, x)?;
        }
        Ok((out, seen))
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running(&mut self, seen: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, stats) in seen {
            let run = &mut self.running[*slot];
            for (r, &b) in run.mean.iter_mut().zip(&stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Evaluation-mode inference on `[N, 2, H, W]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Converts the scalar type of weights and statistics.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            bottleneck: self.bottleneck,
            decoders: self.decoders.clone(),
            head: self.head,
            running: self.running.clone(),
            norm_names: self.norm_names.clone(),
            frozen: self.frozen,
        }
    }

    /// Every stored tensor in checkpoint order: parameters, then running
    /// means and variances per batch-norm layer.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                )
            })
            .collect();
        for (name, stats) in self.norm_names.iter().zip(&self.running) {
            let c = stats.mean.len();
            out.push((
                format!("{name}.running_mean"),
                vec![c],
                stats.mean.iter().map(|&v| v as f32).collect(),
            ));
            out.push((
                format!("{name}.running_var"),
                vec![c],
                stats.var.iter().map(|&v| v as f32).collect(),
            ));
        }
        out
    }

    /// Writes `<path>` (JSON manifest) and `<path stem>.f32` (payload).
    pub fn save(&self, path: &Path, epoch: Option<usize>) -> Result<()> {
        let tensors = self.named_tensors();
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, shape, data) in tensors {
            payload.extend(f32_to_le_bytes(&data));
            entries.push(TensorEntry { name, shape });
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(path, "checkpoint path has no file name"))?;
        let data_file = format!("{stem}.f32");
        let dir = path.parent().unwrap_or(Path::new(""));
        let data_path = dir.join(&data_file);
        fs::write(&data_path, payload).map_err(|e| Error::io(&data_path, e))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            seed: self.config.seed,
            epoch,
            dtype: "f32le".into(),
            data_file,
            tensors: entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`UNet::save`].
    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32le" {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {:?} / dtype {:?}", manifest.format, manifest.dtype),
            ));
        }
        let mut net = UNet::<T>::new(manifest.config.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        let expected = net.named_tensors();
        let listed: Vec<(&str, &[usize])> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        let wanted: Vec<(&str, &[usize])> = expected.iter().map(|(n, s, _)| (n.as_str(), s.as_slice())).collect();
        if listed != wanted {
            return Err(Error::format(path, "tensor list does not match the configured topology"));
        }
        let data_path = path.parent().unwrap_or(Path::new("")).join(&manifest.data_file);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let total: usize = expected.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        if bytes.len() != total * 4 {
            return Err(Error::PayloadSize {
                path: data_path,
                expected: total * 4,
                actual: bytes.len(),
            });
        }
        let values = f32_from_le_bytes(&bytes);
        let mut offset = 0;
        let ids: Vec<ParamId> = net.params.ids().collect();
        for id in ids {
            let shape = net.params.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, values[offset..offset + n].iter().map(|&v| T::of(v as f64)).collect())?;
            net.params.set_value(id, t)?;
            offset += n;
        }
        for stats in net.running.iter_mut() {
            let c = stats.mean.len();
            stats.mean = values[offset..offset + c].iter().map(|&v| v as f64).collect();
            offset += c;
            stats.var = values[offset..offset + c].iter().map(|&v| v as f64).collect();
            offset += c;
        }
        Ok((net, manifest))
    }
}

fn norm_channels(config: &UNetConfig) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..config.depth {
        out.extend([config.channels(i); 2]);
    }
    out.extend([config.channels(config.depth); 2]);
    for i in (0..config.depth).rev() {
        out.extend([config.channels(i); 2]);
    }
    out
}

pub const CHECKPOINT_FORMAT: &str = "loupe-unet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: UNetConfig,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub dtype: String,
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}
