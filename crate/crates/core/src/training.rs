//! Joint mask/network optimization, fixed-mask training, Adam and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, BatchStats, GradCheckReport, Graph, ParamStore, Var};
use crate::data::{magnitudes, Split, VolumeDataset};
use crate::error::{Error, Result};
use crate::fourier;
use crate::masks::{draw_uniform, BinaryMask, MaskLayout, ProbMaskParams, ReadoutAxis};
use crate::metrics::{evaluate_pair, MetricsReport, SsimConfig};
use crate::reconnet::{Mode, UNet, UNetConfig};
use crate::tensor::{Real, Tensor};

/// Added to the run seed to derive the fixed validation noise stream.
pub const VALIDATION_SEED_OFFSET: u64 = 0x5eed_0f_7a1d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared difference of magnitude images.
    Magnitude,
    /// Squared difference of real and imaginary channels.
    Complex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Target sampling fraction.
    pub alpha: f64,
    pub slope_t: f64,
    pub slope_s: f64,
    /// Monte Carlo mask draws per example per step.
    pub mc_samples: usize,
    pub learning_rate: f64,
    /// Step size for the mask logits; `None` uses `learning_rate`.
    pub mask_learning_rate: Option<f64>,
    /// Partial trailing batches are dropped.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Smallest validation improvement that resets patience.
    pub min_delta: f64,
    /// Caps optimizer steps per epoch; `None` runs the whole split.
    pub max_steps_per_epoch: Option<usize>,
    pub loss: LossKind,
    /// One logit per phase-encode line instead of per grid point.
    pub line_constrained: bool,
    pub readout: ReadoutAxis,
    /// Half-width of the uniform jitter added to the initial logits.
    pub init_noise: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Record elapsed seconds in the history; off keeps runs byte-identical.
    pub record_wall_time: bool,
    /// Evaluate per-sample image work on the rayon pool.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.25,
            slope_t: 5.0,
            slope_s: 200.0,
            mc_samples: 1,
            learning_rate: 1e-3,
            mask_learning_rate: None,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            min_delta: 1e-5,
            max_steps_per_epoch: None,
            loss: LossKind::Magnitude,
            line_constrained: false,
            readout: ReadoutAxis::Rows,
            init_noise: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            record_wall_time: false,
            parallel: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.mask_learning_rate {
            if !(lr > 0.0) {
                return bad(format!("mask_learning_rate must be positive, got {lr}"));
            }
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("patience, batch_size and max_epochs must be at least 1".into());
        }
        if !(self.slope_t > 0.0 && self.slope_s > 0.0) {
            return bad("sigmoid slopes must be positive".into());
        }
        if self.max_steps_per_epoch == Some(0) {
            return bad("max_steps_per_epoch must be at least 1".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> MaskLayout {
        if self.line_constrained {
            MaskLayout::Lines(self.readout)
        } else {
            MaskLayout::Grid
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_store(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let shapes: Vec<Vec<usize>> = store.iter().map(|p| p.value.shape().to_vec()).collect();
        Self::new(&shapes, beta1, beta2, eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once before the slot updates of a step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Updates slot `i` in place with gradient `grad`.
    pub fn apply(&mut self, i: usize, value: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if value.shape() != grad.shape() || value.shape() != self.m[i].shape() {
            return Err(Error::shape(
                "adam",
                format!(
                    "slot {i}: value {:?}, grad {:?}, moments {:?}",
                    value.shape(),
                    grad.shape(),
                    self.m[i].shape()
                ),
            ));
        }
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            let g = g.as_f64();
            let mn = b1 * m.as_f64() + (1.0 - b1) * g;
            let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::of(mn);
            *v = T::of(vn);
            let delta = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *p = T::of(p.as_f64() - delta);
        }
        Ok(())
    }

    /// One step over every parameter of `store` using its stored gradients.
    pub fn step_store(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.tick();
        for (i, p) in store.iter_mut().enumerate() {
            let grad = p.grad.clone();
            self.apply(i, &mut p.value, &grad, lr)?;
        }
        Ok(())
    }
}

/// Records of one forward pass of the sampling/reconstruction pipeline.
pub struct PipelineStep {
    pub loss: Var,
    /// Reconstruction of the last draw.
    pub recon: Var,
    pub stats: Vec<(usize, BatchStats)>,
}

fn image_loss<T: Real>(g: &mut Graph<T>, recon: Var, target: Var, kind: LossKind) -> Result<Var> {
    let d = match kind {
        LossKind::Magnitude => {
            let a = g.magnitude(recon)?;
            let b = g.magnitude(target)?;
            g.sub(a, b)?
        }
        LossKind::Complex => g.sub(recon, target)?,
    };
    let sq = g.square(d)?;
    g.mean(sq)
}

/// Under-samples `x` (`[N, 2, H, W]`) with a per-sample centered mask
/// (`[N, H, W]`) and runs the network on the zero-filled image.
fn masked_recon<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    centered_mask: Var,
    net: &UNet<T>,
    mode: Mode,
) -> Result<(Var, Vec<(usize, BatchStats)>)> {
    let m = g.ifftshift(centered_mask)?;
    let k = g.dft2(x)?;
    let masked = g.mul_channels(k, m)?;
    let z = g.idft2(masked)?;
    net.forward(g, z, mode)
}

/// The relaxed sampling pipeline. `logits` must be a node holding the mask
/// logits; `draws` holds one `[N, H, W]` uniform tensor per Monte Carlo draw.
pub fn loupe_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    mask: &ProbMaskParams<T>,
    logits: Var,
    net: &UNet<T>,
    draws: &[Tensor<T>],
    kind: LossKind,
    mode: Mode,
) -> Result<PipelineStep> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != 2 || xs[2] != mask.height() || xs[3] != mask.width() {
        return Err(Error::shape(
            "loupe forward",
            format!("images {:?} do not fit a {}×{} mask", xs, mask.height(), mask.width()),
        ));
    }
    if draws.is_empty() {
        return Err(Error::invalid("at least one Monte Carlo draw is required"));
    }
    let n = xs[0];
    let p = mask.normalized_in_graph(g, logits)?;
    let pn = g.expand(p, 0, n)?;
    let slope = T::of(mask.slope_s);
    let mut total = None;
    let mut recon = None;
    let mut stats = Vec::new();
    for u in draws {
        let uv = g.constant(u.clone());
        let diff = g.sub(pn, uv)?;
        let relaxed = g.sigmoid(diff, slope)?;
        let (r, s) = masked_recon(g, x, relaxed, net, mode)?;
        let l = image_loss(g, r, x, kind)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
        recon = Some(r);
        stats.extend(s);
    }
    let loss = g.scale(total.expect("nonempty draws"), T::of(1.0 / draws.len() as f64))?;
    Ok(PipelineStep {
        loss,
        recon: recon.expect("nonempty draws"),
        stats,
    })
}

/// Pipeline with a fixed centered mask `[H, W]` (binary or not).
pub fn fixed_mask_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    mask: &Tensor<T>,
    net: &UNet<T>,
    kind: LossKind,
    mode: Mode,
) -> Result<PipelineStep> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != 2 || mask.shape() != [xs[2], xs[3]] {
        return Err(Error::shape(
            "fixed-mask forward",
            format!("images {:?} do not fit mask {:?}", xs, mask.shape()),
        ));
    }
    let mv = g.constant(mask.clone());
    let mn = g.expand(mv, 0, xs[0])?;
    let (recon, stats) = masked_recon(g, x, mn, net, mode)?;
    let loss = image_loss(g, recon, x, kind)?;
    Ok(PipelineStep { loss, recon, stats })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    /// Last epoch run.
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e},{:.3}", r.epoch, r.train_loss, r.val_loss, r.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Early-stopping bookkeeping.
struct Plateau {
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl Plateau {
    /// Returns `(improved, stop)`.
    fn observe(&mut self, epoch: usize, val: f64, min_delta: f64, patience: usize) -> (bool, bool) {
        if val < self.best - min_delta {
            self.best = val;
            self.best_epoch = epoch;
            self.wait = 0;
            (true, false)
        } else {
            self.wait += 1;
            (false, self.wait >= patience)
        }
    }
}

fn gather(images: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    Tensor::stack(&idx.iter().map(|&i| images.index_axis0(i)).collect::<Vec<_>>())
}

fn split_images(ds: &VolumeDataset, split: Split) -> Result<Tensor<f32>> {
    ds.images(split)
        .map_err(|_| Error::invalid(format!("dataset has an empty {split:?} split")))
}

/// What a training step optimizes besides the network.
enum Sampling<'a> {
    Learned {
        mask: &'a mut ProbMaskParams<f32>,
        adam: Adam<f32>,
    },
    Fixed(Tensor<f32>),
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    net: UNet<f32>,
    adam: Adam<f32>,
    sampling: Sampling<'a>,
    train: Tensor<f32>,
    val: Tensor<f32>,
    dims: (usize, usize),
}

impl Trainer<'_> {
    fn graph(&self) -> Graph<f32> {
        Graph::new().with_parallel(self.cfg.parallel)
    }

    fn draws(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
        let (h, w) = self.dims;
        (0..self.cfg.mc_samples).map(|_| draw_uniform(&[n, h, w], rng)).collect()
    }

    fn train_step(&mut self, batch: Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let n = batch.shape()[0];
        let draws = match self.sampling {
            Sampling::Learned { .. } => self.draws(n, rng),
            Sampling::Fixed(_) => Vec::new(),
        };
        let mut g = self.graph();
        let x = g.constant(batch);
        let (step, logits) = match &self.sampling {
            Sampling::Learned { mask, .. } => {
                let lv = g.input(mask.logits().clone());
                let step = loupe_forward(&mut g, x, mask, lv, &self.net, &draws, self.cfg.loss, Mode::Train)?;
                (step, Some(lv))
            }
            Sampling::Fixed(m) => (
                fixed_mask_forward(&mut g, x, m, &self.net, self.cfg.loss, Mode::Train)?,
                None,
            ),
        };
        let loss = g.value(step.loss).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
                node: step.loss.index(),
            });
        }
        self.net.params_mut().zero_grad();
        let seed = Tensor::ones(g.shape(step.loss));
        let grads = g.backpropagate(step.loss, seed, self.net.params_mut())?;
        self.adam.step_store(self.net.params_mut(), self.cfg.learning_rate)?;
        if let (Sampling::Learned { mask, adam }, Some(lv)) = (&mut self.sampling, logits) {
            let grad = grads.get_or_zeros(&g, lv);
            let mut value = mask.logits().clone();
            adam.tick();
            let lr = self.cfg.mask_learning_rate.unwrap_or(self.cfg.learning_rate);
            adam.apply(0, &mut value, &grad, lr)?;
            mask.set_logits(value)?;
        }
        self.net.update_running(&step.stats);
        Ok(loss)
    }

    /// Mean validation loss in evaluation mode, with draws from a fixed stream.
    fn validate(&self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(VALIDATION_SEED_OFFSET));
        let total = self.val.shape()[0];
        let mut sum = 0.0;
        let mut start = 0;
        while start < total {
            let end = (start + self.cfg.batch_size).min(total);
            let idx: Vec<usize> = (start..end).collect();
            let batch = gather(&self.val, &idx)?;
            let mut g = self.graph();
            let x = g.constant(batch);
            let step = match &self.sampling {
                Sampling::Learned { mask, .. } => {
                    let draws = self.draws(idx.len(), &mut rng);
                    let lv = g.constant(mask.logits().clone());
                    loupe_forward(&mut g, x, mask, lv, &self.net, &draws, self.cfg.loss, Mode::Eval)?
                }
                Sampling::Fixed(m) => fixed_mask_forward(&mut g, x, m, &self.net, self.cfg.loss, Mode::Eval)?,
            };
            sum += g.value(step.loss).data()[0] as f64 * idx.len() as f64;
            start = end;
        }
        Ok(sum / total as f64)
    }

    fn run(&mut self, rng: &mut ChaCha8Rng) -> Result<(TrainHistory, UNet<f32>, Option<Tensor<f32>>)> {
        let n = self.train.shape()[0];
        let bs = self.cfg.batch_size;
        if n < bs {
            return Err(Error::invalid(format!(
                "training split has {n} images, fewer than batch size {bs}"
            )));
        }
        let clock = Instant::now();
        let mut history = TrainHistory::default();
        let mut plateau = Plateau {
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        };
        let mut best_net = self.net.clone();
        let mut best_logits = self.logits();
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 1..=self.cfg.max_epochs {
            order.shuffle(rng);
            let mut steps = n / bs;
            if let Some(cap) = self.cfg.max_steps_per_epoch {
                steps = steps.min(cap);
            }
            let mut sum = 0.0;
            for b in 0..steps {
                let batch = gather(&self.train, &order[b * bs..(b + 1) * bs])?;
                sum += self.train_step(batch, rng)?;
            }
            let val_loss = self.validate()?;
            history.epochs.push(EpochRecord {
                epoch,
                train_loss: sum / steps as f64,
                val_loss,
                seconds: if self.cfg.record_wall_time {
                    clock.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
            history.stopped_epoch = epoch;
            let (improved, stop) = plateau.observe(epoch, val_loss, self.cfg.min_delta, self.cfg.patience);
            if improved {
                best_net = self.net.clone();
                best_logits = self.logits();
            }
            if stop {
                break;
            }
        }
        history.best_epoch = plateau.best_epoch;
        Ok((history, best_net, best_logits))
    }

    fn logits(&self) -> Option<Tensor<f32>> {
        match &self.sampling {
            Sampling::Learned { mask, .. } => Some(mask.logits().clone()),
            Sampling::Fixed(_) => None,
        }
    }
}

/// Result of joint mask and network training.
pub struct LoupeOutcome {
    pub mask: ProbMaskParams<f32>,
    pub net: UNet<f32>,
    pub history: TrainHistory,
}

/// Jointly learns the sampling probabilities and the reconstruction network;
/// returns the snapshot with the best validation loss.
pub fn train_loupe(ds: &VolumeDataset, cfg: &TrainConfig, net_cfg: &UNetConfig) -> Result<LoupeOutcome> {
    cfg.validate()?;
    let train = split_images(ds, Split::Train)?;
    let val = split_images(ds, Split::Val)?;
    let (h, w) = (train.shape()[2], train.shape()[3]);
    let net = UNet::<f32>::new(net_cfg.clone())?;
    net.check_input(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask = ProbMaskParams::<f32>::init_at_sparsity(
        h,
        w,
        cfg.layout(),
        cfg.slope_t,
        cfg.slope_s,
        cfg.alpha,
        cfg.init_noise,
        &mut rng,
    )?;
    let mask_adam = Adam::new(
        &[mask.logits().shape().to_vec()],
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let adam = Adam::for_store(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut trainer = Trainer {
        cfg,
        net,
        adam,
        sampling: Sampling::Learned {
            mask: &mut mask,
            adam: mask_adam,
        },
        train,
        val,
        dims: (h, w),
    };
    let (history, net, logits) = trainer.run(&mut rng)?;
    drop(trainer);
    mask.set_logits(logits.expect("learned sampling keeps logits"))?;
    Ok(LoupeOutcome { mask, net, history })
}

/// Trains a network behind a frozen centered mask.
pub fn train_fixed_mask(
    ds: &VolumeDataset,
    mask: &BinaryMask,
    cfg: &TrainConfig,
    net_cfg: &UNetConfig,
) -> Result<(UNet<f32>, TrainHistory)> {
    cfg.validate()?;
    let train = split_images(ds, Split::Train)?;
    let val = split_images(ds, Split::Val)?;
    let (h, w) = (train.shape()[2], train.shape()[3]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(
            "train fixed mask",
            format!("mask is {}×{}, images are {h}×{w}", mask.height(), mask.width()),
        ));
    }
    let net = UNet::<f32>::new(net_cfg.clone())?;
    net.check_input(h, w)?;
    let adam = Adam::for_store(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer {
        cfg,
        net,
        adam,
        sampling: Sampling::Fixed(mask.to_tensor()),
        train,
        val,
        dims: (h, w),
    };
    let (history, net, _) = trainer.run(&mut rng)?;
    Ok((net, history))
}

/// Zero-filled images `idft2(mask * dft2(x))` for `[N, 2, H, W]`.
pub fn zero_filled(images: &Tensor<f32>, mask: &BinaryMask) -> Result<Tensor<f32>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[2..] != [mask.height(), mask.width()] {
        return Err(Error::shape(
            "zero filled",
            format!("images {:?} do not fit a {}×{} mask", shape, mask.height(), mask.width()),
        ));
    }
    let m = fourier::ifftshift(&mask.to_tensor::<f32>())?;
    let mut k = fourier::dft2(images)?;
    let plane = m.len();
    for (i, v) in k.data_mut().iter_mut().enumerate() {
        *v *= m.data()[i % plane];
    }
    fourier::idft2(&k)
}

/// Network reconstructions of `[N, 2, H, W]` behind `mask`, in batches.
pub fn reconstruct(net: &UNet<f32>, mask: &BinaryMask, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
    let zf = zero_filled(images, mask)?;
    let n = images.shape()[0];
    let batch = batch.max(1);
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let out = net.predict(&gather(&zf, &idx)?)?;
        for i in 0..idx.len() {
            parts.push(out.index_axis0(i));
        }
        start = end;
    }
    Tensor::stack(&parts)
}

/// Magnitude metrics of each volume's reconstruction, pooled over slices.
pub fn evaluate_volumes(
    net: &UNet<f32>,
    mask: &BinaryMask,
    volumes: &[&Tensor<f32>],
    batch: usize,
) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(volumes.len());
    for v in volumes {
        let recon = reconstruct(net, mask, v, batch)?;
        reports.push(evaluate_pair(&magnitudes(v)?, &magnitudes(&recon)?, &SsimConfig::default())?);
    }
    MetricsReport::combine(&reports)
}

/// Mean over volumes of each volume's mean PSNR.
pub fn volume_mean_psnr(
    net: &UNet<f32>,
    mask: &BinaryMask,
    volumes: &[&Tensor<f32>],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for v in volumes {
        let recon = reconstruct(net, mask, v, batch)?;
        total += evaluate_pair(&magnitudes(v)?, &magnitudes(&recon)?, &SsimConfig::default())?
            .mean
            .psnr_db;
    }
    Ok(total / volumes.len() as f64)
}

/// Finite-difference reports for the relaxed pipeline.
#[derive(Clone, Debug)]
pub struct PipelineGradCheck {
    pub logits: GradCheckReport,
    /// One report per probed convolution kernel.
    pub weights: Vec<(String, GradCheckReport)>,
}

impl PipelineGradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.weights
            .iter()
            .map(|(_, r)| r.max_relative_error)
            .fold(self.logits.max_relative_error, f64::max)
    }
}

/// Checks reverse-mode gradients of the full sampling/reconstruction loss
/// against central differences in 64-bit, on a random `size×size` batch of
/// two images with a depth-1 network.
pub fn gradcheck_pipeline(size: usize, base_channels: usize, probes: usize, seed: u64) -> Result<PipelineGradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::from_fn(&[2, 2, size, size], |_| rng.gen_range(-1.0..1.0));
    let mask = ProbMaskParams::<f64>::init_at_sparsity(size, size, MaskLayout::Grid, 5.0, 200.0, 0.25, 0.5, &mut rng)?;
    let draws = vec![draw_uniform::<f64, _>(&[2, size, size], &mut rng)];
    let mut net = UNet::<f64>::new(UNetConfig {
        depth: 1,
        base_channels,
        seed,
        ..UNetConfig::default()
    })?;
    // Nonzero output layer and affine terms so every path carries gradient.
    for p in net.params_mut().iter_mut() {
        if p.name.starts_with("head") || p.name.ends_with("gamma") || p.name.ends_with("beta") {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    let kind = LossKind::Magnitude;
    let h = 1e-6;

    let mut logit_store = ParamStore::new();
    let logit_id = logit_store.add("mask.logits", mask.logits().clone());
    let mut frozen = net.clone();
    frozen.set_frozen(true);
    let logits = finite_difference_check(&logit_store, logit_id, probes, h, seed, |store| {
        let mut g = Graph::new().with_finite_checks(true);
        let xv = g.constant(x.clone());
        let lv = g.param(store, logit_id);
        let step = loupe_forward(&mut g, xv, &mask, lv, &frozen, &draws, kind, Mode::Train)?;
        Ok((g, step.loss))
    })?;

    let mut weights = Vec::new();
    let targets = ["enc0.conv1.weight", "bottleneck.conv2.weight", "dec0.conv1.weight", "head.weight"];
    for name in targets {
        let id = net
            .params()
            .find(name)
            .ok_or_else(|| Error::invalid(format!("network has no parameter {name}")))?;
        let report = finite_difference_check(net.params(), id, probes, h, seed, |store| {
            let mut local = net.clone();
            local.set_params(store.clone())?;
            let mut g = Graph::new().with_finite_checks(true);
            let xv = g.constant(x.clone());
            let lv = g.constant(mask.logits().clone());
            let step = loupe_forward(&mut g, xv, &mask, lv, &local, &draws, kind, Mode::Train)?;
            Ok((g, step.loss))
        })?;
        weights.push((name.to_string(), report));
    }
    Ok(PipelineGradCheck { logits, weights })
}
