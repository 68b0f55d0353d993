use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use loupe::data::{self, load_dataset, load_volume, magnitudes, Split};
use loupe::masks::io::{read_binary_mask, read_prob_mask, read_sidecar, write_binary_mask, write_prob_mask};
use loupe::masks::{
    binarize, binarize_lines, gen_cartesian_equispaced, gen_spectrum, gen_uniform_random, gen_variable_density,
    BinarizeMode,
};
use loupe::metrics::{evaluate_pair, MetricsReport, SsimConfig};
use loupe::reconnet::UNet;
use loupe::training::{
    evaluate_volumes, gradcheck_pipeline, train_fixed_mask, train_loupe, LoupeOutcome, TrainHistory,
};

use crate::config::{MaskKind, RunConfig};
use crate::outputs::Outputs;
use crate::{
    BinarizeArg, BinarizeArgs, CliError, Command, Common, EvaluateArgs, GenDataArgs, GradcheckArgs, MakeMaskArgs,
    MaskLearningArgs, SlopeGridArgs, SplitArg, TrainArgs, TrainLoupeArgs, TrainReconArgs,
};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn dispatch(command: Command, threads: usize) -> Result<(), CliError> {
    let mut outputs = Outputs::default();
    let result = match command {
        Command::GenData(a) => gen_data(a, &mut outputs),
        Command::TrainLoupe(a) => train_loupe_cmd(a, threads, &mut outputs),
        Command::TrainRecon(a) => train_recon(a, threads, &mut outputs),
        Command::MakeMask(a) => make_mask(a, &mut outputs),
        Command::BinarizeMask(a) => binarize_mask(a, &mut outputs),
        Command::Evaluate(a) => evaluate(a, &mut outputs),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SlopeGrid(a) => slope_grid(a, threads, &mut outputs),
    };
    if result.is_err() {
        outputs.discard();
    }
    result
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(common.config.as_deref(), common.seed)
}

fn out_path(flag: &Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| {
        CliError::Data(loupe::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs, threads: usize) {
    let t = &mut cfg.train;
    set(&mut t.alpha, a.alpha);
    set(&mut t.max_epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.patience, a.patience);
    if a.max_steps.is_some() {
        t.max_steps_per_epoch = a.max_steps;
    }
    set(&mut t.loss, a.loss.map(Into::into));
    set(&mut t.record_wall_time, a.record_wall_time);
    t.parallel = threads > 1;
    let n = &mut cfg.net;
    set(&mut n.depth, a.depth);
    set(&mut n.base_channels, a.base_channels);
    set(&mut n.residual, a.residual);
}

fn apply_mask_learning(cfg: &mut RunConfig, a: &MaskLearningArgs) {
    let t = &mut cfg.train;
    if a.mask_lr.is_some() {
        t.mask_learning_rate = a.mask_lr;
    }
    set(&mut t.slope_t, a.slope_t);
    set(&mut t.slope_s, a.slope_s);
    set(&mut t.mc_samples, a.mc_samples);
    set(&mut t.line_constrained, a.line_constrained);
    set(&mut t.readout, a.readout.map(Into::into));
}

fn data_path(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from("data"))
}

fn gen_data(a: GenDataArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.common)?;
    let s = &mut cfg.data;
    set(&mut s.volumes, a.volumes);
    set(&mut s.slices_per_volume, a.slices);
    set(&mut s.height, a.height);
    set(&mut s.width, a.width);
    set(&mut s.orientation, a.orientation.map(Into::into));
    set(&mut s.aspect_ratio, a.aspect_ratio);
    set(&mut s.min_ellipses, a.min_ellipses);
    set(&mut s.max_ellipses, a.max_ellipses);
    set(&mut s.noise_std, a.noise_std);
    set(&mut s.val_volumes, a.val_volumes);
    set(&mut s.test_volumes, a.test_volumes);
    let out = out_path(&a.out, &cfg, "data");
    let ds = data::gen_phantoms(&cfg.data)?;
    outputs.dir(&out)?;
    for i in 0..ds.volumes.len() {
        outputs.file(out.join(format!("volume_{i:03}.json")));
        outputs.file(out.join(format!("volume_{i:03}.f32")));
    }
    outputs.file(out.join(data::DATASET_FILE));
    data::save_dataset(&out, &ds)?;
    if a.export_pgm {
        let dir = out.join("pgm");
        outputs.dir(&dir)?;
        for (i, v) in ds.volumes.iter().enumerate() {
            for p in data::export_magnitude_pgm(&dir, &format!("volume_{i:03}"), v)? {
                outputs.file(p);
            }
        }
    }
    println!(
        "wrote {} volumes ({} train / {} val / {} test images) to {}",
        ds.volumes.len(),
        ds.num_images(Split::Train),
        ds.num_images(Split::Val),
        ds.num_images(Split::Test),
        out.display()
    );
    Ok(())
}

fn save_run(
    out: &Path,
    outputs: &mut Outputs,
    cfg: &RunConfig,
    net: &UNet<f32>,
    history: &TrainHistory,
) -> Result<(), CliError> {
    let weights = outputs.file(out.join("weights.json"));
    outputs.file(out.join("weights.f32"));
    net.save(&weights, Some(history.best_epoch))?;
    history.write_csv(&outputs.file(out.join("history.csv")))?;
    write_text(&outputs.file(out.join("config.json")), &cfg.to_json())
}

fn export_learned(out: &Path, outputs: &mut Outputs, cfg: &RunConfig, outcome: &LoupeOutcome) -> Result<(), CliError> {
    let seed = Some(cfg.train.seed);
    let prob = outputs.file(out.join("prob_mask.pgm"));
    outputs.file(out.join("prob_mask.json"));
    write_prob_mask(&prob, &outcome.mask.normalized_probabilities()?, cfg.train.alpha, "loupe", seed)?;
    let bin = outputs.file(out.join("mask.pgm"));
    outputs.file(out.join("mask.json"));
    let mask = outcome.mask.binarize(BinarizeMode::TopK)?;
    write_binary_mask(&bin, &mask, cfg.train.alpha, "loupe-topk", seed)?;
    Ok(())
}

fn train_loupe_cmd(a: TrainLoupeArgs, threads: usize, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.common)?;
    apply_train(&mut cfg, &a.train, threads);
    apply_mask_learning(&mut cfg, &a.mask);
    cfg.train.validate()?;
    cfg.net.validate()?;
    let out = out_path(&a.out, &cfg, "run");
    let ds = load_dataset(&data_path(&a.train.data))?;
    let outcome = train_loupe(&ds, &cfg.train, &cfg.net)?;
    outputs.dir(&out)?;
    export_learned(&out, outputs, &cfg, &outcome)?;
    save_run(&out, outputs, &cfg, &outcome.net, &outcome.history)?;
    println!(
        "best epoch {} of {}, validation loss {:e}; outputs in {}",
        outcome.history.best_epoch,
        outcome.history.stopped_epoch,
        outcome.history.best_val_loss(),
        out.display()
    );
    Ok(())
}

fn train_recon(a: TrainReconArgs, threads: usize, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.common)?;
    apply_train(&mut cfg, &a.train, threads);
    cfg.train.validate()?;
    cfg.net.validate()?;
    let out = out_path(&a.out, &cfg, "recon");
    let mask = read_binary_mask(&a.mask)?;
    let ds = load_dataset(&data_path(&a.train.data))?;
    let (net, history) = train_fixed_mask(&ds, &mask, &cfg.train, &cfg.net)?;
    outputs.dir(&out)?;
    save_run(&out, outputs, &cfg, &net, &history)?;
    let test = ds.split_volumes(Split::Test);
    if !test.is_empty() {
        let report = evaluate_volumes(&net, &mask, &test, cfg.train.batch_size)?;
        println!("test PSNR {:.3} dB, SSIM {:.4}", report.mean.psnr_db, report.mean.ssim);
    }
    println!(
        "best epoch {} of {}, validation loss {:e}; outputs in {}",
        history.best_epoch,
        history.stopped_epoch,
        history.best_val_loss(),
        out.display()
    );
    Ok(())
}

fn make_mask(a: MakeMaskArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.common)?;
    let m = &mut cfg.mask;
    set(&mut m.kind, a.kind);
    set(&mut m.alpha, a.alpha);
    set(&mut m.height, a.height);
    set(&mut m.width, a.width);
    set(&mut m.power, a.power);
    set(&mut m.center_lines, a.center_lines);
    set(&mut m.readout, a.readout.map(Into::into));
    let m = &cfg.mask;
    let (mask, seed) = match m.kind {
        MaskKind::Uniform => (gen_uniform_random(m.height, m.width, m.alpha, m.seed)?, Some(m.seed)),
        MaskKind::Vd => (
            gen_variable_density(m.height, m.width, m.alpha, m.power, m.seed)?,
            Some(m.seed),
        ),
        MaskKind::Cartesian => (
            gen_cartesian_equispaced(m.height, m.width, m.alpha, m.readout, m.center_lines)?,
            None,
        ),
        MaskKind::Spectrum => {
            let ds = load_dataset(&data_path(&a.data))?;
            (gen_spectrum(ds.split_volumes(Split::Train), m.alpha)?, None)
        }
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("mask.pgm"));
    outputs.parent_of(&out)?;
    outputs.file(out.clone());
    outputs.file(loupe::masks::io::sidecar_path(&out));
    write_binary_mask(&out, &mask, m.alpha, m.kind.name(), seed)?;
    println!(
        "{} mask {}×{}: {} of {} points sampled ({:.4})",
        m.kind.name(),
        mask.height(),
        mask.width(),
        mask.count(),
        mask.height() * mask.width(),
        mask.achieved_sparsity()
    );
    Ok(())
}

fn binarize_mask(a: BinarizeArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let probs = read_prob_mask(&a.input)?;
    let alpha = match a.alpha {
        Some(alpha) => alpha,
        None => {
            read_sidecar(&a.input)
                .map_err(|e| CliError::Usage(format!("--alpha not given and no usable sidecar: {e}")))?
                .alpha
        }
    };
    let seed = cfg.mask.seed;
    let (mode, kind) = match a.mode.unwrap_or(BinarizeArg::Topk) {
        BinarizeArg::Topk => (BinarizeMode::TopK, "binarized-topk"),
        BinarizeArg::Bernoulli => (BinarizeMode::Bernoulli(seed), "binarized-bernoulli"),
    };
    let mask = match a.readout {
        Some(axis) => binarize_lines(&probs, alpha, axis.into(), mode)?,
        None => binarize(&probs, alpha, mode)?,
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("mask.pgm"));
    outputs.parent_of(&out)?;
    outputs.file(out.clone());
    outputs.file(loupe::masks::io::sidecar_path(&out));
    let seed = matches!(mode, BinarizeMode::Bernoulli(_)).then_some(seed);
    write_binary_mask(&out, &mask, alpha, kind, seed)?;
    println!("{} of {} points sampled", mask.count(), mask.height() * mask.width());
    Ok(())
}

fn evaluate(a: EvaluateArgs, outputs: &mut Outputs) -> Result<(), CliError> {
    let _ = resolve(&a.common)?;
    let report = match (&a.prediction, &a.target, &a.mask, &a.weights) {
        (Some(pred), Some(target), None, None) => {
            let (p, _) = load_volume(pred)?;
            let (t, _) = load_volume(target)?;
            evaluate_pair(&magnitudes(&t)?, &magnitudes(&p)?, &SsimConfig::default())?
        }
        (None, None, Some(mask), Some(weights)) => {
            let mask = read_binary_mask(mask)?;
            let (net, _) = UNet::<f32>::load(weights)?;
            let ds = load_dataset(&data_path(&a.data))?;
            let split = match a.split.unwrap_or(SplitArg::Test) {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let volumes = ds.split_volumes(split);
            if volumes.is_empty() {
                return Err(CliError::Data(loupe::Error::InvalidArgument(format!(
                    "dataset has no {split:?} volumes"
                ))));
            }
            evaluate_volumes(&net, &mask, &volumes, 8)?
        }
        _ => {
            return Err(CliError::Usage(
                "evaluate needs either --prediction with --target, or --mask with --weights".into(),
            ))
        }
    };
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("metrics.csv"));
    outputs.parent_of(&out)?;
    report.write_csv(&outputs.file(out.clone()))?;
    print_mean(&report);
    Ok(())
}

fn print_mean(report: &MetricsReport) {
    let m = &report.mean;
    println!(
        "{} slices: PSNR {:.3} dB, SSIM {:.4}, HFEN {:.4e}, MSE {:.4e}, MAE {:.4e}",
        report.slices.len(),
        m.psnr_db,
        m.ssim,
        m.hfen,
        m.mse,
        m.mae
    );
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let size = a.size.unwrap_or(8);
    if size < 2 || size % 2 != 0 {
        return Err(CliError::Usage(format!("--size must be even and at least 2, got {size}")));
    }
    let report = gradcheck_pipeline(size, a.base_channels.unwrap_or(2), a.probes.unwrap_or(16), cfg.train.seed)?;
    println!("mask logits: max relative error {:.3e}", report.logits.max_relative_error);
    for (name, r) in &report.weights {
        println!("{name}: max relative error {:.3e}", r.max_relative_error);
    }
    let worst = report.max_relative_error();
    println!("max relative error: {worst:.3e}");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed: {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn slope_grid(a: SlopeGridArgs, threads: usize, outputs: &mut Outputs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.common)?;
    apply_train(&mut cfg, &a.train, threads);
    apply_mask_learning(&mut cfg, &a.mask);
    set(&mut cfg.slope_grid.slope_s, a.s_values.clone());
    set(&mut cfg.slope_grid.slope_t, a.t_values.clone());
    if cfg.slope_grid.slope_s.is_empty() || cfg.slope_grid.slope_t.is_empty() {
        return Err(CliError::Usage("slope lists must not be empty".into()));
    }
    cfg.train.validate()?;
    cfg.net.validate()?;
    let ds = load_dataset(&data_path(&a.train.data))?;
    let mut csv = String::from("slope_s,slope_t,best_val_loss,best_epoch,stopped_epoch\n");
    for &s in &cfg.slope_grid.slope_s {
        for &t in &cfg.slope_grid.slope_t {
            let mut train = cfg.train.clone();
            train.slope_s = s;
            train.slope_t = t;
            let outcome = train_loupe(&ds, &train, &cfg.net)?;
            let h = &outcome.history;
            let _ = writeln!(csv, "{s},{t},{:e},{},{}", h.best_val_loss(), h.best_epoch, h.stopped_epoch);
            println!("s={s} t={t}: validation loss {:e}", h.best_val_loss());
        }
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("slope_grid.csv"));
    outputs.parent_of(&out)?;
    write_text(&outputs.file(out), &csv)
}
