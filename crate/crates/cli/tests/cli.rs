use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::CommandFactory;
use loupe::data::{gen_phantoms, load_dataset, save_volume, PhantomSpec};
use loupe::masks::io::{read_binary_mask, read_sidecar};
use loupe::masks::ReadoutAxis;
use loupe_cli::{run, Cli};
use tempfile::TempDir;

fn loupe(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_loupe")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn call(args: &[&str]) -> i32 {
    run(std::iter::once("loupe").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let code = call(&[
        "gen-data", "--out", s(&data), "--volumes", "3", "--slices", "8", "--height", "16", "--width", "16",
        "--seed", "4",
    ]);
    assert_eq!(code, 0);
    data
}

fn mean_row(csv: &str) -> Vec<String> {
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("mean,"));
    last.split(',').map(str::to_string).collect()
}

#[test]
fn every_flag_documents_its_default() {
    let cli = Cli::command();
    for sub in cli.get_subcommands() {
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
            assert!(
                help.contains("[default:") || help.contains("(required)"),
                "{} --{id}: {help:?}",
                sub.get_name()
            );
        }
    }
    let (code, stdout, _) = loupe(&["train-loupe", "--help"]);
    assert_eq!(code, 0);
    for flag in ["--alpha", "--mask-lr", "--slope-s", "--line-constrained", "--threads", "--seed", "--config"] {
        assert!(stdout.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(loupe(&["--version"]).0, 0);
    assert_eq!(loupe(&["no-such-command"]).0, 1);
    assert_eq!(loupe(&["make-mask", "--bogus"]).0, 1);
    assert_eq!(loupe(&["make-mask", "--threads", "0"]).0, 1);
    assert_eq!(loupe(&["evaluate", "--out", s(&tmp.path().join("m.csv"))]).0, 1);

    let (code, _, stderr) = loupe(&["binarize-mask", "--input", s(&tmp.path().join("absent.pgm")), "--alpha", "0.25"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("absent.pgm"));
    let out = tmp.path().join("m.pgm");
    assert_eq!(loupe(&["make-mask", "--alpha", "1.5", "--out", s(&out)]).0, 2);
    assert!(!out.exists());
    assert_eq!(loupe(&["train-loupe", "--data", s(&tmp.path().join("nothing"))]).0, 2);
}

#[test]
fn make_mask_writes_pgm_and_sidecar() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("cart.pgm");
    let (code, stdout, _) = loupe(&[
        "make-mask", "--kind", "cartesian", "--height", "8", "--width", "8", "--alpha", "0.25", "--out", s(&out),
    ]);
    assert_eq!(code, 0, "{stdout}");
    let mask = read_binary_mask(&out).unwrap();
    assert!(mask.is_line_structured(ReadoutAxis::Rows));
    assert_eq!(mask.count(), 2 * 8);
    let side = read_sidecar(&out).unwrap();
    assert_eq!((side.height, side.width, side.kind.as_str()), (8, 8, "cartesian"));
    assert_eq!(side.achieved_sparsity, 0.25);

    for kind in ["uniform", "vd"] {
        let out = tmp.path().join(format!("{kind}.pgm"));
        assert_eq!(
            call(&["make-mask", "--kind", kind, "--height", "16", "--width", "12", "--alpha", "0.3", "--out", s(&out)]),
            0
        );
        assert_eq!(read_binary_mask(&out).unwrap().count(), 58);
    }

    let data = small_dataset(tmp.path());
    let out = tmp.path().join("spectrum.pgm");
    assert_eq!(
        call(&["make-mask", "--kind", "spectrum", "--data", s(&data), "--alpha", "0.125", "--out", s(&out)]),
        0
    );
    assert_eq!(read_binary_mask(&out).unwrap().count(), 32);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 5, "mask": {"alpha": 0.5, "height": 8, "width": 8, "seed": 1}}"#).unwrap();
    let out = tmp.path().join("m.pgm");

    assert_eq!(call(&["make-mask", "--config", s(&cfg), "--out", s(&out)]), 0);
    assert_eq!(read_binary_mask(&out).unwrap().count(), 32);
    assert_eq!(read_sidecar(&out).unwrap().seed, Some(5));

    assert_eq!(call(&["make-mask", "--config", s(&cfg), "--alpha", "0.25", "--seed", "7", "--out", s(&out)]), 0);
    assert_eq!(read_binary_mask(&out).unwrap().count(), 16);
    assert_eq!(read_sidecar(&out).unwrap().seed, Some(7));

    assert_eq!(call(&["make-mask", "--out", s(&out)]), 0);
    assert_eq!(read_binary_mask(&out).unwrap().count(), 1024);
    assert_eq!(read_sidecar(&out).unwrap().seed, Some(0));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"mask": {"alpah": 0.5}}"#).unwrap();
    assert_eq!(loupe(&["make-mask", "--config", s(&bad), "--out", s(&out)]).0, 1);
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(loupe(&["make-mask", "--config", s(&bad), "--out", s(&out)]).0, 1);
}

#[test]
fn failed_commands_remove_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("fresh");
    fs::create_dir(&out).unwrap();
    // A file where the PGM directory should go fails the export after the
    // volumes are written.
    fs::write(out.join("pgm"), b"in the way").unwrap();
    let code = call(&[
        "gen-data", "--out", s(&out), "--volumes", "3", "--slices", "2", "--height", "8", "--width", "8", "--export-pgm",
    ]);
    assert_eq!(code, 2);
    let left: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("pgm")]);

    let nested = tmp.path().join("a/b/data");
    let code = call(&[
        "gen-data", "--out", s(&nested), "--volumes", "3", "--slices", "2", "--height", "8", "--width", "8",
        "--min-ellipses", "5", "--max-ellipses", "2",
    ]);
    assert_eq!(code, 2);
    assert!(!tmp.path().join("a").exists());
}

#[test]
fn gen_data_roundtrips_and_exports_pgm() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let code = call(&[
        "gen-data", "--out", s(&out), "--volumes", "4", "--slices", "3", "--height", "16", "--width", "8",
        "--orientation", "vertical", "--export-pgm", "--seed", "2",
    ]);
    assert_eq!(code, 0);
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.volumes.len(), 4);
    assert_eq!(ds.volumes[0].shape(), &[3, 2, 16, 8]);
    let spec = PhantomSpec {
        volumes: 4,
        slices_per_volume: 3,
        height: 16,
        width: 8,
        orientation: loupe::data::Orientation::Vertical,
        seed: 2,
        ..PhantomSpec::default()
    };
    assert_eq!(ds.volumes, gen_phantoms(&spec).unwrap().volumes);
    assert_eq!(fs::read_dir(out.join("pgm")).unwrap().count(), 12);
}

#[test]
fn evaluate_scores_identical_volumes_as_perfect() {
    let tmp = TempDir::new().unwrap();
    let ds = gen_phantoms(&PhantomSpec {
        volumes: 3,
        slices_per_volume: 4,
        height: 16,
        width: 16,
        ..PhantomSpec::default()
    })
    .unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    save_volume(&a, &ds.volumes[0], "test").unwrap();
    save_volume(&b, &ds.volumes[0], "test").unwrap();
    let csv = tmp.path().join("metrics.csv");
    assert_eq!(call(&["evaluate", "--prediction", s(&a), "--target", s(&b), "--out", s(&csv)]), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    let mean = mean_row(&text);
    assert_eq!(mean[5].parse::<f64>().unwrap(), 1.0);
    assert_eq!(mean[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(mean[3].parse::<f64>().unwrap(), 0.0);
    assert!(mean[4].parse::<f64>().unwrap().is_infinite());

    save_volume(&b, &ds.volumes[1], "test").unwrap();
    assert_eq!(call(&["evaluate", "--prediction", s(&a), "--target", s(&b), "--out", s(&csv)]), 0);
    let mean = mean_row(&fs::read_to_string(&csv).unwrap());
    assert!(mean[5].parse::<f64>().unwrap() < 1.0);

    let c = tmp.path().join("c.json");
    save_volume(&c, &ds.volumes[0].index_axis0(0).reshape(&[1, 2, 16, 16]).unwrap(), "test").unwrap();
    assert_eq!(call(&["evaluate", "--prediction", s(&a), "--target", s(&c), "--out", s(&csv)]), 2);
}

#[test]
fn train_recon_then_evaluate_with_weights() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mask = tmp.path().join("mask.pgm");
    assert_eq!(
        call(&["make-mask", "--kind", "vd", "--height", "16", "--width", "16", "--out", s(&mask)]),
        0
    );
    let run_dir = tmp.path().join("recon");
    let code = call(&[
        "train-recon", "--data", s(&data), "--mask", s(&mask), "--out", s(&run_dir), "--epochs", "1",
        "--batch-size", "4", "--depth", "1", "--base-channels", "2",
    ]);
    assert_eq!(code, 0);
    for f in ["weights.json", "weights.f32", "history.csv", "config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run_dir.join("history.csv")).unwrap().starts_with("epoch,train_loss,val_loss,seconds"));

    let csv = tmp.path().join("m.csv");
    let code = call(&[
        "evaluate", "--mask", s(&mask), "--weights", s(&run_dir.join("weights.json")), "--data", s(&data),
        "--split", "val", "--out", s(&csv),
    ]);
    assert_eq!(code, 0);
    let psnr: f64 = mean_row(&fs::read_to_string(&csv).unwrap())[4].parse().unwrap();
    assert!(psnr.is_finite() && psnr > 10.0, "{psnr}");

    let wrong = tmp.path().join("wrong.pgm");
    assert_eq!(call(&["make-mask", "--height", "8", "--width", "8", "--out", s(&wrong)]), 0);
    let code = call(&[
        "train-recon", "--data", s(&data), "--mask", s(&wrong), "--out", s(&tmp.path().join("r2")), "--epochs", "1",
        "--batch-size", "4", "--depth", "1", "--base-channels", "2",
    ]);
    assert_eq!(code, 2);
    assert!(!tmp.path().join("r2").exists());
}

#[test]
fn train_loupe_exports_masks_and_binarize_reproduces_them() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let run_dir = tmp.path().join("run");
    let code = call(&[
        "train-loupe", "--data", s(&data), "--out", s(&run_dir), "--epochs", "2", "--batch-size", "4", "--depth", "1",
        "--base-channels", "2", "--alpha", "0.25", "--mask-lr", "0.01", "--threads", "2",
    ]);
    assert_eq!(code, 0);
    let mask = read_binary_mask(&run_dir.join("mask.pgm")).unwrap();
    assert_eq!(mask.count(), 64);
    let prob = read_sidecar(&run_dir.join("prob_mask.pgm")).unwrap();
    assert_eq!(prob.alpha, 0.25);

    let again = tmp.path().join("again.pgm");
    assert_eq!(call(&["binarize-mask", "--input", s(&run_dir.join("prob_mask.pgm")), "--out", s(&again)]), 0);
    assert_eq!(read_binary_mask(&again).unwrap().count(), 64);
    let bern = tmp.path().join("bern.pgm");
    assert_eq!(
        call(&[
            "binarize-mask", "--input", s(&run_dir.join("prob_mask.pgm")), "--mode", "bernoulli", "--alpha", "0.5",
            "--out", s(&bern),
        ]),
        0
    );
    assert_eq!(read_sidecar(&bern).unwrap().kind, "binarized-bernoulli");
    let lines = tmp.path().join("lines.pgm");
    assert_eq!(
        call(&[
            "binarize-mask", "--input", s(&run_dir.join("prob_mask.pgm")), "--readout", "columns", "--out", s(&lines),
        ]),
        0
    );
    let lines = read_binary_mask(&lines).unwrap();
    assert!(lines.is_line_structured(ReadoutAxis::Columns));
    assert_eq!(lines.count(), 4 * 16);

    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["mask_learning_rate"], 0.01);
    assert_eq!(config["net"]["depth"], 1);
}

#[test]
fn slope_grid_tabulates_every_pair() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("grid.csv");
    let code = call(&[
        "slope-grid", "--data", s(&data), "--out", s(&out), "--epochs", "1", "--batch-size", "4", "--depth", "1",
        "--base-channels", "2", "--s-values", "50,200", "--t-values", "5",
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "slope_s,slope_t,best_val_loss,best_epoch,stopped_epoch");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("50,5,") && rows[2].starts_with("200,5,"));
}

#[test]
fn gradcheck_command_passes() {
    let (code, stdout, _) = loupe(&["gradcheck", "--size", "8", "--probes", "4"]);
    assert_eq!(code, 0, "{stdout}");
    assert!(stdout.contains("max relative error"));
    assert_eq!(loupe(&["gradcheck", "--size", "7"]).0, 1);
}
