//! End-to-end checks of the `cais` binary: exit codes, report formats and
//! cross-command consistency on real files.

use std::path::Path;
use std::process::{Command, Output};

use cais_core::tensor::{write_tensor, Tensor};

fn cais(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cais"))
        .args(args)
        .output()
        .expect("failed to launch the binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_matches_golden() {
    let out = cais(&["--help"]);
    assert!(out.status.success());
    let expected = include_str!("data/help.txt");
    assert_eq!(
        stdout(&out),
        expected,
        "--help text drifted; update tests/data/help.txt deliberately if so"
    );
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = cais(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("scene");
    // d_max must stay below half the image width.
    let out = cais(&[
        "gen-synthetic",
        "--size",
        "8x8",
        "--dmax",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_input_file_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cais(&[
        "upsample",
        "--cv",
        tmp.path().join("absent.cvt1").to_str().unwrap(),
        "--method",
        "nearest",
        "--scale",
        "2",
        "--out",
        tmp.path().join("out.cvt1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_synthetic_is_deterministic_and_self_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = cais(&[
            "gen-synthetic",
            "--seed",
            "3",
            "--size",
            "24x24",
            "--dmax",
            "6",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for name in ["left.cvt1", "right.cvt1", "gt.pfm", "mask.cvt1"] {
            assert!(dir.join(name).exists(), "missing {name}");
        }
    }
    for name in ["left.cvt1", "right.cvt1", "gt.pfm", "mask.cvt1"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    // Ground truth compared against itself is a perfect prediction.
    let out = cais(&[
        "eval",
        "--pred",
        a.join("gt.pfm").to_str().unwrap(),
        "--gt",
        a.join("gt.pfm").to_str().unwrap(),
        "--mask",
        a.join("mask.cvt1").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("epe = 0.000000"), "{text}");
    assert!(text.contains("bad_0.5 = 0.000000"), "{text}");
}

fn write_one_hot_guidance(path: &Path, window: usize, h: usize, w: usize) {
    let k = window * window;
    let mut data = vec![0.0f32; k * h * w];
    let center = (k - 1) / 2;
    data[center * h * w..(center + 1) * h * w].fill(1.0);
    write_tensor(path, &Tensor::new(vec![k, h, w], data).unwrap()).unwrap();
}

#[test]
fn upsample_modes_agree_on_one_hot_guidance() {
    let tmp = tempfile::tempdir().unwrap();
    let cv_path = tmp.path().join("cv.cvt1");
    let (h, w, d, s) = (3usize, 4usize, 2usize, 2usize);
    let cv = cais_core::aggregate::seeded_volume::<f32>(h, w, d, 42);
    write_tensor(&cv_path, &cv.to_tensor()).unwrap();
    let g_path = tmp.path().join("guidance.cvt1");
    write_one_hot_guidance(&g_path, 3, h * s, w * s);

    let mut outputs = Vec::new();
    for mode in ["decomposed", "full3d"] {
        let out_path = tmp.path().join(format!("{mode}.cvt1"));
        let out = cais(&[
            "upsample",
            "--cv",
            cv_path.to_str().unwrap(),
            "--guidance-left",
            g_path.to_str().unwrap(),
            "--guidance-right",
            g_path.to_str().unwrap(),
            "--scale",
            "2",
            "--mode",
            mode,
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("out_shape = 6x8x4"));
        outputs.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "modes disagree on one-hot guidance");

    // Nearest-neighbor baseline produces the same volume here.
    let base_path = tmp.path().join("nearest.cvt1");
    let out = cais(&[
        "upsample",
        "--cv",
        cv_path.to_str().unwrap(),
        "--method",
        "nearest",
        "--scale",
        "2",
        "--out",
        base_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(outputs[0], std::fs::read(&base_path).unwrap());
}

#[test]
fn upsample_requires_exactly_one_of_mode_and_method() {
    let tmp = tempfile::tempdir().unwrap();
    let cv_path = tmp.path().join("cv.cvt1");
    let cv = cais_core::aggregate::seeded_volume::<f32>(2, 2, 2, 1);
    write_tensor(&cv_path, &cv.to_tensor()).unwrap();
    let out = cais(&[
        "upsample",
        "--cv",
        cv_path.to_str().unwrap(),
        "--scale",
        "2",
        "--out",
        tmp.path().join("out.cvt1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes_for_every_target() {
    for target in ["guidance", "cais", "soft_argmin", "loss", "end_to_end"] {
        let out = cais(&["gradcheck", "--target", target, "--seed", "1"]);
        assert!(
            out.status.success(),
            "{target}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("max_relative_error"));
    }
    let out = cais(&["gradcheck", "--target", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_reports_matching_counters_and_ratio() {
    let out = cais(&["bench", "--size", "4x4x2", "--scale", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.matches("counters_agree = true").count(), 2, "{text}");
    let ratio_line = text
        .lines()
        .find(|l| l.starts_with("aggregation_flop_ratio = "))
        .expect("ratio line missing");
    let ratio: f64 = ratio_line.split(" = ").nth(1).unwrap().parse().unwrap();
    assert!(ratio > 1.0, "{ratio_line}");
}

#[test]
fn train_toy_writes_parameters_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    // A short smoke run; quality is covered by the acceptance suite.
    let out = cais(&[
        "train-toy",
        "--iters",
        "3",
        "--seed",
        "1",
        "--size",
        "16x16",
        "--dmax",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("epe_final = "), "{text}");
    assert!(text.contains("epe_trilinear = "), "{text}");
    assert!(dir.join("report.txt").exists());
    assert!(dir.join("w1.cvt1").exists());
}
