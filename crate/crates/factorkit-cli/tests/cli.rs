//! End-to-end tests of the command-line binary: exit codes, stdout
//! contracts and file outputs.

use std::path::Path;
use std::process::{Command, Output};

fn factorkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factorkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn write_ppm(path: &Path, w: usize, h: usize) {
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..w * h * 3 {
        bytes.push((i * 37 % 251) as u8);
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn analyze_googlenet_totals_line_ends_with_feature_count() {
    let out = factorkit(&["analyze", "googlenet4e", "--input", "3x1080x1920"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("output 4e_concat 832x67x120"), "{}", text);
    let totals = text.lines().find(|l| l.starts_with("totals")).expect("totals line");
    assert!(totals.ends_with("features=6689280"), "{}", totals);
}

#[test]
fn analyze_accepts_whc_order() {
    let out = factorkit(&["analyze", "googlenet4e", "--input", "1920x1080x3", "--order", "whc"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("832x67x120"));
}

#[test]
fn analyze_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("cost.csv");
    let out = factorkit(&[
        "analyze",
        "factornet_v2",
        "--input",
        "3x270x480",
        "--mult",
        "1/8",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // stride-16 factors: 270x480 input puts every exit on a 17x30 grid
    let text = stdout(&out);
    assert_eq!(text.matches("x17x30\n").count(), 4, "{}", text);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("layer,kind,out_channels,out_height,out_width,weights,macs,non_mac_ops,note\n"));
    assert!(csv.lines().count() > 10);
}

#[test]
fn analyze_spec_file_with_cycle_exits_2_and_prints_violation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("cycle.fks");
    std::fs::write(&spec, "input 1x8x8\nrelu a in=b\nrelu b in=a\n").unwrap();
    let out = factorkit(&["analyze", spec.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cycle"), "{}", stderr(&out));
}

#[test]
fn unknown_model_exits_2() {
    let out = factorkit(&["analyze", "resnet50"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("neither a zoo model"));
}

#[test]
fn unknown_flag_exits_2() {
    let out = factorkit(&["analyze", "googlenet4e", "--frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_prints_self_ratio_one_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("cmp.csv");
    let out = factorkit(&[
        "compare",
        "googlenet4e",
        "factornet_v1",
        "factornet_v2",
        "--baseline",
        "googlenet4e",
        "--input",
        "3x1080x1920",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let base_row = csv.lines().find(|l| l.starts_with("googlenet4e,")).unwrap();
    assert!(base_row.contains("1.000000,1.000000,1.000000"), "{}", base_row);
    let v1_row = csv.lines().find(|l| l.starts_with("factornet_v1,")).unwrap();
    let weight_ratio: f64 = v1_row.split(',').nth(4).unwrap().parse().unwrap();
    assert!(weight_ratio >= 5.0, "{}", v1_row);
}

#[test]
fn compare_needs_two_models() {
    let out = factorkit(&["compare", "googlenet4e"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_writes_one_tensor_file_per_factor_exit() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    write_ppm(&img, 64, 48);
    let out_dir = dir.path().join("outs");
    let out = factorkit(&[
        "run",
        "factornet_v2",
        "--mult",
        "1/8",
        "--image",
        img.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().collect();
    assert_eq!(files.len(), 4, "one output per factor");
    assert_eq!(stdout(&out).matches("output ").count(), 4);
}

#[test]
fn run_same_seed_twice_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    write_ppm(&img, 48, 32);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = factorkit(&[
            "run",
            "factornet_v1",
            "--mult",
            "1/8",
            "--image",
            img.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for entry in std::fs::read_dir(&a).unwrap() {
        let entry = entry.unwrap();
        let other = b.join(entry.file_name());
        assert_eq!(
            std::fs::read(entry.path()).unwrap(),
            std::fs::read(&other).unwrap(),
            "{:?} differs between identical runs",
            entry.file_name()
        );
    }
}

#[test]
fn run_missing_image_exits_2() {
    let out = factorkit(&["run", "factornet_v2", "--image", "/nonexistent/x.ppm"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_accepts_saved_params_and_ignores_seed_then() {
    use factorkit::zoo::{build, Multiplier, ZooConfig, ZooModel};
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.ppm");
    write_ppm(&img, 32, 32);

    let graph = build(&ZooConfig::new(
        ZooModel::FactorNetV2,
        Multiplier::new(1, 8).unwrap(),
        factorkit::Shape::new(3, 32, 32),
    ));
    let params = factorkit::params::init_params(&graph, 99).unwrap();
    let params_path = dir.path().join("weights.fkt");
    params.save(&graph, &params_path).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out_dir, seed) in [(&a, "1"), (&b, "2")] {
        let out = factorkit(&[
            "run",
            "factornet_v2",
            "--mult",
            "1/8",
            "--image",
            img.to_str().unwrap(),
            "--params",
            params_path.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    // With explicit parameters the seed plays no role.
    for entry in std::fs::read_dir(&a).unwrap() {
        let entry = entry.unwrap();
        assert_eq!(
            std::fs::read(entry.path()).unwrap(),
            std::fs::read(b.join(entry.file_name())).unwrap()
        );
    }
}

#[test]
fn gradcheck_passes_on_shrunk_v2() {
    let out = factorkit(&[
        "gradcheck",
        "factornet_v2",
        "--mult",
        "1/8",
        "--input",
        "3x32x32",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("gradcheck PASS"), "{}", text);
}

#[test]
fn bench_lane_cap_via_env_and_csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_factorkit"))
        .args([
            "bench",
            "factornet_v2",
            "--mult",
            "1/8",
            "--input",
            "3x64x64",
            "--lanes",
            "8",
            "--repeats",
            "5",
            "--out",
            csv_path.to_str().unwrap(),
        ])
        .env("FACTORKIT_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("model,lanes,seq_ms,par_ms,speedup\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("factornet_v2,2,"), "{}", csv);
}

#[test]
fn bench_rejects_bad_env_cap() {
    let out = Command::new(env!("CARGO_BIN_EXE_factorkit"))
        .args(["bench", "factornet_v2", "--mult", "1/8", "--input", "3x64x64"])
        .env("FACTORKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn export_roundtrips_through_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("v1.fks");
    let out = factorkit(&[
        "export",
        "factornet_v1",
        "--input",
        "3x1080x1920",
        "--out",
        spec.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let direct = factorkit(&["analyze", "factornet_v1", "--input", "3x1080x1920"]);
    let via_file = factorkit(&["analyze", spec.to_str().unwrap()]);
    assert_eq!(code(&via_file), 0, "{}", stderr(&via_file));
    // Same totals whether built from the zoo or parsed back from the file.
    let totals = |o: &Output| {
        stdout(o).lines().find(|l| l.starts_with("totals")).unwrap().to_string()
    };
    assert_eq!(totals(&direct), totals(&via_file));
}

#[test]
fn validate_reports_ok_for_zoo_models() {
    for model in ["googlenet4e", "factornet_v1", "factornet_v2"] {
        let out = factorkit(&["validate", model, "--input", "3x270x480"]);
        assert_eq!(code(&out), 0, "{}: {}", model, stderr(&out));
        assert!(stdout(&out).contains("well-formed"));
    }
}

#[test]
fn mult_on_spec_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("m.fks");
    std::fs::write(&spec, "input 1x8x8\nrelu a in=@input\n").unwrap();
    let out = factorkit(&["analyze", spec.to_str().unwrap(), "--mult", "1/2"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("zoo models only"));
}
