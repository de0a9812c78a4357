use std::path::Path;
use std::process::{Command, Output};

fn litv2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_litv2")).args(args).output().expect("spawn litv2")
}

fn ok(args: &[&str]) -> String {
    let out = litv2(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    litv2(args).status.code().unwrap()
}

fn total(stdout: &str) -> u64 {
    stdout.lines().find_map(|l| l.strip_prefix("total ")).unwrap().trim().parse().unwrap()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn flops_examples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let msa = ok(&["flops", "attn", "--mech", "msa", "--dim", "768", "--heads", "12", "--tokens", "196", "--out", out]);
    assert_eq!(total(&msa), 521_428_992);
    assert!(msa.contains("params 2362368"));
    let hilo = ok(&[
        "flops", "attn", "--mech", "hilo", "--dim", "768", "--heads", "12", "--alpha", "0.9", "--window", "2", "--tokens",
        "196", "--out", out,
    ]);
    assert_eq!(total(&hilo), 298_296_320);
    assert!(hilo.contains("params 2198528"));
    let degenerate = ok(&[
        "flops", "attn", "--mech", "hilo", "--alpha", "1.0", "--window", "1", "--dim", "768", "--heads", "12", "--tokens",
        "196", "--out", out,
    ]);
    assert_eq!(total(&degenerate), total(&msa));
    let m = json(dir.path().join("manifest.json"));
    assert_eq!(m["subcommand"], "flops attn");
    assert_eq!(m["files"][0], "flops.json");
    assert_eq!(json(dir.path().join("flops.json"))["total"], 521_428_992);
}

#[test]
fn flops_model_reports_stages() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&["flops", "model", "--variant", "S", "--res", "224", "--out", dir.path().to_str().unwrap()]);
    for stage in ["stage1", "stage2", "stage3", "stage4", "head"] {
        assert!(s.contains(stage), "{s}");
    }
    let t = total(&s) as f64;
    assert!((3.3e9..=4.1e9).contains(&t));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["flops", "attn", "--alpha", "1.5", "--out", out]), 1);
    assert_eq!(code(&["flops", "attn", "--heads", "5", "--dim", "768", "--out", out]), 1);
    assert_eq!(code(&["flops", "model", "--variant", "Q", "--out", out]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    let bad = litv2(&["bench", "attn", "--mechs", "msa,linear", "--out", out]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("msa, hilo, sra, window"), "{err}");
}

#[test]
fn help_everywhere_exits_zero() {
    let subcommands: &[&[&str]] = &[
        &[],
        &["flops"],
        &["flops", "attn"],
        &["flops", "model"],
        &["sweep"],
        &["bench"],
        &["bench", "attn"],
        &["bench", "model"],
        &["gradcheck"],
        &["train-toy"],
        &["spectrum"],
        &["export-dataset"],
        &["replay"],
    ];
    for sub in subcommands {
        let mut args = sub.to_vec();
        args.push("--help");
        assert_eq!(code(&args), 0, "{args:?}");
    }
}

#[test]
fn alpha_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let s = ok(&[
        "sweep", "alpha", "--tokens", "196", "--dim", "768", "--heads", "12", "--window", "2", "--grid",
        "0,0.25,0.5,0.75,0.9,1.0", "--out", out,
    ]);
    assert!(s.contains("minimum at alpha 0.9"));
    let rows = csv_rows(dir.path().join("sweep_alpha.csv"));
    assert_eq!(rows.len(), 6);
    let best = rows.iter().min_by_key(|r| r[2].parse::<u64>().unwrap()).unwrap();
    assert_eq!(best[0], "0.9");
    ok(&["sweep", "alpha", "--grid", "0.5", "--out", out]);
    assert_eq!(csv_rows(dir.path().join("sweep_alpha.csv")).len(), 1);
}

#[test]
fn resolution_sweep_reports_crossover() {
    for (dim, want) in [("96", 304), ("768", 2320)] {
        let dir = tempfile::tempdir().unwrap();
        ok(&["sweep", "hilo-res", "--window", "2", "--alpha", "0.5", "--dim", dim, "--out", dir.path().to_str().unwrap()]);
        let s = json(dir.path().join("summary.json"));
        assert_eq!(s["analytic_crossover"], want);
        assert_eq!(s["scanned_crossover"], want);
        let rows = csv_rows(dir.path().join("sweep_hilo-res.csv"));
        assert_eq!(rows.len(), 14 * 3);
    }
}

#[test]
fn window_sweep_prefers_larger_windows_at_high_resolution() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sweep", "window", "--grid", "2,4", "--res", "56", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(json(dir.path().join("summary.json"))["decreasing_in_window"], true);
}

#[test]
fn sweep_config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(&cfg, "dim = 768\nheads = 12\nwindow = 2\ntokens = 196\ngrid = [0.0, 0.9]\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["sweep", "alpha", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(&["sweep", "alpha", "--grid", "0,0.9", "--out", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(a.join("sweep_alpha.csv")).unwrap(), std::fs::read(b.join("sweep_alpha.csv")).unwrap());

    std::fs::write(&cfg, "grid = []\n").unwrap();
    assert_eq!(code(&["sweep", "alpha", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]), 1);
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert_eq!(code(&["sweep", "alpha", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]), 1);
}

#[test]
fn bench_rows_match_cost_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "bench", "attn", "--res", "4", "--dim", "16", "--heads", "4", "--alpha", "0.5", "--window", "2", "--local-window",
        "2", "--batch", "2", "--runs", "1", "--warmup", "0", "--out", out,
    ]);
    let rows = json(dir.path().join("bench.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["stats"]["stddev_ips"], 0.0);
        let mech = r["name"].as_str().unwrap();
        let f = ok(&[
            "flops", "attn", "--mech", mech, "--res", "4", "--dim", "16", "--heads", "4", "--alpha", "0.5", "--window", "2",
            "--local-window", "2", "--out", out,
        ]);
        assert_eq!(r["flops"].as_u64().unwrap(), total(&f), "{mech}");
        let params: u64 = f.lines().find_map(|l| l.strip_prefix("params ")).unwrap().parse().unwrap();
        assert_eq!(r["params"].as_u64().unwrap(), params, "{mech}");
    }
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gradcheck", "--target", "ops", "--out", out]);
    ok(&["gradcheck", "--target", "hilo", "--seed", "0..19", "--out", out]);
    let report = json(dir.path().join("gradcheck.json"));
    assert_eq!(report["checks"].as_array().unwrap().len(), 20);
    let bad = litv2(&["gradcheck", "--target", "ops", "--corrupt-grad", "0.01", "--out", out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("matmul"));
}

#[test]
fn training_is_repeatable_and_feeds_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["train-toy", "--seed", "4", "--n", "6", "--epochs", "2", "--full", "--out", d.to_str().unwrap()]);
    }
    assert_eq!(std::fs::read(a.join("history.csv")).unwrap(), std::fs::read(b.join("history.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());
    let history = std::fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,accuracy\n"));
    assert_eq!(history.lines().count(), 3);

    let spec = dir.path().join("spectrum");
    let ckpt = a.join("checkpoint.json");
    ok(&["spectrum", "--ckpt", ckpt.to_str().unwrap(), "--samples", "4", "--channels", "3", "--out", spec.to_str().unwrap()]);
    for branch in ["hifi", "lofi"] {
        let n = std::fs::read_dir(spec.join(branch)).unwrap().count();
        assert_eq!(n, 6, "{branch}");
    }
    let s = json(spec.join("summary.json"));
    assert_eq!(s["hifi"]["maps"], 8);
    let m = json(spec.join("manifest.json"));
    assert!(m["files"].as_array().unwrap().iter().any(|f| f == "hifi/0.csv" || f.as_str().unwrap().starts_with("hifi/")));
}

#[test]
fn broken_checkpoints_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["train-toy", "--n", "2", "--epochs", "1", "--lr", "0", "--out", run.to_str().unwrap()]);
    let ckpt = run.join("checkpoint.json");
    let spec = dir.path().join("spectrum");
    let args = |c: &Path| {
        vec!["spectrum".to_string(), "--ckpt".into(), c.to_str().unwrap().into(), "--out".into(), spec.to_str().unwrap().into()]
    };
    let run_args = |v: Vec<String>| litv2(&v.iter().map(String::as_str).collect::<Vec<_>>());

    let missing = run_args(args(&dir.path().join("missing.json")));
    assert_eq!(missing.status.code(), Some(3));

    let blob = run.join("checkpoint.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let truncated = run_args(args(&ckpt));
    assert_eq!(truncated.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&truncated.stderr).contains("checkpoint entry"));
}

#[test]
fn export_writes_tnsr() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["export-dataset", "--n", "4", "--seed", "2", "--out", dir.path().to_str().unwrap()]);
    let images = litv2::io::load(dir.path().join("images.tnsr")).unwrap();
    assert_eq!(images.shape(), &[4, 32, 32, 3]);
    let labels = litv2::io::load(dir.path().join("labels.tnsr")).unwrap().into_typed::<f64>();
    assert_eq!(labels.data(), &[0.0, 1.0, 0.0, 1.0]);
    let data = litv2::train::gen_freq_dataset(2, 4).unwrap();
    assert_eq!(&images.into_typed::<f64>().data()[..32 * 32 * 3], data[0].image.data());
}

#[test]
fn replay_reproduces_f64_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&["train-toy", "--dtype", "f64", "--n", "4", "--epochs", "2", "--full", "--seed", "9", "--out", first.to_str().unwrap()]);
    let again = dir.path().join("again");
    ok(&["replay", first.join("manifest.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    for f in ["history.csv", "checkpoint.bin", "checkpoint.json", "summary.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
    let m = json(first.join("manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["options"]["dtype"], "f64");
}
