use std::collections::HashMap;
use std::path::PathBuf;
use std::process::{Command, Output};

fn locagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locagg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scene() -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/scenes/textureless.json");
    p.to_string_lossy().into_owned()
}

#[test]
fn identity_aggregate_reports_zero_deviation() {
    let o = locagg(&["aggregate", "--mode", "lsa", "--k", "1", "--alpha", "0", "--check-oracle"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("max abs deviation vs oracle: 0e0"), "{}", stdout(&o));
}

#[test]
fn seeded_aggregate_matches_oracle() {
    for mode in ["lsa", "slsa", "both"] {
        let o = locagg(&["aggregate", "--mode", mode, "--k", "3", "--check-oracle", "--precision", "double"]);
        assert!(o.status.success());
        let line = stdout(&o).lines().find(|l| l.contains("deviation")).unwrap().to_string();
        let dev: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(dev < 1e-10, "{mode}: {line}");
    }
}

#[test]
fn params_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("params.bin");
    let p = p.to_str().unwrap();
    let a = locagg(&["aggregate", "--mode", "both", "--seed", "4", "--save-params", p, "--check-oracle"]);
    assert!(a.status.success());
    let b = locagg(&["aggregate", "--mode", "both", "--seed", "4", "--params", p, "--check-oracle"]);
    assert!(b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn bench_emits_four_rows_per_size() {
    let o = locagg(&["bench", "--sizes", "8", "--reps", "5"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "path,op,H,W,C,k,reps,wall_time_ns_median,peak_extra_bytes");
    assert_eq!(lines.len(), 5);
    for (i, prefix) in ["fast,lsa,8,8", "oracle,lsa,8,8", "fast,slsa,8,8", "oracle,slsa,8,8"].iter().enumerate() {
        assert!(lines[i + 1].starts_with(prefix), "{}", lines[i + 1]);
    }
}

#[test]
fn eval_shows_aggregation_beating_raw_in_the_patch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    let o = locagg(&[
        "eval",
        "--spec",
        &scene(),
        "--pipelines",
        "raw,lsa+slsa",
        "--seeds",
        "6",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut sums: HashMap<String, (f64, usize)> = HashMap::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e = sums.entry(f[0].to_string()).or_default();
        e.0 += f[8].parse::<f64>().unwrap();
        e.1 += 1;
    }
    let mean = |k: &str| sums[k].0 / sums[k].1 as f64;
    assert_eq!(sums["raw"].1, 6);
    assert!(mean("lsa+slsa") < mean("raw"), "{text}");
}

#[test]
fn costvol_and_viz_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cv.bin");
    let o = locagg(&["costvol", "--h", "3", "--w", "4", "--c", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"LAGT");

    let flo_dir = dir.path().join("flo");
    let o = locagg(&[
        "eval",
        "--spec",
        &scene(),
        "--pipelines",
        "raw",
        "--seeds",
        "1",
        "--flo-dir",
        flo_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let flo = flo_dir.join("raw_0.flo");
    let ppm = dir.path().join("raw.ppm");
    let o = locagg(&["viz", "--flo", flo.to_str().unwrap(), "--ppm", ppm.to_str().unwrap()]);
    assert!(o.status.success());
    let img = std::fs::read(&ppm).unwrap();
    assert!(img.starts_with(b"P6\n24 24\n255\n"));
    assert_eq!(img.len(), 13 + 24 * 24 * 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(locagg(&["aggregate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(locagg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(locagg(&["aggregate", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn contract_errors_exit_1_and_name_the_module() {
    let o = locagg(&["aggregate", "--k", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("local_attention"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.flo");
    std::fs::write(&bad, b"nope").unwrap();
    let o = locagg(&["viz", "--flo", bad.to_str().unwrap(), "--ppm", dir.path().join("x.ppm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("io_formats"));
    let o = locagg(&["bench", "--sizes", "8", "--reps", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bench_cli"));
}
