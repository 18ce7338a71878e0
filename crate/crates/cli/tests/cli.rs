use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use odflow::simulator::{make_benchmark_grid, simulate};
use odflow::RegionSet;
use odflow_cli::io::{load_counts, read_centroids, read_flows, write_centroids, write_flows, Window};
use odflow_cli::Cli;
use tempfile::TempDir;

fn run(args: &[&str]) -> anyhow::Result<odflow_cli::report::RunReport> {
    let mut argv = vec!["odflow"];
    argv.extend_from_slice(args);
    odflow_cli::run(&Cli::try_parse_from(argv)?)
}

fn two_regions() -> RegionSet {
    RegionSet::new(vec!["a".into(), "b".into(), "c".into()], vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn complete_counts_pivot_to_panel() {
    let dir = TempDir::new().unwrap();
    let regions = RegionSet::new(vec!["a".into(), "b".into()], vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    let path = write(
        dir.path(),
        "counts.csv",
        "region_id,timestamp,count\nb,2020-02-11 06:00:00,5\na,2020-02-11 06:00:00,1\na,2020-02-11 07:00:00,2\n\
         b,2020-02-11 07:00:00,6\na,2020-02-11 08:00:00,3\nb,2020-02-11 08:00:00,7\n",
    );
    let loaded = load_counts(&path, &regions, &Window::All).unwrap();
    assert_eq!(loaded.panel.snapshots(), 3);
    assert_eq!(loaded.panel.regions(), 2);
    assert_eq!(loaded.panel.data(), &[1.0, 5.0, 2.0, 6.0, 3.0, 7.0]);
    assert_eq!(loaded.timestamps[2], "2020-02-11 08:00:00");
    assert!(loaded.dropped.is_empty());

    let window = Window::Snapshots { first: 1, last: 2 };
    let loaded = load_counts(&path, &regions, &window).unwrap();
    assert_eq!(loaded.panel.data(), &[2.0, 6.0, 3.0, 7.0]);
    let window = Window::Times { from: None, to: Some("2020-02-11T07:00".into()) };
    let loaded = load_counts(&path, &regions, &window).unwrap();
    assert_eq!(loaded.panel.data(), &[1.0, 5.0, 2.0, 6.0]);
}

#[test]
fn region_with_a_gap_is_dropped() {
    let dir = TempDir::new().unwrap();
    let path = write(
        dir.path(),
        "counts.csv",
        "region_id,timestamp,count\na,0,1\na,1,2\na,2,3\nb,0,4\nb,2,6\nc,0,7\nc,1,8\nc,2,9\n",
    );
    let loaded = load_counts(&path, &two_regions(), &Window::All).unwrap();
    assert_eq!(loaded.dropped, vec!["b".to_owned()]);
    assert_eq!(loaded.regions.ids(), &["a".to_owned(), "c".to_owned()]);
    assert_eq!(loaded.panel.data(), &[1.0, 7.0, 2.0, 8.0, 3.0, 9.0]);
    // b lacks snapshot 1, which this window still needs
    let loaded = load_counts(&path, &two_regions(), &Window::Snapshots { first: 1, last: 2 }).unwrap();
    assert_eq!(loaded.dropped, vec!["b".to_owned()]);
    let loaded = load_counts(&path, &two_regions(), &Window::Snapshots { first: 0, last: 0 });
    assert!(loaded.is_err());
}

#[test]
fn malformed_counts_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("region_id,timestamp,count\na,0,1\na,0,2\n", "duplicate"),
        ("region_id,timestamp,count\na,0,1\nzz,0,2\nyy,1,2\n", "yy, zz"),
        ("region_id,timestamp,count\na,1,1\na,0,2\n", "not increasing"),
        ("region_id,timestamp,count\na,0,1\na,1,1\na,3,1\n", "evenly spaced"),
        ("region_id,timestamp,count\na,0,-1\n", "nonnegative"),
        ("region_id,timestamp,count\na,noon,1\n", "timestamp"),
    ];
    for (k, (text, needle)) in cases.iter().enumerate() {
        let path = write(dir.path(), &format!("bad{k}.csv"), text);
        let err = load_counts(&path, &two_regions(), &Window::All).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains(needle), "case {k}: {msg}");
    }
}

#[test]
fn flows_roundtrip_through_csv() {
    let spec = make_benchmark_grid();
    let truth = simulate(&spec).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("flows.csv");
    write_flows(&path, &truth.flows, &spec.regions).unwrap();
    let back = read_flows(&path, &spec.regions, false).unwrap();
    assert_eq!(back, truth.flows);

    let centroids = dir.path().join("centroids.csv");
    write_centroids(&centroids, &spec.regions).unwrap();
    assert_eq!(read_centroids(&centroids).unwrap(), spec.regions);
}

#[test]
fn simulate_fit_evaluate() {
    let dir = TempDir::new().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    run(&["simulate", "--benchmark", "grid", "--out", &d("sim")]).unwrap();
    for file in ["centroids.csv", "counts.csv", "truth_flows.csv", "truth_params.json", "scenario.json", "report.json"]
    {
        assert!(dir.path().join("sim").join(file).exists(), "{file}");
    }
    let fit = run(&[
        "fit-exact",
        "--counts",
        &d("sim/counts.csv"),
        "--centroids",
        &d("sim/centroids.csv"),
        "--truth",
        &d("sim/truth_flows.csv"),
        "--out",
        &d("fit"),
    ])
    .unwrap();
    let fitted = fit.metrics.expect("metrics when truth is given");
    assert!(fitted.nae.is_finite() && fitted.nae < 0.1, "{fitted:?}");

    let eval = run(&[
        "evaluate",
        "--truth",
        &d("sim/truth_flows.csv"),
        "--flows",
        &d("fit/flows.csv"),
        "--centroids",
        &d("sim/centroids.csv"),
        "--out",
        &d("eval"),
    ])
    .unwrap();
    assert_eq!(eval.metrics, Some(fitted));
    let report = json(&dir.path().join("eval/report.json"));
    assert_eq!(report["metrics"]["nae"].as_f64(), Some(fitted.nae));
    let inout = fs::read_to_string(dir.path().join("eval/inout.csv")).unwrap();
    assert_eq!(inout.lines().count(), 10);

    let report = json(&dir.path().join("fit/report.json"));
    assert_eq!(report["config"]["command"], "fit-exact");
    assert_eq!(report["termination"], "converged");
    assert!(report["trace"].as_array().unwrap().len() >= 2);
    assert!(report["error"].is_null());
    assert_eq!(report["scale"]["factor"].as_f64(), Some(1.0));
}

#[test]
fn identical_runs_write_identical_flows() {
    let dir = TempDir::new().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    run(&["simulate", "--benchmark", "grid", "--seed", "4", "--out", &d("sim")]).unwrap();
    for out in ["a", "b"] {
        run(&[
            "fit-approx",
            "--counts",
            &d("sim/counts.csv"),
            "--centroids",
            &d("sim/centroids.csv"),
            "--rounds",
            "2",
            "--out",
            &d(out),
        ])
        .unwrap();
        run(&[
            "fit-exact",
            "--counts",
            &d("sim/counts.csv"),
            "--centroids",
            &d("sim/centroids.csv"),
            "--init",
            "jittered",
            "--seed",
            "9",
            "--out",
            &d(&format!("{out}-exact")),
        ])
        .unwrap();
    }
    for (a, b) in [("a", "b"), ("a-exact", "b-exact")] {
        let fa = fs::read(dir.path().join(a).join("flows.csv")).unwrap();
        let fb = fs::read(dir.path().join(b).join("flows.csv")).unwrap();
        assert!(fa == fb, "{a} and {b} differ");
    }
}

#[test]
fn sweep_writes_one_row_per_setting() {
    let dir = TempDir::new().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    run(&["simulate", "--benchmark", "grid", "--out", &d("sim")]).unwrap();
    let report = run(&[
        "sweep",
        "--counts",
        &d("sim/counts.csv"),
        "--centroids",
        &d("sim/centroids.csv"),
        "--truth",
        &d("sim/truth_flows.csv"),
        "--lambdas",
        "1,10",
        "--epsilons",
        "1e-2,1e-4",
        "--out",
        &d("sweep"),
    ])
    .unwrap();
    assert_eq!(report.sweep.len(), 4);
    assert!(report.sweep.iter().all(|r| r.nae.is_some()));
    let table = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.starts_with("lambda,epsilon,termination,"));
}

#[test]
fn failures_still_write_a_report() {
    let dir = TempDir::new().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    write(dir.path(), "centroids.csv", "region_id,x,y\na,0,0\nb,1,0\n");
    write(dir.path(), "counts.csv", "region_id,timestamp,count\na,0,1\nq,0,2\n");
    let err = run(&["fit-exact", "--counts", &d("counts.csv"), "--centroids", &d("centroids.csv"), "--out", &d("out")])
        .unwrap_err();
    assert!(format!("{err:#}").contains('q'));
    let report = json(&dir.path().join("out/report.json"));
    assert!(report["error"].as_str().unwrap().contains("not in the centroid file"));
    assert_eq!(report["config"]["command"], "fit-exact");
}
